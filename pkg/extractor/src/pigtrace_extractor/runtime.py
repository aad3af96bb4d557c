"""Checkpoint loading and per-step capture of logits and attention.

One CheckpointRuntime holds one loaded model; jobs run through it
sequentially (shard prompt lists across processes for parallelism).
All forwards run in inference mode — dropout disabled, no autograd.

Per step the runtime captures, at the final position:

- the last layer's logits, taken directly from the model output so they
  are bit-identical to what the runtime itself decodes from;
- early-exit logits for each requested earlier layer — the model's own
  output head applied to that layer's hidden state (after the final
  normalization module, matching how the head sees the last layer);
- the last attention module's weights, averaged over heads.  Attention
  weights come per query head even for grouped- or multi-query
  variants, so the mean is already over effective heads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ExtractionError

log = logging.getLogger("pigtrace_extractor.runtime")

_FINAL_NORM_ATTRS = ("ln_f", "norm", "final_layernorm", "final_layer_norm", "layer_norm")


def _locate_final_norm(model) -> torch.nn.Module:
    base = model.base_model
    for name in _FINAL_NORM_ATTRS:
        module = getattr(base, name, None)
        if isinstance(module, torch.nn.Module):
            return module
    raise ExtractionError(
        f"cannot locate the final normalization module on {type(base).__name__}; "
        f"looked for attributes {_FINAL_NORM_ATTRS}"
    )


@dataclass(frozen=True)
class StepCapture:
    """Everything recorded at one decode position."""

    layer_logits: dict[int, np.ndarray]
    attention: np.ndarray
    next_token: int


class CheckpointRuntime:
    """A loaded causal LM plus its tokenizer, ready to capture steps."""

    def __init__(self, model_id, *, device: str = "cpu"):
        from transformers import AutoModelForCausalLM, AutoTokenizer

        self.model_id = str(model_id)
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(model_id)
            model = AutoModelForCausalLM.from_pretrained(
                model_id, attn_implementation="eager"
            )
        except (OSError, ValueError) as exc:
            raise ExtractionError(f"cannot load checkpoint {model_id!r}: {exc}") from exc
        if not getattr(self.tokenizer, "is_fast", False):
            raise ExtractionError(
                f"checkpoint {model_id!r} has no fast tokenizer; character offset "
                "mapping needs one"
            )
        self.device = torch.device(device)
        self.model = model.to(self.device).eval()
        self.num_layers = int(self.model.config.num_hidden_layers)
        self.vocab_size = int(self.model.config.vocab_size)
        self.eos_token_id = self.model.config.eos_token_id
        self._head = self.model.get_output_embeddings()
        if self._head is None:
            raise ExtractionError(f"checkpoint {model_id!r} exposes no output head")
        self._final_norm = _locate_final_norm(self.model)
        log.info(
            "loaded %s: %d layers, vocab %d, device %s",
            self.model_id, self.num_layers, self.vocab_size, self.device,
        )

    # -- tokenization -------------------------------------------------

    def encode_with_offsets(self, text: str) -> tuple[list[int], list[tuple[int, int]]]:
        enc = self.tokenizer(text, return_offsets_mapping=True, add_special_tokens=False)
        return list(enc["input_ids"]), [tuple(pair) for pair in enc["offset_mapping"]]

    def encode(self, text: str) -> list[int]:
        return list(self.tokenizer(text, add_special_tokens=False)["input_ids"])

    def decode(self, ids: Sequence[int]) -> str:
        return self.tokenizer.decode(list(ids))

    # -- forward capture ----------------------------------------------

    def capture_steps(
        self,
        prompt_ids: Sequence[int],
        layers: Sequence[int],
        *,
        forced: Sequence[int] | None = None,
        max_new_tokens: int = 0,
    ) -> list[StepCapture]:
        """Prefill the prompt, then capture one step per emitted token.

        With forced ids the walk is teacher-forced over exactly those
        tokens; otherwise it follows the runtime's own greedy argmax for
        up to max_new_tokens steps, stopping after an end-of-sequence
        token is chosen (the step choosing it is still captured).
        """
        if not prompt_ids:
            raise ExtractionError("prompt tokenizes to no tokens")
        if forced is not None and len(forced) == 0:
            raise ExtractionError("forced token list is empty")
        if forced is None and max_new_tokens < 1:
            raise ExtractionError("generation needs max_new_tokens >= 1")

        wanted = sorted(set(int(j) for j in layers))
        for j in wanted:
            if not 0 <= j <= self.num_layers:
                raise ExtractionError(
                    f"layer {j} outside this checkpoint's depth [0, {self.num_layers}]"
                )

        captures: list[StepCapture] = []
        with torch.inference_mode():
            ids = torch.tensor([list(prompt_ids)], dtype=torch.long, device=self.device)
            out = self._forward(ids, past=None)
            captures.append(self._capture(out, wanted))
            past = out.past_key_values
            while True:
                if forced is not None:
                    if len(captures) == len(forced):
                        break
                    token = int(forced[len(captures) - 1])
                else:
                    token = captures[-1].next_token
                    if len(captures) == max_new_tokens or token == self.eos_token_id:
                        break
                step = torch.tensor([[token]], dtype=torch.long, device=self.device)
                out = self._forward(step, past=past)
                captures.append(self._capture(out, wanted))
                past = out.past_key_values
        return captures

    def _forward(self, ids: torch.Tensor, past):
        try:
            return self.model(
                ids,
                past_key_values=past,
                use_cache=True,
                output_hidden_states=True,
                output_attentions=True,
            )
        except torch.OutOfMemoryError as exc:
            raise ExtractionError(f"out of memory during forward: {exc}") from exc

    def _capture(self, out, layers: Sequence[int]) -> StepCapture:
        logits_map: dict[int, np.ndarray] = {}
        for j in layers:
            if j == self.num_layers:
                vec = out.logits[0, -1]
            else:
                vec = self._head(self._final_norm(out.hidden_states[j][0, -1]))
            logits_map[j] = vec.to(torch.float32).cpu().numpy()
        row = out.attentions[-1][0, :, -1, :].mean(dim=0)
        return StepCapture(
            layer_logits=logits_map,
            attention=row.to(torch.float32).cpu().numpy(),
            next_token=int(torch.argmax(out.logits[0, -1]).item()),
        )
