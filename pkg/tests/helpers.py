"""Builders shared across test modules."""

import numpy as np

from pig import PigConfig, SourceSpan, StepTrace


def random_trace(
    rng,
    vocab=16,
    num_layers=8,
    context_len=12,
    span=(2, 9),
    zero_attention=False,
    identical_layers=False,
    f32=True,
):
    """A structurally valid random StepTrace (float32 payloads by default)."""
    context = tuple(int(t) for t in rng.integers(0, vocab, context_len))
    attention = rng.random(context_len)
    if zero_attention:
        attention[span[0] : span[1]] = 0.0
    if f32:
        attention = attention.astype(np.float32)
    layer_logits = {}
    shared = rng.normal(0.0, 3.0, vocab)
    for j in range(num_layers):
        arr = shared if identical_layers else rng.normal(0.0, 3.0, vocab)
        layer_logits[j] = arr.astype(np.float32) if f32 else arr.copy()
    return StepTrace(
        context_tokens=context,
        source_span=SourceSpan(span[0], span[1]),
        layer_logits=layer_logits,
        attention=attention,
    )


def config_for(num_layers=8, **overrides):
    """PigConfig whose anchor is the top of num_layers stacked layers."""
    defaults = dict(
        anchor_layer=num_layers - 1,
        layer_set=tuple(range(num_layers - 1)),
        alpha=500.0,
        clip_max=0.5,
        aggregator="max",
        temperature=1.0,
    )
    defaults.update(overrides)
    return PigConfig(**defaults)
