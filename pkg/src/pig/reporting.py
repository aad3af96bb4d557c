"""Run fingerprints and atomic report files.

The fingerprint hashes the canonical JSON form of the merged run
settings so reports can be matched to the exact configuration that
produced them.  Reports are written to a temporary file in the target
directory and renamed into place, so readers never observe a partial
file.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from typing import Any, Mapping


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_fingerprint(settings: Mapping[str, Any]) -> str:
    digest = hashlib.sha256(canonical_json(settings).encode("utf-8")).hexdigest()
    return digest[:16]


def atomic_write_json(path, payload: Any) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    fd, tmp_path = tempfile.mkstemp(prefix=".report-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise
