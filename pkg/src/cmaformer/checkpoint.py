"""Checkpoint files: a flat ``name -> array`` map stored as an uncompressed
``.npz``, plus a JSON metadata header kept under the reserved key
``__meta__`` as raw UTF-8 bytes. Arrays round-trip bit-exactly.
"""
import json
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

META_KEY = "__meta__"
FORMAT_VERSION = 1


def to_arrays(state, prefix=""):
    """Flatten a torch state dict into ``{prefix + name: np.ndarray}``."""
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in state.items()}


def from_arrays(arrays, prefix=""):
    n = len(prefix)
    return {k[n:]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix)}


def save_checkpoint(path, arrays, meta):
    path = Path(path)
    if META_KEY in arrays:
        raise DataError(f"array name {META_KEY!r} is reserved")
    header = dict(meta, format_version=FORMAT_VERSION)
    raw = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **{META_KEY: raw}, **arrays)
    return path


def load_checkpoint(path):
    """Return ``(arrays, meta)``; raises DataError on a missing or malformed file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if META_KEY not in arrays:
        raise DataError(f"checkpoint {path} has no metadata header")
    meta = json.loads(arrays.pop(META_KEY).tobytes().decode())
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format {meta.get('format_version')!r}")
    return arrays, meta
