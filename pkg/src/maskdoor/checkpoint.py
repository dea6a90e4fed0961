"""Versioned weight files: a JSON header plus the raw state-dict arrays in one ``.npz``."""
from __future__ import annotations

import io
import json
import os

import numpy as np
import torch

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_state(path, kind: str, hparams: dict, state: dict, extra: dict | None = None):
    header = {"format": "maskdoor", "version": FORMAT_VERSION, "kind": kind, "hparams": hparams}
    if extra:
        header.update(extra)
    arrays = {f"w/{k}": v.detach().cpu().numpy() for k, v in state.items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_state(path, kind: str):
    """Return ``(header, state_dict)``; raises CheckpointError on a foreign or stale file."""
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(z["__header__"].tobytes().decode())
            state = {k[2:]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("w/")}
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if header.get("format") != "maskdoor" or header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {header.get('version')!r}"
            f" (expected {FORMAT_VERSION})"
        )
    if header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header.get('kind')!r}")
    return header, state
