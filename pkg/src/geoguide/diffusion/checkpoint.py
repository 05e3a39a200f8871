"""Checkpoint files.

Layout: ``b"GGCK"``, a little-endian u64 header length, a UTF-8 JSON header,
then the raw little-endian float32 parameter payload.  The header lists every
tensor with its byte offset into the payload::

    {"format": "geoguide-checkpoint", "version": 1,
     "architecture": {...}, "sigma_data": 1.0, "logit_scale": 4.0,
     "training": {...}, "training_hash": "...",
     "tensors": [{"name": ..., "shape": [...], "offset": ..., "nbytes": ...}]}
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .network import Architecture, NetworkDenoiser, Preconditioned
from .train import TrainingConfig

MAGIC = b"GGCK"


class CheckpointError(ValueError):
    pass


def save_checkpoint(net: Preconditioned, cfg: TrainingConfig, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for name, t in net.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format": "geoguide-checkpoint",
        "version": 1,
        "architecture": net.model.arch.to_dict(),
        "sigma_data": net.sigma_data,
        "logit_scale": cfg.logit_scale,
        "training": cfg.to_dict(),
        "training_hash": cfg.digest(),
        "tensors": tensors,
        **({"extra": extra} if extra else {}),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)
    return path


def read_header(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a geoguide checkpoint")
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n])
    return header, raw[12 + n:]


def load_checkpoint(path: str | Path) -> tuple[Preconditioned, TrainingConfig]:
    header, payload = read_header(path)
    arch = Architecture.from_dict(header["architecture"])
    net = Preconditioned(arch, header["sigma_data"])
    state = {}
    for t in header["tensors"]:
        buf = payload[t["offset"]:t["offset"] + t["nbytes"]]
        if len(buf) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        state[t["name"]] = torch.from_numpy(np.frombuffer(buf, dtype="<f4").reshape(t["shape"]).copy())
    net.load_state_dict(state)
    net.eval()
    return net, TrainingConfig.from_dict(header["training"])


def load_denoiser(path: str | Path) -> tuple[NetworkDenoiser, float]:
    """Denoiser plus the logit scale it was trained with."""
    net, cfg = load_checkpoint(path)
    return NetworkDenoiser(net), cfg.logit_scale
