from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .network import Architecture, Preconditioned, build_network
from .sampler import LOGIT_SCALE, encode

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 2e-3
    lr_min: float = 5e-5
    warmup_steps: int = 50
    grad_clip: float = 1.0
    p_mean: float = 1.0
    p_std: float = 1.2
    logit_scale: float = LOGIT_SCALE
    seed: int = 0
    arch: Architecture = field(default_factory=Architecture)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        if "arch" in d:
            d["arch"] = Architecture.from_dict(d["arch"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    net: Preconditioned
    config: TrainingConfig
    curve: list[dict]


def sample_sigmas(gen: torch.Generator, n: int, p_mean: float, p_std: float) -> torch.Tensor:
    """Log-normal noise levels: ``ln(sigma) ~ N(p_mean, p_std^2)``."""
    return torch.exp(p_mean + p_std * torch.randn(n, generator=gen))


def _lr_at(step: int, total: int, cfg: TrainingConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    t = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * min(t, 1.0)))


def train(dataset: np.ndarray, cfg: TrainingConfig = TrainingConfig(), log_every: int = 20) -> TrainResult:
    """Fit ``D`` on one-hot grids ``(N, C, H, W, D)`` with the sigma-weighted clean-data loss."""
    dataset = np.asarray(dataset)
    if dataset.ndim != 5 or len(dataset) == 0:
        raise TrainingError("dataset must be a nonempty (N, C, H, W, D) array")
    if dataset.shape[1] != cfg.arch.channels:
        raise TrainingError(f"dataset has {dataset.shape[1]} channels, architecture expects {cfg.arch.channels}")
    data = torch.from_numpy(encode(dataset, cfg.logit_scale).astype(np.float32))
    net = build_network(cfg.arch, cfg.seed)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    order_rng = np.random.default_rng([cfg.seed, 1])
    n = len(data)
    per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * per_epoch
    curve: list[dict] = []
    step = 0
    recent: list[float] = []
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        for b in range(per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            z = data[idx]
            sigma = sample_sigmas(gen, len(z), cfg.p_mean, cfg.p_std)
            noise = torch.randn(z.shape, generator=gen) * sigma.reshape(-1, 1, 1, 1, 1)
            out = net(z + noise, sigma)
            weight = net.loss_weight(sigma).reshape(-1, 1, 1, 1, 1)
            loss = (weight * (out - z) ** 2).mean()
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}: sigma in "
                    f"[{float(sigma.min()):.3g}, {float(sigma.max()):.3g}], recent losses {recent[-5:]}"
                )
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, total, cfg)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            opt.step()
            recent.append(value)
            step += 1
            if step % log_every == 0 or step == total:
                entry = {"step": step, "epoch": epoch, "loss": float(np.mean(recent[-log_every:]))}
                curve.append(entry)
                log.info("step %d/%d epoch %d loss %.4f", step, total, epoch, entry["loss"])
    net.eval()
    return TrainResult(net, cfg, curve)


def validation_loss(
    net: Preconditioned,
    dataset: np.ndarray,
    sigma: float = 1.0,
    seed: int = 0,
    logit_scale: float = LOGIT_SCALE,
    batch_size: int = 8,
) -> float:
    """Mean squared clean-prediction error at a fixed noise level."""
    data = torch.from_numpy(encode(np.asarray(dataset), logit_scale).astype(np.float32))
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            z = data[i:i + batch_size]
            s = torch.full((len(z),), float(sigma))
            out = net(z + sigma * torch.randn(z.shape, generator=gen), s)
            total += float(((out - z) ** 2).sum())
            count += z.numel()
    return total / count
