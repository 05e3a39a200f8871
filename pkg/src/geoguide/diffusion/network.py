"""Small 3D residual U-Net with EDM-style sigma preconditioning.

The network patchifies the grid by 2 per axis, runs residual blocks on three
resolution levels (``N/2``, ``N/4``, ``N/8``) and un-patchifies back.  Spatial
sizes must be divisible by 8.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

SIGMA_DATA = 1.0


@dataclass(frozen=True)
class Architecture:
    channels: int = 5
    widths: tuple[int, ...] = (32, 64, 96)
    patch: int = 2
    emb_dim: int = 64
    groups: int = 8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class FourierEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        half = dim // 2
        self.register_buffer("freqs", torch.exp(-math.log(1000.0) * torch.arange(half) / half))

    def forward(self, x):
        a = x[:, None] * self.freqs[None]
        return torch.cat([a.cos(), a.sin()], dim=1)


class ResBlock(nn.Module):
    def __init__(self, width: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, width), width)
        self.conv1 = nn.Conv3d(width, width, 3, padding=1)
        self.emb = nn.Linear(emb_dim, width)
        self.norm2 = nn.GroupNorm(min(groups, width), width)
        self.conv2 = nn.Conv3d(width, width, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None, None]
        return x + self.conv2(F.silu(self.norm2(h)))


class UNet3D(nn.Module):
    def __init__(self, arch: Architecture):
        super().__init__()
        w, e = arch.widths, arch.emb_dim
        self.arch = arch
        self.embed = nn.Sequential(FourierEmbedding(e), nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.stem = nn.Conv3d(arch.channels, w[0], arch.patch, stride=arch.patch)
        self.enc = nn.ModuleList([ResBlock(c, e, arch.groups) for c in w])
        self.down = nn.ModuleList([nn.Conv3d(w[i], w[i + 1], 3, stride=2, padding=1) for i in range(len(w) - 1)])
        self.up = nn.ModuleList([nn.ConvTranspose3d(w[i + 1], w[i], 2, stride=2) for i in range(len(w) - 1)])
        self.dec = nn.ModuleList([ResBlock(c, e, arch.groups) for c in w[:-1]])
        self.norm_out = nn.GroupNorm(min(arch.groups, w[0]), w[0])
        self.unpatch = nn.ConvTranspose3d(w[0], arch.channels, arch.patch, stride=arch.patch)
        self.head = nn.Conv3d(arch.channels, arch.channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x, noise_label):
        emb = self.embed(noise_label)
        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.enc):
            h = block(h, emb)
            if i < len(self.down):
                skips.append(h)
                h = self.down[i](h)
        for i in reversed(range(len(self.up))):
            h = self.dec[i](self.up[i](h) + skips[i], emb)
        h = self.unpatch(F.silu(self.norm_out(h)))
        return h + self.head(F.silu(h))


class Preconditioned(nn.Module):
    """``D(x; s) = c_skip x + c_out F(c_in x, ln(s)/4)``."""

    def __init__(self, arch: Architecture, sigma_data: float = SIGMA_DATA):
        super().__init__()
        self.sigma_data = sigma_data
        self.model = UNet3D(arch)

    def forward(self, x, sigma):
        sigma = sigma.reshape(-1, 1, 1, 1, 1).to(x.dtype)
        sd = self.sigma_data
        c_skip = sd**2 / (sigma**2 + sd**2)
        c_out = sigma * sd / (sigma**2 + sd**2).sqrt()
        c_in = 1 / (sigma**2 + sd**2).sqrt()
        c_noise = sigma.log().reshape(-1) / 4
        return c_skip * x + c_out * self.model(c_in * x, c_noise)

    def loss_weight(self, sigma):
        return (sigma**2 + self.sigma_data**2) / (sigma * self.sigma_data) ** 2


# -- numpy-facing denoisers -------------------------------------------------------


class Denoiser:
    """Clean-data predictor on float64 arrays ``(B, C, H, W, D)``."""

    def __call__(self, z: np.ndarray, sigma: float) -> np.ndarray:
        raise NotImplementedError

    def with_vjp(self, z: np.ndarray, sigma: float):
        """Return ``D(z)`` and a function mapping a cotangent on ``D`` to one on ``z``."""
        raise NotImplementedError


class NetworkDenoiser(Denoiser):
    """Torch network behind the float64 numpy interface; evaluates in the network's dtype."""

    def __init__(self, net: Preconditioned):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.dtype = next(self.net.parameters()).dtype

    @property
    def arch(self) -> Architecture:
        return self.net.model.arch

    def _tensor(self, a: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(a)).to(self.dtype)

    def _sigma(self, n: int, sigma: float):
        return torch.full((n,), float(sigma), dtype=self.dtype)

    def __call__(self, z, sigma):
        with torch.no_grad():
            x = self._tensor(z)
            return self.net(x, self._sigma(len(x), sigma)).double().numpy()

    def with_vjp(self, z, sigma):
        x = self._tensor(z).requires_grad_(True)
        with torch.enable_grad():
            out = self.net(x, self._sigma(len(x), sigma))

        def vjp(cotangent: np.ndarray) -> np.ndarray:
            (g,) = torch.autograd.grad(out, x, self._tensor(cotangent))
            return g.double().numpy()

        return out.detach().double().numpy(), vjp


class PointDenoiser(Denoiser):
    """Exact denoiser of a one-point dataset: the posterior mean is the point itself."""

    def __init__(self, point: np.ndarray):
        self.point = np.asarray(point, dtype=np.float64)

    def __call__(self, z, sigma):
        return np.broadcast_to(self.point, np.shape(z)).copy()

    def with_vjp(self, z, sigma):
        return self(z, sigma), lambda cot: np.zeros_like(cot, dtype=np.float64)


def build_network(arch: Architecture, seed: int = 0, sigma_data: float = SIGMA_DATA) -> Preconditioned:
    torch.manual_seed(seed)
    return Preconditioned(arch, sigma_data)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
