"""Bounded perturbation generator, box masks and the masked trigger transform.

The triggered image is ``clip(x + mask * g(x), 0, 1)`` where ``g`` is a small
convolutional autoencoder whose output is squashed by ``epsilon * tanh`` so
that ``|g(x)| <= epsilon`` holds by construction.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_state, save_state
from .core import CornerBox


class ConfigurationError(ValueError):
    pass


class TriggerGenerator(nn.Module):
    def __init__(self, in_channels=3, widths=(16, 32, 64), epsilon=0.05):
        super().__init__()
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.epsilon = float(epsilon)
        enc, c = [], in_channels
        for w in self.widths:
            enc += [nn.Conv2d(c, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c = w
        self.encoder = nn.Sequential(*enc)
        dec = []
        for w in list(self.widths[-2::-1]) + [in_channels]:
            dec += [nn.ConvTranspose2d(c, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c = w
        dec.pop()  # no activation before the tanh bound
        self.decoder = nn.Sequential(*dec)

    @property
    def downsample(self) -> int:
        return 2 ** len(self.widths)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"generator expects (N, {self.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        h, w = x.shape[-2:]
        s = self.downsample
        ph, pw = (-h) % s, (-w) % s
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        z = self.decoder(self.encoder(x))[..., :h, :w]
        return self.epsilon * torch.tanh(z)

    def hparams(self) -> dict:
        return {"in_channels": self.in_channels, "widths": list(self.widths)}

    def save(self, path):
        save_state(path, "trigger_generator", self.hparams(), self.state_dict(),
                   {"epsilon": self.epsilon})

    @classmethod
    def load(cls, path) -> "TriggerGenerator":
        header, state = load_state(path, "trigger_generator")
        g = cls(epsilon=header["epsilon"], **header["hparams"])
        g.load_state_dict(state)
        return g


def to_tensor(x: np.ndarray) -> torch.Tensor:
    """HxWxC array -> 1xCxHxW float tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(x).transpose(2, 0, 1)))[None]


def to_array(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()[0].transpose(1, 2, 0)


def generate_perturbation(g: TriggerGenerator, x) -> np.ndarray | torch.Tensor:
    """Run ``g`` on an HxWxC array (returns an array) or an NCHW tensor (returns a tensor)."""
    if isinstance(x, torch.Tensor):
        return g(x)
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != g.in_channels:
        raise ConfigurationError(f"image shape {x.shape} does not match a {g.in_channels}-channel generator")
    p = next(g.parameters())
    with torch.no_grad():
        out = g(to_tensor(x).to(p.dtype))
    return to_array(out).astype(x.dtype)


def build_mask(boxes: list[CornerBox], height: int, width: int) -> np.ndarray:
    """Binary HxW mask; pixel (i, j) is set iff ``x_min <= j < x_max`` and ``y_min <= i < y_max``."""
    mask = np.zeros((height, width), dtype=np.float32)
    if not boxes:
        return mask
    cols = np.arange(width)
    rows = np.arange(height)
    for b in boxes:
        cs = (cols >= b.x_min) & (cols < b.x_max)
        rs = (rows >= b.y_min) & (rows < b.y_max)
        mask[np.ix_(rs, cs)] = 1.0
    return mask


def global_mask(height: int, width: int) -> np.ndarray:
    if height < 1 or width < 1:
        raise ValueError("mask dimensions must be positive")
    return np.ones((height, width), dtype=np.float32)


def apply_trigger(x, mask, pert):
    """``clip(x + mask * pert, 0, 1)``; works on HxWxC arrays or NCHW tensors (mask N1HW / NHW)."""
    if isinstance(x, torch.Tensor):
        if mask.dim() == 3:
            mask = mask[:, None]
        if x.shape != pert.shape or mask.shape[-2:] != x.shape[-2:]:
            raise ValueError(f"shape mismatch: x {tuple(x.shape)}, mask {tuple(mask.shape)}, pert {tuple(pert.shape)}")
        return torch.where(mask > 0, (x + pert).clamp(0.0, 1.0), x)
    x, mask, pert = np.asarray(x), np.asarray(mask), np.asarray(pert)
    if x.shape != pert.shape or mask.shape != x.shape[:2]:
        raise ValueError(f"shape mismatch: x {x.shape}, mask {mask.shape}, pert {pert.shape}")
    out = np.clip(x + pert, 0.0, 1.0).astype(x.dtype)
    return np.where(mask[..., None] > 0, out, x)
