"""Latent-to-UV-texture generator (source and style variants) and the
discriminator used during texture refinement.

The generator maps a latent z through a small mapping network to a style
vector w, which modulates a convolutional synthesis stack that upsamples a
learned 8x8 constant to the output resolution. Sigmoid output keeps texels
in [0, 1].
"""
from __future__ import annotations

import copy

import torch
from torch import Tensor, nn

from .errors import ParameterError
from .mesh import DEFAULT_DTYPE


class ModulatedBlock(nn.Module):
    """Upsample x2, then a 3x3 conv whose input channels are scaled by a
    per-sample style vector (weight modulation without demodulation)."""

    def __init__(self, c_in: int, c_out: int, w_dim: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.affine = nn.Linear(w_dim, c_in, dtype=dtype)
        nn.init.zeros_(self.affine.weight)
        nn.init.ones_(self.affine.bias)  # style starts as identity scaling
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1, dtype=dtype)
        self.act = nn.SiLU()

    def forward(self, x: Tensor, w: Tensor) -> Tensor:
        x = torch.nn.functional.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        s = self.affine(w)
        return self.act(self.conv(x * s[None, :, None, None]))


class TextureGenerator(nn.Module):
    """z -> (H, W, 3) UV texture in [0, 1]. Resolution is fixed per instance."""

    def __init__(
        self,
        k_latent: int = 64,
        resolution: int = 128,
        w_dim: int = 32,
        base_channels: int = 48,
        dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        if resolution % 8 != 0 or resolution < 16:
            raise ParameterError(f"resolution must be a multiple of 8 and >= 16, got {resolution}")
        self.k_latent = k_latent
        self.resolution = resolution
        self.w_dim = w_dim
        self.mapping = nn.Sequential(
            nn.Linear(k_latent, w_dim, dtype=dtype),
            nn.SiLU(),
            nn.Linear(w_dim, w_dim, dtype=dtype),
        )
        n_blocks = 0
        r = 8
        while r < resolution:
            r *= 2
            n_blocks += 1
        chans = [base_channels]
        for i in range(n_blocks):
            chans.append(max(12, base_channels // (2**i)))
        self.const = nn.Parameter(torch.randn(chans[0], 8, 8, dtype=dtype) * 0.1)
        self.blocks = nn.ModuleList(
            ModulatedBlock(a, b, w_dim, dtype=dtype) for a, b in zip(chans[:-1], chans[1:])
        )
        self.to_rgb = nn.Conv2d(chans[-1], 3, 1, dtype=dtype)
        # style-driven global color bias, applied before the sigmoid
        self.rgb_bias = nn.Linear(w_dim, 3, dtype=dtype)
        nn.init.zeros_(self.rgb_bias.weight)
        nn.init.zeros_(self.rgb_bias.bias)

    @property
    def config(self) -> dict:
        return {
            "k_latent": self.k_latent,
            "resolution": self.resolution,
            "w_dim": self.w_dim,
            "n_blocks": len(self.blocks),
        }

    def map_latent(self, z: Tensor) -> Tensor:
        if z.shape != (self.k_latent,):
            raise ParameterError(f"expected z of shape ({self.k_latent},), got {tuple(z.shape)}")
        return self.mapping(z)

    def forward(self, z: Tensor) -> Tensor:
        w = self.map_latent(z)
        x = self.const.unsqueeze(0)
        for blk in self.blocks:
            x = blk(x, w)
        rgb = torch.sigmoid(self.to_rgb(x) + self.rgb_bias(w)[None, :, None, None])
        return rgb[0].permute(1, 2, 0)  # (H, W, 3)


def generate_texture(gen: TextureGenerator, z: Tensor) -> Tensor:
    """Deterministic texture for (gen, z); differentiable w.r.t. both."""
    return gen(z)


def clone_for_style(src: TextureGenerator) -> TextureGenerator:
    """Deep copy; bit-equal at creation, isolated afterwards."""
    return copy.deepcopy(src)


class Discriminator(nn.Module):
    """Small strided conv classifier on rendered images; returns a raw logit.

    The final layer is zero-initialized so an untrained discriminator outputs
    logit 0 (probability-real 0.5) and contributes no gradient pressure at the
    start of texture refinement.
    """

    def __init__(self, resolution: int = 64, channels: int = 24, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.resolution = resolution
        layers: list[nn.Module] = []
        c_in = 3
        r = resolution
        c = channels
        while r > 4:
            layers.append(nn.Conv2d(c_in, c, 3, stride=2, padding=1, dtype=dtype))
            layers.append(nn.SiLU())
            c_in = c
            c = min(2 * c, 96)
            r = (r + 1) // 2
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(c_in * r * r, 1, dtype=dtype)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, image: Tensor) -> Tensor:
        if image.shape != (self.resolution, self.resolution, 3):
            raise ParameterError(
                f"expected image ({self.resolution}, {self.resolution}, 3), got {tuple(image.shape)}"
            )
        x = image.permute(2, 0, 1).unsqueeze(0)
        feat = self.body(x)
        return self.head(feat.reshape(1, -1))[0, 0]


def discriminator_score(d: Discriminator, image: Tensor) -> Tensor:
    """Raw logit; sigmoid(logit) is the probability the image is a real style sample."""
    return d(image)


def distill_texture(
    gen: TextureGenerator,
    target_fn,
    steps: int = 800,
    lr: float = 5e-3,
    seed: int = 0,
) -> list[float]:
    """Regress the generator onto a deterministic texture family z -> image.

    target_fn(z, resolution) must return an (H, W, 3) tensor in [0, 1].
    Returns the per-step mean squared error history.
    """
    rng = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(gen.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    dtype = gen.const.dtype
    history = []
    for _ in range(steps):
        z = torch.randn(gen.k_latent, generator=rng, dtype=dtype)
        target = target_fn(z, gen.resolution)
        loss = ((gen(z) - target) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append(float(loss.detach()))
    return history


def mean_texture_error(gen: TextureGenerator, target_fn, n_eval: int = 16, seed: int = 4242) -> float:
    """Held-out mean per-texel L2 distance between generator and target family."""
    rng = torch.Generator().manual_seed(seed)
    dtype = gen.const.dtype
    errs = []
    with torch.no_grad():
        for _ in range(n_eval):
            z = torch.randn(gen.k_latent, generator=rng, dtype=dtype)
            target = target_fn(z, gen.resolution)
            errs.append(float(torch.linalg.norm(gen(z) - target, dim=-1).mean()))
    return sum(errs) / len(errs)
