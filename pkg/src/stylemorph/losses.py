"""The seven training losses as pure differentiable functions, the stage-keyed
weight configuration, and the pluggable image-embedding providers they use.

Real pretrained perceptual backbones are optional adapters; the defaults here
are deterministic mock providers (fixed random projections and convolutions)
so the whole pipeline runs self-contained.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, TextIO

import torch
from torch import Tensor

from .errors import FeatureError, ParameterError, TrainingFaultError
from .mesh import DEFAULT_DTYPE, Mesh, tangent_project

SEG_CLASSES = ("eyes", "nose", "ears", "background")


@dataclass
class LossConfig:
    """Loss weights; the regularizer and consistency weights depend on stage."""

    lam_kp: float = 300.0
    lam_recon: float = 500.0
    lam_seg: float = 100.0
    lam_lpips: float = 50.0
    lam_gan: float = 1.0
    lam_clip: float = 0.2
    lam_dino: float = 0.2
    dino_cutoff_iters: int = 500
    lam_reg: dict = field(default_factory=lambda: {"warmup": 4.0, "joint": 2.0})
    lam_cdl: dict = field(default_factory=lambda: {"warmup": 4000.0, "joint": 500.0})
    lam_v: float = 1.0
    lam_n: float = 50.0
    lam_ang: float = 1000.0

    def __post_init__(self):
        scalars = [
            self.lam_kp, self.lam_recon, self.lam_seg, self.lam_lpips, self.lam_gan,
            self.lam_clip, self.lam_dino, self.lam_v, self.lam_n, self.lam_ang,
            *self.lam_reg.values(), *self.lam_cdl.values(),
        ]
        if any(v < 0 for v in scalars):
            raise ParameterError("loss weights must be nonnegative")

    def reg_weight(self, stage: str) -> float:
        return self.lam_reg[stage]

    def cdl_weight(self, stage: str) -> float:
        return self.lam_cdl[stage]


# ---------------------------------------------------------------------------
# Embedding providers
# ---------------------------------------------------------------------------


class Embedder(Protocol):
    def embed(self, image: Tensor) -> Tensor: ...


def _pool_to(image: Tensor, size: int) -> Tensor:
    x = image.permute(2, 0, 1).unsqueeze(0)
    x = torch.nn.functional.adaptive_avg_pool2d(x, size)
    return x.reshape(-1)


class MockGlobalEmbedder:
    """Global image embedding: pooled pixels through a fixed random projection."""

    def __init__(self, dim: int = 32, pool: int = 8, seed: int = 100, dtype=DEFAULT_DTYPE):
        g = torch.Generator().manual_seed(seed)
        self.proj = torch.randn(dim, pool * pool * 3, generator=g, dtype=dtype)
        self.pool = pool

    def embed(self, image: Tensor) -> Tensor:
        v = self.proj @ _pool_to(image, self.pool)
        return v / torch.linalg.norm(v).clamp_min(1e-12)


class MockPatchEmbedder:
    """Patch-level embedding: 4x4 patch means through a fixed random projection."""

    def __init__(self, dim: int = 48, grid: int = 4, seed: int = 200, dtype=DEFAULT_DTYPE):
        g = torch.Generator().manual_seed(seed)
        self.proj = torch.randn(dim, grid * grid * 3, generator=g, dtype=dtype)
        self.grid = grid

    def embed(self, image: Tensor) -> Tensor:
        v = self.proj @ _pool_to(image, self.grid)
        return v / torch.linalg.norm(v).clamp_min(1e-12)


class MockPerceptualProvider:
    """Perceptual features from a fixed random two-layer convolution stack."""

    def __init__(self, channels: int = 8, seed: int = 300, dtype=DEFAULT_DTYPE):
        g = torch.Generator().manual_seed(seed)
        self.w1 = torch.randn(channels, 3, 3, 3, generator=g, dtype=dtype) * 0.3
        self.w2 = torch.randn(channels, channels, 3, 3, generator=g, dtype=dtype) * 0.3

    def features(self, image: Tensor) -> Tensor:
        if image.dim() != 3 or image.shape[-1] != 3:
            raise FeatureError(message=f"expected (H, W, 3) image, got {tuple(image.shape)}")
        x = image.permute(2, 0, 1).unsqueeze(0)
        x = torch.nn.functional.conv2d(x, self.w1, stride=2, padding=1)
        x = torch.tanh(x)
        x = torch.nn.functional.conv2d(x, self.w2, stride=2, padding=1)
        return x.reshape(-1)


@dataclass
class EmbedderSet:
    global_embed: Embedder
    patch_embed: Embedder


def default_embedders() -> EmbedderSet:
    return EmbedderSet(global_embed=MockGlobalEmbedder(), patch_embed=MockPatchEmbedder())


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _sqrt0(x: Tensor) -> Tensor:
    """sqrt with subgradient 0 at zero, exact 0 at the fixed point."""
    safe = torch.sqrt(x.clamp_min(1e-120))
    return torch.where(x > 0, safe, torch.zeros_like(safe))


def _safe_norm(d: Tensor) -> Tensor:
    """Row-wise Euclidean norm with subgradient 0 at the origin."""
    return _sqrt0((d**2).sum(dim=-1))


def loss_kp(projected: Tensor, landmarks: Tensor) -> Tensor:
    """Sum of Euclidean screen-space distances between matched point sets."""
    if projected.shape != landmarks.shape or projected.shape[-1] != 2:
        raise ParameterError(
            f"point sets must share shape (M, 2), got {tuple(projected.shape)} "
            f"and {tuple(landmarks.shape)}"
        )
    return _safe_norm(projected - landmarks).sum()


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    return (a * b).sum() / (torch.linalg.norm(a) * torch.linalg.norm(b)).clamp_min(1e-12)


def loss_recon(
    img_r: Tensor,
    img_s: Tensor,
    mask: Tensor,
    embedders: EmbedderSet,
    iteration: int,
    config: LossConfig | None = None,
) -> Tensor:
    """Masked pixel distance plus global and patch embedding-distance terms.

    Pixel term is the root-mean-square pixel L2 over the masked area. Both
    embedding terms use (1 - cosine similarity) so the loss vanishes when the
    images agree. The patch term is dropped after the configured iteration
    cutoff.
    """
    config = config or LossConfig()
    if img_r.shape != img_s.shape:
        raise ParameterError(f"image shapes differ: {tuple(img_r.shape)} vs {tuple(img_s.shape)}")
    if mask.shape != img_r.shape[:2]:
        raise ParameterError(f"mask shape {tuple(mask.shape)} does not match images")
    m = mask.to(img_r.dtype)
    area = m.sum().clamp_min(1e-12)
    diff2 = ((img_r - img_s) ** 2).sum(dim=-1)
    pixel = _sqrt0((diff2 * m).sum() / area)

    mr = img_r * m[:, :, None]
    ms = img_s * m[:, :, None]
    total = pixel + config.lam_clip * (1 - _cosine(embedders.global_embed.embed(mr), embedders.global_embed.embed(ms)))
    if iteration <= config.dino_cutoff_iters:
        total = total + config.lam_dino * (1 - _cosine(embedders.patch_embed.embed(mr), embedders.patch_embed.embed(ms)))
    return total


def loss_seg(
    masks_r: dict[str, Tensor],
    masks_s: dict[str, Tensor],
    classes: Iterable[str] = SEG_CLASSES,
) -> Tensor:
    """Sum over part classes of the L2 norm of the soft-mask difference."""
    total = None
    for c in classes:
        if c not in masks_r or c not in masks_s:
            raise ParameterError(f"class {c!r} missing from mask set")
        a, b = masks_r[c], masks_s[c]
        if a.shape != b.shape:
            raise ParameterError(f"mask shapes differ for class {c!r}")
        term = _sqrt0(((a - b) ** 2).sum())
        total = term if total is None else total + term
    if total is None:
        raise ParameterError("no classes given")
    return total


def loss_lpips(img_r: Tensor, img_s: Tensor, provider: MockPerceptualProvider) -> Tensor:
    """L2 distance in the perceptual provider's feature space."""
    try:
        fr, fs = provider.features(img_r), provider.features(img_s)
    except FeatureError:
        raise
    except Exception as exc:
        raise FeatureError(message=f"perceptual provider failed: {exc}") from exc
    return _sqrt0(((fr - fs) ** 2).sum())


def loss_gan(disc, img_r: Tensor, img_s: Tensor) -> tuple[Tensor, Tensor]:
    """Discriminator and non-saturating generator objectives, logit-space stable.

    img_s are style-reference images (label real); img_r are rendered images
    (label fake for the discriminator, pushed toward real by the generator).
    """
    logit_s = disc(img_s)
    logit_r = disc(img_r)
    sp = torch.nn.functional.softplus
    d_loss = sp(-logit_s) + sp(logit_r)  # -[log s(D(I_s)) + log(1 - s(D(I_r)))]
    g_loss = sp(-logit_r)  # -log s(D(I_r))
    if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
        raise TrainingFaultError("non-finite adversarial loss")
    return d_loss, g_loss


def loss_cdl(batch_v: Tensor, batch_v_pre: Tensor, reference: Mesh) -> Tensor:
    """Cross-sample consistency of tangent-plane deformation.

    Projects each sample's displacement field onto the tangent planes of the
    reference mesh, then penalizes the population variance of the projected
    coordinates across the batch (mean over vertices and coordinates). Zero
    when every sample deforms the same way, or purely along normals.
    """
    if batch_v.shape != batch_v_pre.shape or batch_v.dim() != 3:
        raise ParameterError("expected matching (B, N, 3) vertex batches")
    if batch_v.shape[0] < 2:
        raise ParameterError("consistency loss needs a batch of at least 2 samples")
    proj = torch.stack([tangent_project(reference, d) for d in batch_v - batch_v_pre])
    return proj.var(dim=0, unbiased=False).mean()


def loss_reg(
    v: Tensor,
    n: Tensor,
    cos_a: Tensor,
    v_pre: Tensor,
    n_pre: Tensor,
    cos_a_pre: Tensor,
    lam_v: float = 1.0,
    lam_n: float = 50.0,
    lam_ang: float = 1000.0,
) -> Tensor:
    """Squared-deviation penalty on vertices, normals and face angle cosines."""
    for a, b, what in ((v, v_pre, "vertices"), (n, n_pre, "normals"), (cos_a, cos_a_pre, "angles")):
        if a.shape != b.shape:
            raise ParameterError(f"{what} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (
        lam_v * ((v - v_pre) ** 2).sum()
        + lam_n * ((n - n_pre) ** 2).sum()
        + lam_ang * ((cos_a - cos_a_pre) ** 2).sum()
    )


# ---------------------------------------------------------------------------
# Loss logging
# ---------------------------------------------------------------------------


class LossLogger:
    """CSV stream of per-step loss values: step, stage, loss name, value."""

    def __init__(self, stream: TextIO):
        self._writer = csv.writer(stream)
        self._writer.writerow(["step", "stage", "loss", "value"])

    def log(self, step: int, stage: str, name: str, value: float):
        self._writer.writerow([step, stage, name, f"{value:.10g}"])
