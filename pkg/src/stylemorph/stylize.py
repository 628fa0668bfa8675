"""Attribute-preserving stylization: the conditioning network (EAM), its
training objective, the deterministic noise-initialized sampler, and the
pluggable stylizer backend.

Two backends ship here: a toy convolutional denoiser (trainable on the desk
render distribution) and a deterministic mock stylizer with known 3D ground
truth (an analytic vertex-displacement field plus a photometric map), which
serves as the oracle for 3D recovery tests.
"""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .camera import Camera, project
from .errors import LandmarkError, ParameterError, TrainingFaultError
from .mesh import DEFAULT_DTYPE, Mesh, vertex_normals
from .render import render


# ---------------------------------------------------------------------------
# Diffusion schedule and deterministic sampler
# ---------------------------------------------------------------------------


class DiffusionSchedule:
    """Linear-beta forward process over a small fixed number of steps.

    t runs over 0..steps, with t = 0 the clean image. alpha_bar(0) = 1, and
    the marginal noise variance 1 - alpha_bar(t) is strictly increasing.
    """

    def __init__(self, steps: int = 25, beta_start: float = 0.01, beta_end: float = 0.25,
                 dtype=DEFAULT_DTYPE):
        if steps < 1:
            raise ParameterError("schedule needs at least one step")
        self.steps = steps
        self.betas = torch.linspace(beta_start, beta_end, steps, dtype=dtype)
        self.alpha_bar = torch.cumprod(1.0 - self.betas, dim=0)

    def alpha_bar_at(self, t: int) -> Tensor:
        if not 0 <= t <= self.steps:
            raise ParameterError(f"t must be in [0, {self.steps}], got {t}")
        if t == 0:
            return torch.ones((), dtype=self.alpha_bar.dtype)
        return self.alpha_bar[t - 1]

    def add_noise(self, x0: Tensor, t: int, noise: Tensor) -> Tensor:
        ab = self.alpha_bar_at(t)
        return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


def prompt_embedding(prompt: str, dim: int = 16, dtype=DEFAULT_DTYPE) -> Tensor:
    """Stable pseudo-random unit vector per prompt (stand-in text encoder)."""
    seed = int.from_bytes(hashlib.sha256(prompt.encode()).digest()[:8], "big") % (2**31)
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(dim, generator=g, dtype=dtype)
    return v / torch.linalg.norm(v)


def _time_embedding(t: int, dim: int, dtype) -> Tensor:
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=dtype) * (-math.log(100.0) / max(half - 1, 1)))
    ang = t * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)])


# ---------------------------------------------------------------------------
# Toy denoiser backbone
# ---------------------------------------------------------------------------


class ToyDenoiser(nn.Module):
    """Small convolutional noise predictor for 32x32-scale desk images.

    Accepts optional per-layer residual injections (the EAM hook points),
    added after each encoder convolution.
    """

    def __init__(self, channels: int = 32, emb_dim: int = 16, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.channels = channels
        self.emb_dim = emb_dim
        self.conv_in = nn.Conv2d(3, channels, 3, padding=1, dtype=dtype)
        self.enc1 = nn.Conv2d(channels, channels, 3, padding=1, dtype=dtype)
        self.enc2 = nn.Conv2d(channels, channels, 3, padding=1, dtype=dtype)
        self.time_proj = nn.Linear(emb_dim, channels, dtype=dtype)
        self.txt_proj = nn.Linear(emb_dim, channels, dtype=dtype)
        # global context: pooled features steer per-channel biases, letting the
        # model hold distribution-level priors (e.g. overall color statistics)
        self.global_mlp = nn.Sequential(
            nn.Linear(channels, channels, dtype=dtype), nn.SiLU(),
            nn.Linear(channels, channels, dtype=dtype),
        )
        self.conv_out = nn.Conv2d(channels, 3, 3, padding=1, dtype=dtype)
        self.act = nn.SiLU()

    def encode_input(self, x: Tensor, t: int, txt: Tensor) -> Tensor:
        temb = _time_embedding(t, self.emb_dim, x.dtype)
        bias = (self.time_proj(temb) + self.txt_proj(txt))[None, :, None, None]
        h = self.act(self.conv_in(x) + bias)
        ctx = self.global_mlp(h.mean(dim=(2, 3)))
        return h + ctx[:, :, None, None]

    def forward(self, x: Tensor, t: int, txt: Tensor, residuals: list[Tensor] | None = None) -> Tensor:
        h = self.encode_input(x, t, txt)
        h = self.act(self.enc1(h))
        if residuals is not None:
            h = h + residuals[0]
        h = self.act(self.enc2(h))
        if residuals is not None:
            h = h + residuals[1]
        return self.conv_out(h)


# ---------------------------------------------------------------------------
# EAM: explicit attribute conditioning
# ---------------------------------------------------------------------------


@dataclass
class EAMConditions:
    """The three explicit attributes: five screen landmarks (left eye, right
    eye, nose tip, left lip corner, right lip corner), head rotation, and
    expression coefficients. Dropout flags mark omitted conditions, which are
    replaced by learned null embeddings."""

    lmk: Tensor  # (5, 2) pixels, origin top-left
    theta: Tensor  # (2,) yaw, pitch in radians
    psi: Tensor  # (k_expr,)
    dropout_flags: tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        if self.lmk.shape != (5, 2):
            raise ParameterError(f"lmk must be (5, 2), got {tuple(self.lmk.shape)}")
        if self.theta.shape != (2,):
            raise ParameterError(f"theta must be (2,), got {tuple(self.theta.shape)}")


class _AdaLNBlock(nn.Module):
    """Convolution followed by adaptive normalization whose scale and shift
    come from the merged condition vector; zero-initialized so the block
    output is exactly zero at creation."""

    def __init__(self, channels: int, cond_dim: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, dtype=dtype)
        self.norm = nn.GroupNorm(1, channels, affine=False, dtype=dtype)
        self.mod = nn.Linear(cond_dim, 2 * channels, dtype=dtype)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        h = self.norm(self.conv(x))
        scale, shift = self.mod(cond).chunk(2)
        return h * scale[None, :, None, None] + shift[None, :, None, None]


class EAM(nn.Module):
    """Condition-injection network: encodes the noisy image through a copy of
    the backbone encoder, modulates it by the merged (landmark, rotation,
    expression) embedding, and emits one residual per backbone hook point.

    All injected residuals are exactly zero at creation.
    """

    COND_DIM = 32

    def __init__(self, backbone: ToyDenoiser, k_expr: int = 10, image_size: int = 32,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.k_expr = k_expr
        self.image_size = image_size
        c = backbone.channels
        # encoder copied from the backbone at creation
        self.conv_in = copy.deepcopy(backbone.conv_in)
        self.enc1 = copy.deepcopy(backbone.enc1)
        self.enc2 = copy.deepcopy(backbone.enc2)
        self.time_proj = copy.deepcopy(backbone.time_proj)
        self.txt_proj = copy.deepcopy(backbone.txt_proj)
        self.global_mlp = copy.deepcopy(backbone.global_mlp)
        self.emb_dim = backbone.emb_dim
        self.act = nn.SiLU()

        d = self.COND_DIM
        self.lmk_mlp = nn.Sequential(nn.Linear(10, d, dtype=dtype), nn.SiLU(), nn.Linear(d, d, dtype=dtype))
        self.theta_mlp = nn.Sequential(nn.Linear(2, d, dtype=dtype), nn.SiLU(), nn.Linear(d, d, dtype=dtype))
        self.psi_mlp = nn.Sequential(nn.Linear(k_expr, d, dtype=dtype), nn.SiLU(), nn.Linear(d, d, dtype=dtype))
        self.null_lmk = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.null_theta = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.null_psi = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.merge = nn.Linear(3 * d, d, dtype=dtype)
        self.block1 = _AdaLNBlock(c, d, dtype=dtype)
        self.block2 = _AdaLNBlock(c, d, dtype=dtype)

    def merged_condition(self, conds: EAMConditions) -> Tensor:
        drop = conds.dropout_flags
        dtype = self.null_lmk.dtype
        lmk_n = conds.lmk.to(dtype).reshape(-1) / self.image_size
        parts = [
            self.null_lmk if drop[0] else self.lmk_mlp(lmk_n),
            self.null_theta if drop[1] else self.theta_mlp(conds.theta.to(dtype)),
            self.null_psi if drop[2] else self.psi_mlp(conds.psi.to(dtype)),
        ]
        return self.merge(torch.cat(parts))

    def forward(self, x: Tensor, t: int, txt: Tensor, conds: EAMConditions) -> list[Tensor]:
        cond = self.merged_condition(conds)
        temb = _time_embedding(t, self.emb_dim, x.dtype)
        bias = (self.time_proj(temb) + self.txt_proj(txt))[None, :, None, None]
        h = self.act(self.conv_in(x) + bias)
        h = h + self.global_mlp(h.mean(dim=(2, 3)))[:, :, None, None]
        h = self.act(self.enc1(h))
        r1 = self.block1(h, cond)
        h = self.act(self.enc2(h + r1))
        r2 = self.block2(h, cond)
        return [r1, r2]


# ---------------------------------------------------------------------------
# Backend: sampler + training
# ---------------------------------------------------------------------------


class StylizerBackend:
    """Bundles a denoiser, a schedule and (optionally) a trained EAM.

    Deterministic under a fixed seed: the only randomness is the forward
    noise drawn when initializing the sampler.
    """

    def __init__(self, denoiser: ToyDenoiser, schedule: DiffusionSchedule | None = None,
                 eam: EAM | None = None):
        self.denoiser = denoiser
        self.schedule = schedule or DiffusionSchedule()
        self.eam = eam

    def predict_noise(self, x: Tensor, t: int, txt: Tensor, conds: EAMConditions | None) -> Tensor:
        residuals = None
        if self.eam is not None and conds is not None:
            residuals = self.eam(x, t, txt, conds)
        return self.denoiser(x, t, txt, residuals)

    def stylize(self, source: Tensor, conds: EAMConditions | None, prompt: str,
                t_init: int = 19, seed: int = 0) -> Tensor:
        """Noise the source to step t_init, then denoise deterministically.

        t_init = 0 returns the source unchanged (no noise, no denoising).
        """
        sched = self.schedule
        if not 0 <= t_init <= sched.steps:
            raise ParameterError(f"t_init must be in [0, {sched.steps}], got {t_init}")
        if source.dim() != 3 or source.shape[-1] != 3:
            raise ParameterError(f"expected (H, W, 3) source image, got {tuple(source.shape)}")
        if t_init == 0:
            return source.clone()
        txt = prompt_embedding(prompt, self.denoiser.emb_dim, dtype=source.dtype)
        x0 = (2.0 * source - 1.0).permute(2, 0, 1).unsqueeze(0)
        g = torch.Generator().manual_seed(seed)
        noise = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
        x = sched.add_noise(x0, t_init, noise)
        with torch.no_grad():
            for t in range(t_init, 0, -1):
                eps = self.predict_noise(x, t, txt, conds)
                ab_t = sched.alpha_bar_at(t)
                ab_prev = sched.alpha_bar_at(t - 1)
                x0_pred = ((x - torch.sqrt(1 - ab_t) * eps) / torch.sqrt(ab_t)).clamp(-1, 1)
                x = torch.sqrt(ab_prev) * x0_pred + torch.sqrt(1 - ab_prev) * eps
        out = (x[0].permute(1, 2, 0) + 1.0) / 2.0
        return out.clamp(0.0, 1.0)


def sample_dropout_flags(gen: torch.Generator, n: int, p: float = 0.25) -> Tensor:
    """(n, 3) independent condition-dropout decisions."""
    return torch.rand(n, 3, generator=gen, dtype=torch.float64) < p


def _noise_loss(backend: StylizerBackend, record: dict, t: int, noise: Tensor,
                conds: EAMConditions | None) -> Tensor:
    x0 = (2.0 * record["image"] - 1.0).permute(2, 0, 1).unsqueeze(0)
    x_t = backend.schedule.add_noise(x0, t, noise)
    eps = backend.predict_noise(x_t, t, record["txt"], conds)
    return ((eps - noise) ** 2).mean()


def train_denoiser(backend: StylizerBackend, dataset: list[dict], steps: int, lr: float = 2e-3,
                   batch: int = 4, seed: int = 0) -> list[float]:
    """Pretrain the backbone noise predictor (no conditions) on a dataset of
    records {image (H, W, 3), txt (emb_dim,)}. All records must share one
    prompt embedding (single-style desk corpus)."""
    if not dataset:
        raise ParameterError("empty dataset")
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(backend.denoiser.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=lr / 20)
    x0s = torch.stack([(2.0 * r["image"] - 1.0).permute(2, 0, 1) for r in dataset])
    txt = dataset[0]["txt"]
    history = []
    for step in range(steps):
        idx = torch.randint(len(dataset), (batch,), generator=g)
        t = int(torch.randint(1, backend.schedule.steps + 1, (1,), generator=g))
        x0 = x0s[idx]
        noise = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
        x_t = backend.schedule.add_noise(x0, t, noise)
        loss = ((backend.denoiser(x_t, t, txt) - noise) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append(float(loss.detach()))
    return history


def train_eam(backend: StylizerBackend, dataset: list[dict], steps: int = 2000, lr: float = 1e-3,
              p_drop: float = 0.25, seed: int = 0) -> tuple[EAM, list[float]]:
    """Train the condition-injection network against the frozen backbone.

    Dataset records: {image (H, W, 3), txt (emb_dim,), lmk (5, 2), theta (2,),
    psi (k,)}. Each of the three conditions is dropped independently with
    probability p_drop per sample. Returns the EAM and the loss history;
    because the EAM starts at exact zero contribution, history[0] equals the
    backbone-only loss on the first batch.
    """
    if not dataset:
        raise ParameterError("empty dataset")
    k_expr = dataset[0]["psi"].shape[0]
    image_size = dataset[0]["image"].shape[0]
    if backend.eam is None:
        backend.eam = EAM(backend.denoiser, k_expr=k_expr, image_size=image_size)
    eam = backend.eam
    for p in backend.denoiser.parameters():
        p.requires_grad_(False)
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(eam.parameters(), lr=lr)
    history = []
    for step in range(steps):
        rec = dataset[int(torch.randint(len(dataset), (1,), generator=g))]
        t = int(torch.randint(1, backend.schedule.steps + 1, (1,), generator=g))
        noise = torch.randn(1, 3, *rec["image"].shape[:2], generator=g, dtype=rec["image"].dtype)
        flags = sample_dropout_flags(g, 1, p_drop)[0]
        conds = EAMConditions(
            lmk=rec["lmk"], theta=rec["theta"], psi=rec["psi"],
            dropout_flags=tuple(bool(f) for f in flags),
        )
        loss = _noise_loss(backend, rec, t, noise, conds)
        if not torch.isfinite(loss):
            raise TrainingFaultError("non-finite conditioning loss", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    for p in backend.denoiser.parameters():
        p.requires_grad_(True)
    return eam, history


# ---------------------------------------------------------------------------
# Mock stylizer with known 3D ground truth
# ---------------------------------------------------------------------------


@dataclass
class MockStyleSpec:
    """Analytic style: a feathered vertex displacement of the nose region
    along outward normals, a photometric tint, and an optional per-sample
    identity erosion toward the template (mean face)."""

    nose_amplitude: float = 0.0
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    identity_blend: float = 0.0
    nose_uv: tuple[float, float] = (0.50, 0.55)
    nose_sigma: float = 0.10
    # None: displace along each vertex's normal; otherwise a fixed world
    # direction (e.g. toward the camera), which keeps the field smooth on
    # coarse meshes
    nose_direction: tuple[float, float, float] | None = None

    def displacement_weights(self, mesh: Mesh) -> Tensor:
        uv = mesh.uvs
        cu, cv = self.nose_uv
        d2 = (uv[:, 0] - cu) ** 2 + (uv[:, 1] - cv) ** 2
        return torch.exp(-d2 / (2.0 * self.nose_sigma**2))

    def deform_vertices(self, mesh: Mesh, template_vertices: Tensor | None = None) -> Tensor:
        v = mesh.vertices
        if self.identity_blend != 0.0:
            if template_vertices is None:
                raise ParameterError("identity_blend requires the template vertices")
            v = v + self.identity_blend * (template_vertices - v)
        if self.nose_amplitude != 0.0:
            if self.nose_direction is None:
                d = vertex_normals(mesh.vertices, mesh.faces)
            else:
                d = torch.tensor(self.nose_direction, dtype=v.dtype)
                d = (d / torch.linalg.norm(d)).expand_as(v)
            w = self.displacement_weights(mesh)
            v = v + self.nose_amplitude * w[:, None] * d
        return v

    def apply_tint(self, texture: Tensor) -> Tensor:
        t = torch.tensor(self.tint, dtype=texture.dtype)
        return (texture * t[None, None, :]).clamp(0.0, 1.0)


def color_statistics_distance(image: Tensor, target: Tensor) -> Tensor:
    """Style distance as distance between global color statistics.

    Robust to the reconstruction blur of small denoisers, which dominates raw
    pixel distance; a tint-style target is characterized by its color stats.
    """
    return torch.linalg.norm(image.mean(dim=(0, 1)) - target.mean(dim=(0, 1)))


def mock_stylize(mesh: Mesh, texture: Tensor, cam: Camera, spec: MockStyleSpec,
                 template_vertices: Tensor | None = None, **render_kwargs) -> Tensor:
    """The exact image a perfectly stylized 3D model would produce: render the
    analytically displaced mesh with the tinted texture under the same camera."""
    styled = mesh.with_vertices(spec.deform_vertices(mesh, template_vertices))
    return render(styled, spec.apply_tint(texture), cam, **render_kwargs)


# ---------------------------------------------------------------------------
# Landmark providers
# ---------------------------------------------------------------------------


class MockLandmarkProvider:
    """Projects designated mesh vertices; ordering fixed as (left eye, right
    eye, nose tip, left lip corner, right lip corner)."""

    def __init__(self, landmark_vertices):
        self.indices = torch.as_tensor(landmark_vertices, dtype=torch.long)
        if self.indices.shape != (5,):
            raise ParameterError("expected exactly five landmark vertex indices")

    def landmarks(self, mesh: Mesh, cam: Camera, sample_id: str | None = None) -> Tensor:
        try:
            return project(cam, mesh.vertices[self.indices])
        except Exception as exc:
            raise LandmarkError(sample_id, f"landmark projection failed for sample {sample_id}: {exc}") from exc
