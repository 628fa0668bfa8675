"""Surface deformation network: (vertex position, shape, expression) -> per-vertex offset.

The source variant is distilled from the toy linear morph model so that
fine-tuning starts from a network that reproduces the source 3DMM geometry.
Smooth activations (SiLU) keep the vertex Jacobians finite-difference clean.
"""
from __future__ import annotations

import copy
import math

import torch
from torch import Tensor, nn

from .errors import ParameterError, TrainingFaultError
from .mesh import DEFAULT_DTYPE, Mesh, MorphBasis, MorphParams, morph


def positional_encoding(x: Tensor, n_freq: int) -> Tensor:
    """[x, sin(2^i pi x), cos(2^i pi x)] feature lift along the last axis."""
    feats = [x]
    for i in range(n_freq):
        feats.append(torch.sin((2.0**i) * math.pi * x))
        feats.append(torch.cos((2.0**i) * math.pi * x))
    return torch.cat(feats, dim=-1)


class DeformNet(nn.Module):
    """Coordinate MLP predicting per-vertex offsets, zero at initialization.

    (beta, psi) condition every hidden layer through learned scale/shift
    modulation, which lets the network represent offset fields that are
    linear in the coefficients without fighting the optimizer.
    """

    def __init__(
        self,
        k_shape: int = 10,
        k_expr: int = 10,
        width: int = 128,
        depth: int = 4,
        n_freq: int = 8,
        dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        self.k_shape = k_shape
        self.k_expr = k_expr
        self.width = width
        self.n_freq = n_freq
        k = k_shape + k_expr
        self.lin = nn.ModuleList()
        self.film = nn.ModuleList()
        d = 3 * (1 + 2 * n_freq)
        for _ in range(depth):
            self.lin.append(nn.Linear(d, width, dtype=dtype))
            d = width
            f = nn.Linear(k, 2 * width, dtype=dtype)
            nn.init.zeros_(f.weight)
            nn.init.zeros_(f.bias)  # modulation starts as identity
            self.film.append(f)
        self.act = nn.SiLU()
        self.head = nn.Linear(width, 3, dtype=dtype)
        # zero-init head: a fresh network is the identity deformation
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def config(self) -> dict:
        return {
            "k_shape": self.k_shape,
            "k_expr": self.k_expr,
            "width": self.width,
            "depth": len(self.lin),
            "n_freq": self.n_freq,
        }

    def forward(self, verts: Tensor, beta: Tensor, psi: Tensor) -> Tensor:
        """Offsets (N, 3) for single (k,) coefficients, or (B, N, 3) for (B, k)."""
        batched = beta.dim() == 2
        if beta.shape[-1:] != (self.k_shape,) or psi.shape[-1:] != (self.k_expr,):
            raise ParameterError(
                f"expected beta (..., {self.k_shape}) and psi (..., {self.k_expr}), "
                f"got {tuple(beta.shape)} and {tuple(psi.shape)}"
            )
        cond = torch.cat([beta, psi], dim=-1)
        if not batched:
            cond = cond.unsqueeze(0)
        x = positional_encoding(verts, self.n_freq).unsqueeze(0)
        for lin, film in zip(self.lin, self.film):
            x = lin(x)
            scale, shift = film(cond).chunk(2, dim=-1)
            x = self.act(x * (1 + scale[:, None, :]) + shift[:, None, :])
        out = self.head(x)
        return out if batched else out[0]


def deform(net: DeformNet, basis: MorphBasis, params: MorphParams, batch_index: int | None = None) -> Mesh:
    """Mesh with vertices template + net(template, beta, psi); connectivity shared."""
    template = basis.template
    beta = params.beta.to(template.vertices.dtype)
    psi = params.psi.to(template.vertices.dtype)
    offsets = net(template.vertices, beta, psi)
    if not bool(torch.isfinite(offsets).all()):
        raise TrainingFaultError("non-finite deformation output", batch_index=batch_index)
    return template.with_vertices(template.vertices + offsets)


def clone_for_style(src: DeformNet) -> DeformNet:
    """Deep copy; updates to the clone never touch the source network."""
    return copy.deepcopy(src)


def distill_source(
    net: DeformNet,
    basis: MorphBasis,
    steps: int = 2000,
    batch: int = 8,
    lr: float = 4e-3,
    seed: int = 0,
) -> list[float]:
    """Supervised distillation of the linear morph model into the network.

    Samples (beta, psi) from the standard normal and regresses the offsets of
    morph(). Returns the per-step loss history.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    template = basis.template
    dtype = template.vertices.dtype
    k = basis.k_shape + basis.k_expr
    history = []
    for _ in range(steps):
        cond = torch.randn(batch, k, generator=gen, dtype=dtype)
        target = torch.stack(
            [
                morph(basis, MorphParams(beta=c[: basis.k_shape], psi=c[basis.k_shape :])).vertices
                - template.vertices
                for c in cond
            ]
        )
        pred = net(template.vertices, cond[:, : basis.k_shape], cond[:, basis.k_shape :])
        loss = ((pred - target) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append(float(loss.detach()))
    return history


def mean_vertex_error(net: DeformNet, basis: MorphBasis, n_eval: int = 32, seed: int = 999) -> float:
    """Mean Euclidean vertex error of the network against morph() on held-out params."""
    gen = torch.Generator().manual_seed(seed)
    dtype = basis.template.vertices.dtype
    errs = []
    with torch.no_grad():
        for _ in range(n_eval):
            beta = torch.randn(basis.k_shape, generator=gen, dtype=dtype)
            psi = torch.randn(basis.k_expr, generator=gen, dtype=dtype)
            params = MorphParams(beta=beta, psi=psi)
            pred = deform(net, basis, params).vertices
            target = morph(basis, params).vertices
            errs.append(float(torch.linalg.norm(pred - target, dim=1).mean()))
    return sum(errs) / len(errs)


def bounding_box_diagonal(mesh: Mesh) -> float:
    ext = mesh.vertices.max(dim=0).values - mesh.vertices.min(dim=0).values
    return float(torch.linalg.norm(ext))
