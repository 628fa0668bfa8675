"""Quantitative evaluation of a fine-tuned style model: sample diversity of
the recovered geometry, prompt-similarity style scores, correspondence
overlays, and a CSV comparison table across run directories.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from .errors import DataError, ParameterError
from .mesh import DEFAULT_DTYPE, Mesh, MorphBasis, MorphParams
from .render import render


@dataclass
class EvalReport:
    """One evaluation run, reproducible from (checkpoint, seed).

    style_score is None when no joint image/text embedder is available; the
    JSON form then carries an explicit "unavailable" marker instead of a
    silent zero.
    """

    style: str
    face_diversity: float
    style_score: float | None
    n_samples: int
    seed: int
    config_hash: str

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        if self.style_score is None:
            d["style_score"] = "unavailable"
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        if d.get("style_score") == "unavailable":
            d["style_score"] = None
        return cls(**d)


# ---------------------------------------------------------------------------
# Face diversity
# ---------------------------------------------------------------------------


def _check_shared_connectivity(meshes: list[Mesh]):
    first = meshes[0]
    for i, m in enumerate(meshes[1:], start=1):
        if m.vertices.shape != first.vertices.shape or not torch.equal(m.faces, first.faces):
            raise ParameterError(f"mesh {i} does not share the common connectivity")


def face_diversity(meshes: list[Mesh], k: int = 100) -> float:
    """Total variance captured by the top k principal components of the
    flattened vertex positions (absolute eigenvalue sum, population
    covariance). Zero iff all meshes coincide; invariant under a common
    translation; scales as s^2 under uniform scaling."""
    if len(meshes) < 2:
        raise ParameterError("diversity needs at least 2 meshes")
    _check_shared_connectivity(meshes)
    x = torch.stack([m.vertices.reshape(-1) for m in meshes])
    centered = x - x.mean(dim=0)
    # eigenvalues of the population covariance via singular values
    eig = torch.linalg.svdvals(centered) ** 2 / x.shape[0]
    return float(eig[: min(k, eig.numel())].sum())


def face_diversity_bruteforce(meshes: list[Mesh], k: int = 100) -> float:
    """Independent oracle: explicit covariance matrix eigendecomposition."""
    if len(meshes) < 2:
        raise ParameterError("diversity needs at least 2 meshes")
    _check_shared_connectivity(meshes)
    x = torch.stack([m.vertices.reshape(-1) for m in meshes])
    centered = x - x.mean(dim=0)
    cov = centered.T @ centered / x.shape[0]
    eig = torch.linalg.eigvalsh(cov).flip(0).clamp_min(0.0)
    return float(eig[: min(k, eig.numel())].sum())


def sample_style_meshes(d_style, basis: MorphBasis, n: int, seed: int = 0) -> list[Mesh]:
    """Draw n shape/expression parameters from the sampling prior and run
    them through the style deformation network."""
    from .deform import deform

    g = torch.Generator().manual_seed(seed)
    meshes = []
    with torch.no_grad():
        for _ in range(n):
            beta = torch.randn(basis.k_shape, generator=g)
            psi = torch.randn(basis.k_expr, generator=g)
            meshes.append(deform(d_style, basis, MorphParams(beta=beta, psi=psi)))
    return meshes


# ---------------------------------------------------------------------------
# Style score
# ---------------------------------------------------------------------------


class MockJointEmbedder:
    """Deterministic stand-in for a joint image/text embedding space: pooled
    pixels through a fixed random projection; prompts hashed to fixed unit
    vectors. Only the plumbing (cosine averaging, availability handling) is
    meaningful, not the scores themselves."""

    def __init__(self, dim: int = 32, pool: int = 8, seed: int = 500, dtype=DEFAULT_DTYPE):
        g = torch.Generator().manual_seed(seed)
        self.proj = torch.randn(dim, pool * pool * 3, generator=g, dtype=dtype)
        self.pool = pool
        self.dim = dim
        self.dtype = dtype

    def embed_image(self, image: Tensor) -> Tensor:
        x = image.permute(2, 0, 1).unsqueeze(0)
        x = torch.nn.functional.adaptive_avg_pool2d(x, self.pool)
        v = self.proj @ x.reshape(-1)
        return v / torch.linalg.norm(v).clamp_min(1e-12)

    def embed_text(self, prompt: str) -> Tensor:
        seed = int.from_bytes(hashlib.sha256(prompt.encode()).digest()[:4], "big")
        v = torch.randn(self.dim, generator=torch.Generator().manual_seed(seed),
                        dtype=self.dtype)
        return v / torch.linalg.norm(v).clamp_min(1e-12)


def style_score(images: list[Tensor], prompt: str, embedder) -> float | None:
    """Mean cosine similarity between each image embedding and the prompt
    embedding. Returns None ("metric unavailable") when no embedder is given;
    never a silent zero."""
    if embedder is None:
        return None
    if not images:
        raise ParameterError("style score needs at least one image")
    t = embedder.embed_text(prompt)
    t = t / torch.linalg.norm(t).clamp_min(1e-12)
    total = 0.0
    for img in images:
        e = embedder.embed_image(img)
        e = e / torch.linalg.norm(e).clamp_min(1e-12)
        total += float(e @ t)
    return total / len(images)


# ---------------------------------------------------------------------------
# Correspondence overlays
# ---------------------------------------------------------------------------


def face_list_hash(mesh: Mesh) -> str:
    """Content hash of the triangle list; equal hashes certify shared
    vertex correspondence across samples."""
    return hashlib.sha256(mesh.faces.to(torch.int64).numpy().tobytes()).hexdigest()


def make_checker_texture(resolution: int = 64, tiles: int = 8,
                         dtype=DEFAULT_DTYPE) -> Tensor:
    """Shared UV checker pattern for correspondence inspection."""
    idx = torch.arange(resolution)
    cell = (idx * tiles // resolution).to(torch.int64)
    parity = (cell[:, None] + cell[None, :]) % 2
    dark = torch.tensor([0.15, 0.15, 0.55], dtype=dtype)
    light = torch.tensor([0.95, 0.95, 0.85], dtype=dtype)
    return torch.where(parity[:, :, None] == 0, light, dark)


def correspondence_overlay(meshes: list[Mesh], checker_texture: Tensor, cam,
                           **render_kwargs) -> list[Tensor]:
    """Render every mesh with one shared checker texture. Refuses meshes that
    do not share vertex count and face list."""
    if not meshes:
        raise ParameterError("no meshes to overlay")
    _check_shared_connectivity(meshes)
    reference = face_list_hash(meshes[0])
    images = []
    with torch.no_grad():
        for m in meshes:
            if face_list_hash(m) != reference:
                raise ParameterError("face-list hash diverged between meshes")
            images.append(render(m, checker_texture, cam, **render_kwargs))
    return images


def part_correspondence_rate(meshes: list[Mesh], cam, vertex_index: int,
                             part: str = "eyes", tolerance_px: int = 1) -> float:
    """Fraction of samples in which a designated vertex projects onto its
    part's rendered mask.

    Visibility-aware at mesh scale: a sample counts only when the face
    covering the vertex's pixel is incident to the vertex (otherwise the
    vertex is occluded and membership is undefined). The mask test allows a
    small pixel tolerance because a region-boundary vertex legitimately
    shares its pixel with adjacent faces on coarse meshes.
    """
    from .render import rasterize_face_ids, render_part_masks

    if not meshes:
        raise ParameterError("no meshes to check")
    _check_shared_connectivity(meshes)
    if part not in meshes[0].part_regions:
        raise ParameterError(f"unknown part class '{part}'")
    from .camera import project

    w, h = cam.size
    visible = hits = 0
    with torch.no_grad():
        for mesh in meshes:
            ids = rasterize_face_ids(mesh, cam)
            mask = render_part_masks(mesh, cam)[part]
            px = project(cam, mesh.vertices[vertex_index].unsqueeze(0))[0]
            x = min(max(int(px[0]), 0), w - 1)
            y = min(max(int(px[1]), 0), h - 1)
            covering = int(ids[y, x])
            if covering < 0 or vertex_index not in mesh.faces[covering]:
                continue
            visible += 1
            t = tolerance_px
            hits += bool(mask[max(0, y - t):y + t + 1, max(0, x - t):x + t + 1].any())
    if visible == 0:
        raise ParameterError("designated vertex never visible in the sample set")
    return hits / visible


# ---------------------------------------------------------------------------
# Run comparison table
# ---------------------------------------------------------------------------

REPORT_FILENAME = "eval.json"

_TABLE_COLUMNS = ("style", "face_diversity", "style_score", "n_samples", "seed",
                  "config_hash")


def write_report(report: EvalReport, run_dir: str | Path) -> Path:
    path = Path(run_dir) / REPORT_FILENAME
    path.write_text(report.to_json())
    return path


def read_report(run_dir: str | Path) -> EvalReport:
    path = Path(run_dir) / REPORT_FILENAME
    if not path.exists():
        raise DataError(f"no evaluation report in {run_dir}")
    return EvalReport.from_json(path.read_text())


def compare_runs(run_dirs: list[str | Path], out_csv: str | Path) -> Path:
    """One row per run directory's evaluation report, in the shape of the
    published comparison tables (metric columns per style row)."""
    if not run_dirs:
        raise ParameterError("no run directories to compare")
    out_csv = Path(out_csv)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TABLE_COLUMNS)
        for run_dir in run_dirs:
            report = read_report(run_dir)
            row = dataclasses.asdict(report)
            if row["style_score"] is None:
                row["style_score"] = "unavailable"
            writer.writerow([row[c] for c in _TABLE_COLUMNS])
    return out_csv
