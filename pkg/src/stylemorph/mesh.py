"""Mesh data structures, the toy morphable face model, and differential-geometry primitives.

All geometry is stored in torch tensors (float64 by default) so that every
downstream loss stays differentiable with respect to vertex positions.
Coordinate convention: x right, y down (screen-aligned), z away from the
default camera; the front of the face bulges toward -z.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import DegenerateTriangleError, ParameterError

DEFAULT_DTYPE = torch.float64

_EPS = 1e-12


@dataclass
class Mesh:
    """Triangle mesh with per-vertex UVs and UV-defined part regions.

    vertices: (N, 3) float tensor, faces: (T, 3) long tensor,
    uvs: (N, 2) in [0, 1]^2, part_regions: class name -> face-index tensor.
    """

    vertices: Tensor
    faces: Tensor
    uvs: Tensor
    part_regions: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        self.faces = self.faces.long()
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ParameterError(f"vertices must be (N, 3), got {tuple(self.vertices.shape)}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ParameterError(f"faces must be (T, 3), got {tuple(self.faces.shape)}")

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def validate(self):
        """Check index bounds, UV range, and part-region disjointness."""
        n = self.num_vertices
        if self.faces.numel() and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ParameterError("faces reference out-of-range vertex indices")
        if self.uvs.shape != (n, 2):
            raise ParameterError(f"uvs must be ({n}, 2), got {tuple(self.uvs.shape)}")
        if self.uvs.numel() and (self.uvs.min() < -1e-9 or self.uvs.max() > 1 + 1e-9):
            raise ParameterError("uvs must lie in [0, 1]^2")
        seen: set[int] = set()
        for name, idx in self.part_regions.items():
            ids = set(int(i) for i in idx.tolist())
            if ids & seen:
                raise ParameterError(f"part region '{name}' overlaps another region")
            if ids and max(ids) >= self.num_faces:
                raise ParameterError(f"part region '{name}' references invalid face index")
            seen |= ids

    def with_vertices(self, vertices: Tensor) -> "Mesh":
        """New mesh sharing connectivity/uvs/regions with replaced vertex positions."""
        if vertices.shape != self.vertices.shape:
            raise ParameterError("replacement vertices must match shape")
        return replace(self, vertices=vertices)

    def clone(self) -> "Mesh":
        return Mesh(
            vertices=self.vertices.clone(),
            faces=self.faces.clone(),
            uvs=self.uvs.clone(),
            part_regions={k: v.clone() for k, v in self.part_regions.items()},
        )

    def face_class_of(self, face_index: int) -> str | None:
        for name, idx in self.part_regions.items():
            if int(face_index) in set(idx.tolist()):
                return name
        return None


@dataclass
class MorphBasis:
    """Toy linear shape/expression basis over a fixed template.

    shape_basis and expr_basis are (N, 3, K) tensors whose columns have unit
    Frobenius norm.
    """

    template: Mesh
    shape_basis: Tensor
    expr_basis: Tensor

    @property
    def k_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def k_expr(self) -> int:
        return self.expr_basis.shape[2]


@dataclass
class MorphParams:
    """3DMM control parameters: shape beta, expression psi, texture latent z, rotation theta."""

    beta: Tensor
    psi: Tensor
    z: Tensor | None = None
    theta: tuple[float, float] = (0.0, 0.0)  # (yaw, pitch) radians


@dataclass
class EyeSocketSpec:
    """Per-eye socket description: a center vertex and its surrounding eyelid vertices."""

    centers: list[int]
    eyelids: list[list[int]]
    kappa: float = 1.0


def morph(basis: MorphBasis, params: MorphParams) -> Mesh:
    """Linear morph: template + shape_basis @ beta + expr_basis @ psi."""
    if params.beta.shape != (basis.k_shape,):
        raise ParameterError(
            f"beta has dimension {tuple(params.beta.shape)}, basis expects ({basis.k_shape},)"
        )
    if params.psi.shape != (basis.k_expr,):
        raise ParameterError(
            f"psi has dimension {tuple(params.psi.shape)}, basis expects ({basis.k_expr},)"
        )
    v = (
        basis.template.vertices
        + torch.einsum("nck,k->nc", basis.shape_basis, params.beta)
        + torch.einsum("nck,k->nc", basis.expr_basis, params.psi)
    )
    return basis.template.with_vertices(v)


def face_normals_unnormalized(vertices: Tensor, faces: Tensor) -> Tensor:
    """Cross-product face normals; magnitude equals twice the face area."""
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    return torch.cross(b - a, c - a, dim=1)


def vertex_normals(
    vertices: Tensor, faces: Tensor, diagnostics: list[int] | None = None
) -> Tensor:
    """Area-weighted vertex normals, unit length.

    Degenerate stars (zero accumulated normal) fall back to (0, 0, 1); their
    vertex indices are appended to `diagnostics` when given. Differentiable
    w.r.t. vertices away from degeneracies.
    """
    fn = face_normals_unnormalized(vertices, faces)
    acc = torch.zeros_like(vertices)
    for corner in range(3):
        acc = acc.index_add(0, faces[:, corner], fn)
    norms = torch.linalg.norm(acc, dim=1)
    degenerate = norms < 1e-12
    if diagnostics is not None and bool(degenerate.any()):
        diagnostics.extend(torch.nonzero(degenerate).flatten().tolist())
    fallback = torch.zeros_like(vertices)
    fallback[:, 2] = 1.0
    safe = torch.where(degenerate.unsqueeze(1), torch.ones_like(norms).unsqueeze(1), norms.unsqueeze(1))
    unit = torch.where(degenerate.unsqueeze(1), fallback, acc / safe)
    return unit


def triangle_angle_cosines(vertices: Tensor, faces: Tensor) -> Tensor:
    """Cosine of the internal angle at each triangle corner, (T, 3).

    Raises DegenerateTriangleError on zero-length edges.
    """
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    corners = (a, b, c)
    lengths = [torch.linalg.norm(b - a, dim=1), torch.linalg.norm(c - b, dim=1), torch.linalg.norm(a - c, dim=1)]
    for ln in lengths:
        bad = ln < _EPS
        if bool(bad.any()):
            raise DegenerateTriangleError(int(torch.nonzero(bad).flatten()[0]))
    cosines = []
    for i in range(3):
        p = corners[i]
        q = corners[(i + 1) % 3]
        r = corners[(i + 2) % 3]
        e1 = q - p
        e2 = r - p
        cosv = (e1 * e2).sum(dim=1) / (torch.linalg.norm(e1, dim=1) * torch.linalg.norm(e2, dim=1))
        cosines.append(cosv.clamp(-1.0, 1.0))
    return torch.stack(cosines, dim=1)


def tangent_project(reference: Mesh, displacement: Tensor) -> Tensor:
    """Remove the normal component of a per-vertex displacement field.

    Normals come from the reference mesh; the result satisfies d . n = 0 per
    vertex and the map is linear and idempotent.
    """
    if displacement.shape != reference.vertices.shape:
        raise ParameterError("displacement must be (N, 3) matching the reference mesh")
    n = vertex_normals(reference.vertices, reference.faces)
    return displacement - (displacement * n).sum(dim=1, keepdim=True) * n


def make_sphere(n_lat: int = 6, n_lon: int = 8, dtype=DEFAULT_DTYPE) -> Mesh:
    """Unit lat-long sphere used as the eyeball template."""
    verts = []
    uvs = []
    for i in range(n_lat + 1):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = 2 * np.pi * j / n_lon
            verts.append([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
            uvs.append([j / max(n_lon - 1, 1), i / n_lat])
    faces = []
    for i in range(n_lat):
        for j in range(n_lon):
            a = i * n_lon + j
            b = i * n_lon + (j + 1) % n_lon
            c = (i + 1) * n_lon + j
            d = (i + 1) * n_lon + (j + 1) % n_lon
            if i > 0:
                faces.append([a, b, c])
            if i < n_lat - 1:
                faces.append([b, d, c])
    return Mesh(
        vertices=torch.tensor(np.array(verts), dtype=dtype),
        faces=torch.tensor(np.array(faces), dtype=torch.long),
        uvs=torch.tensor(np.clip(np.array(uvs), 0, 1), dtype=dtype),
    )


def insert_eyeballs(
    mesh: Mesh, socket: EyeSocketSpec, eyeball_template: Mesh | None = None
) -> Mesh:
    """Append one eyeball mesh per socket; original geometry stays bit-exact.

    Each eyeball is the unit-sphere template translated to the socket center
    vertex and uniformly scaled by kappa * mean(center-to-eyelid distance).
    """
    if eyeball_template is None:
        eyeball_template = make_sphere(dtype=mesh.vertices.dtype)
    n = mesh.num_vertices
    for ci in socket.centers:
        if not (0 <= int(ci) < n):
            raise ParameterError(f"socket center index {ci} out of range")
    new_verts = [mesh.vertices]
    new_uvs = [mesh.uvs]
    new_faces = [mesh.faces]
    eyeball_face_ids = []
    offset = n
    face_offset = mesh.num_faces
    for ci, lids in zip(socket.centers, socket.eyelids):
        if len(lids) == 0:
            raise ParameterError("empty eyelid vertex set")
        for li in lids:
            if not (0 <= int(li) < n):
                raise ParameterError(f"eyelid index {li} out of range")
        center = mesh.vertices[int(ci)]
        dists = torch.linalg.norm(mesh.vertices[list(map(int, lids))] - center, dim=1)
        radius = socket.kappa * dists.mean()
        new_verts.append(eyeball_template.vertices * radius + center)
        new_uvs.append(eyeball_template.uvs)
        new_faces.append(eyeball_template.faces + offset)
        eyeball_face_ids.extend(range(face_offset, face_offset + eyeball_template.num_faces))
        offset += eyeball_template.num_vertices
        face_offset += eyeball_template.num_faces
    regions = {k: v.clone() for k, v in mesh.part_regions.items()}
    regions["eyeball"] = torch.tensor(eyeball_face_ids, dtype=torch.long)
    return Mesh(
        vertices=torch.cat(new_verts, dim=0),
        faces=torch.cat(new_faces, dim=0),
        uvs=torch.cat(new_uvs, dim=0),
        part_regions=regions,
    )


# ---------------------------------------------------------------------------
# Toy face template
# ---------------------------------------------------------------------------

# UV-space layout of facial parts (centers and radii in [0,1]^2; v grows downward).
_PART_LAYOUT = {
    "eye_left": (0.32, 0.38, 0.075, 0.055),
    "eye_right": (0.68, 0.38, 0.075, 0.055),
    "nose": (0.50, 0.55, 0.085, 0.115),
    "mouth": (0.50, 0.76, 0.150, 0.060),
}

LANDMARK_NAMES = ("eye_left", "eye_right", "nose_tip", "lip_left", "lip_right")

_LANDMARK_UV = {
    "eye_left": (0.32, 0.38),
    "eye_right": (0.68, 0.38),
    "nose_tip": (0.50, 0.55),
    "lip_left": (0.36, 0.76),
    "lip_right": (0.64, 0.76),
}


@dataclass
class FaceTemplate:
    """Toy face mesh plus the designated landmark vertices and eye sockets."""

    mesh: Mesh
    landmark_vertices: list[int]  # ordered as LANDMARK_NAMES
    sockets: EyeSocketSpec
    grid: int


def _nearest_vertex_uv(uvs: np.ndarray, target: tuple[float, float]) -> int:
    d = ((uvs - np.asarray(target)) ** 2).sum(axis=1)
    return int(np.argmin(d))


def make_face_template(grid: int = 16, dtype=DEFAULT_DTYPE) -> FaceTemplate:
    """Build the toy face surface: a bulged grid with a nose bump.

    The surface faces -z (toward the default camera), x grows right and y
    grows down, matching screen coordinates under the pinhole camera.
    """
    u = np.linspace(0.0, 1.0, grid)
    v = np.linspace(0.0, 1.0, grid)
    uu, vv = np.meshgrid(u, v, indexing="xy")
    uu = uu.reshape(-1)
    vv = vv.reshape(-1)
    x = (uu - 0.5) * 1.6
    y = (vv - 0.5) * 2.0
    r2 = ((uu - 0.5) / 0.55) ** 2 + ((vv - 0.5) / 0.55) ** 2
    bulge = 0.45 * np.sqrt(np.clip(1.0 - np.clip(r2, 0, 1), 0.0, 1.0))
    nose = 0.28 * np.exp(-(((uu - 0.5) / 0.07) ** 2 + ((vv - 0.55) / 0.09) ** 2))
    z = -(bulge + nose)
    verts = np.stack([x, y, z], axis=1)
    uvs = np.stack([uu, vv], axis=1)

    faces = []
    for i in range(grid - 1):
        for j in range(grid - 1):
            a = i * grid + j
            b = i * grid + j + 1
            c = (i + 1) * grid + j
            d = (i + 1) * grid + j + 1
            # wound so the outward normal points toward -z
            faces.append([a, c, b])
            faces.append([b, c, d])
    faces = np.array(faces)

    # classify faces by centroid UV into part regions
    centroids = uvs[faces].mean(axis=1)
    regions: dict[str, list[int]] = {"eyes": [], "nose": [], "mouth": [], "ears": [], "face": []}
    for fi, (cu, cv) in enumerate(centroids):
        assigned = None
        for part, (pu, pv, ru, rv) in _PART_LAYOUT.items():
            if ((cu - pu) / ru) ** 2 + ((cv - pv) / rv) ** 2 <= 1.0:
                assigned = "eyes" if part.startswith("eye") else part
                break
        if assigned is None and (cu < 0.07 or cu > 0.93) and 0.33 <= cv <= 0.62:
            assigned = "ears"
        regions[assigned or "face"].append(fi)

    mesh = Mesh(
        vertices=torch.tensor(verts, dtype=dtype),
        faces=torch.tensor(faces, dtype=torch.long),
        uvs=torch.tensor(uvs, dtype=dtype),
        part_regions={k: torch.tensor(v, dtype=torch.long) for k, v in regions.items()},
    )
    mesh.validate()

    landmark_vertices = [_nearest_vertex_uv(uvs, _LANDMARK_UV[n]) for n in LANDMARK_NAMES]

    centers = [landmark_vertices[0], landmark_vertices[1]]
    eyelids = []
    for c in centers:
        ci, cj = divmod(c, grid)
        ring = []
        for di in (-2, 0, 2):
            for dj in (-2, 0, 2):
                if di == 0 and dj == 0:
                    continue
                ni, nj = ci + di, cj + dj
                if 0 <= ni < grid and 0 <= nj < grid:
                    ring.append(ni * grid + nj)
        eyelids.append(ring)
    sockets = EyeSocketSpec(centers=centers, eyelids=eyelids)
    return FaceTemplate(mesh=mesh, landmark_vertices=landmark_vertices, sockets=sockets, grid=grid)


def _smooth_field(field_v: np.ndarray, faces: np.ndarray, n_verts: int, rounds: int) -> np.ndarray:
    """Jacobi-style smoothing of a per-vertex field over mesh adjacency."""
    neighbors: dict[int, set[int]] = {i: set() for i in range(n_verts)}
    for f in faces:
        for a in range(3):
            neighbors[f[a]].add(f[(a + 1) % 3])
            neighbors[f[a]].add(f[(a + 2) % 3])
    out = field_v.copy()
    for _ in range(rounds):
        nxt = out.copy()
        for i in range(n_verts):
            if neighbors[i]:
                nxt[i] = 0.5 * out[i] + 0.5 * out[list(neighbors[i])].mean(axis=0)
        out = nxt
    return out


def make_toy_basis(
    template: FaceTemplate,
    k_shape: int = 10,
    k_expr: int = 10,
    seed: int = 0,
) -> MorphBasis:
    """Random smooth displacement bases with unit Frobenius norm per column.

    Expression columns are localized around the mouth so psi reads as
    expression-like motion in the viewer.
    """
    mesh = template.mesh
    rng = np.random.default_rng(seed)
    n = mesh.num_vertices
    faces = mesh.faces.numpy()
    uvs = mesh.uvs.numpy()
    mouth_w = np.exp(-(((uvs[:, 0] - 0.5) / 0.28) ** 2 + ((uvs[:, 1] - 0.72) / 0.22) ** 2))

    def column(localize: np.ndarray | None) -> np.ndarray:
        f = rng.standard_normal((n, 3))
        f = _smooth_field(f, faces, n, rounds=6)
        if localize is not None:
            f = f * localize[:, None]
        f = f / np.linalg.norm(f)
        return f

    shape_cols = np.stack([column(None) for _ in range(k_shape)], axis=2)
    expr_cols = np.stack([column(mouth_w) for _ in range(k_expr)], axis=2)
    dtype = mesh.vertices.dtype
    return MorphBasis(
        template=mesh,
        shape_basis=torch.tensor(shape_cols, dtype=dtype),
        expr_basis=torch.tensor(expr_cols, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# OBJ import/export
# ---------------------------------------------------------------------------


def save_obj(mesh: Mesh, path: str | Path, regions_sidecar: bool = True):
    """ASCII OBJ with `v`, `vt`, `f v/vt` records; part regions in a JSON sidecar."""
    path = Path(path)
    lines = []
    for vtx in mesh.vertices.detach().numpy():
        lines.append(f"v {vtx[0]:.12g} {vtx[1]:.12g} {vtx[2]:.12g}")
    for uv in mesh.uvs.detach().numpy():
        lines.append(f"vt {uv[0]:.12g} {uv[1]:.12g}")
    for f in mesh.faces.numpy():
        lines.append("f " + " ".join(f"{i + 1}/{i + 1}" for i in f))
    path.write_text("\n".join(lines) + "\n")
    if regions_sidecar:
        sidecar = path.with_suffix(path.suffix + ".regions.json")
        sidecar.write_text(
            json.dumps({k: v.tolist() for k, v in mesh.part_regions.items()}, indent=0)
        )


def load_obj(path: str | Path, dtype=DEFAULT_DTYPE) -> Mesh:
    """Load a mesh written by save_obj (per-vertex UVs, v/vt indices equal)."""
    path = Path(path)
    verts, uvs, faces = [], [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
    regions: dict[str, Tensor] = {}
    sidecar = path.with_suffix(path.suffix + ".regions.json")
    if sidecar.exists():
        regions = {
            k: torch.tensor(v, dtype=torch.long)
            for k, v in json.loads(sidecar.read_text()).items()
        }
    return Mesh(
        vertices=torch.tensor(verts, dtype=dtype),
        faces=torch.tensor(faces, dtype=torch.long),
        uvs=torch.tensor(uvs, dtype=dtype),
        part_regions=regions,
    )
