"""Differentiable soft rasterizer and hard part-mask renderer.

Soft rasterization follows the probabilistic silhouette formulation: each face
contributes a per-pixel coverage D = sigmoid(sign * d^2 / sigma) where d is
the screen-space distance to the triangle boundary (in image-width units),
silhouettes aggregate as 1 - prod(1 - D), and colors aggregate with
depth-weighted soft z-buffering. Contributions decay as exp(-d^2 / sigma), so
pixel/face pairs outside a conservative bounding-box margin are skipped; the
remaining pairs are evaluated flat and scatter-added per pixel, which keeps
the whole pass differentiable w.r.t. vertices, texture, and camera angles.
"""
from __future__ import annotations

import math

import torch
from torch import Tensor

from .camera import Camera, camera_transform
from .errors import ParameterError, RenderFaultError
from .mesh import Mesh

_TINY = 1e-12
# pairs with d^2 / sigma beyond this contribute < 1e-13 coverage
_CUTOFF = 30.0


def sample_texture(texture: Tensor, uv: Tensor) -> Tensor:
    """Bilinear texture lookup. texture: (Ht, Wt, 3), uv: (..., 2) in [0,1]^2."""
    ht, wt = texture.shape[0], texture.shape[1]
    gx = (uv[..., 0].clamp(0, 1)) * (wt - 1)
    gy = (uv[..., 1].clamp(0, 1)) * (ht - 1)
    x0 = gx.floor().long().clamp(0, wt - 2)
    y0 = gy.floor().long().clamp(0, ht - 2)
    fx = (gx - x0).unsqueeze(-1)
    fy = (gy - y0).unsqueeze(-1)
    c00 = texture[y0, x0]
    c01 = texture[y0, x0 + 1]
    c10 = texture[y0 + 1, x0]
    c11 = texture[y0 + 1, x0 + 1]
    return (
        c00 * (1 - fx) * (1 - fy)
        + c01 * fx * (1 - fy)
        + c10 * (1 - fx) * fy
        + c11 * fx * fy
    )


def _screen_geometry(mesh: Mesh, cam: Camera, theta: Tensor | None):
    pc = camera_transform(cam, mesh.vertices, theta=theta)
    z = pc[:, 2]
    if bool((z <= 1e-6).any()):
        raise RenderFaultError("mesh vertices at or behind the camera plane")
    w, h = cam.size
    u = cam.focal * pc[:, 0] / z + cam.principal[0]
    v = cam.focal * pc[:, 1] / z + cam.principal[1]
    # normalized by image width so sigma is resolution independent
    xy = torch.stack([u / w, v / w], dim=1)
    return xy, z


def _pixel_grid(cam: Camera, dtype) -> Tensor:
    w, h = cam.size
    ys = (torch.arange(h, dtype=dtype) + 0.5) / w
    xs = (torch.arange(w, dtype=dtype) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1)  # (P, 2)


def _candidate_pairs(q: Tensor, tri: Tensor, margin: float) -> tuple[Tensor, Tensor]:
    """Indices (pixel_idx, face_idx) of pairs within `margin` of a face bbox."""
    with torch.no_grad():
        lo = tri.min(dim=1).values - margin  # (F, 2)
        hi = tri.max(dim=1).values + margin
        inx = (q[:, None, 0] >= lo[None, :, 0]) & (q[:, None, 0] <= hi[None, :, 0])
        iny = (q[:, None, 1] >= lo[None, :, 1]) & (q[:, None, 1] <= hi[None, :, 1])
        pairs = torch.nonzero(inx & iny)
    return pairs[:, 0], pairs[:, 1]


def _segment_distance(q: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """Distance from points q (K, 2) to segments a->b (K, 2)."""
    ab = b - a
    denom = (ab * ab).sum(-1).clamp_min(_TINY)
    t = (((q - a) * ab).sum(-1) / denom).clamp(0.0, 1.0)
    diff = q - (a + t.unsqueeze(-1) * ab)
    return torch.sqrt((diff * diff).sum(-1).clamp_min(_TINY))


def _edge(pa: Tensor, pb: Tensor, pq: Tensor) -> Tensor:
    return (pb[..., 0] - pa[..., 0]) * (pq[..., 1] - pa[..., 1]) - (
        pb[..., 1] - pa[..., 1]
    ) * (pq[..., 0] - pa[..., 0])


def _pair_coverage(qk: Tensor, trik: Tensor, sigma: float) -> tuple[Tensor, Tensor]:
    """Per-pair soft coverage (K,) and clamped barycentrics (K, 3)."""
    p0, p1, p2 = trik[:, 0], trik[:, 1], trik[:, 2]
    area = _edge(p0, p1, p2)
    area_safe = torch.where(area.abs() < _TINY, torch.full_like(area, _TINY), area)
    w0 = _edge(p1, p2, qk) / area_safe
    w1 = _edge(p2, p0, qk) / area_safe
    w2 = _edge(p0, p1, qk) / area_safe
    bary = torch.stack([w0, w1, w2], dim=-1)
    inside = (bary >= 0).all(dim=-1)

    dist = torch.minimum(
        torch.minimum(_segment_distance(qk, p0, p1), _segment_distance(qk, p1, p2)),
        _segment_distance(qk, p2, p0),
    )
    sign = torch.where(inside, torch.ones_like(dist), -torch.ones_like(dist))
    cov = torch.sigmoid(sign * dist * dist / sigma)

    bary_pos = bary.clamp_min(0.0)
    bary_pos = bary_pos / bary_pos.sum(dim=-1, keepdim=True).clamp_min(_TINY)
    return cov, bary_pos


def _soft_margin(sigma: float, cam: Camera) -> float:
    # normalized units; at least ~1.5 px
    return max(math.sqrt(_CUTOFF * sigma), 1.5 / cam.size[0])


def render(
    mesh: Mesh,
    texture: Tensor,
    cam: Camera,
    sigma: float = 1e-5,
    gamma: float = 0.004,
    background: tuple[float, float, float] = (0.5, 0.5, 0.5),
    theta: Tensor | None = None,
    depth_margin: float = 1.5,
) -> Tensor:
    """Soft-rasterized (H, W, 3) image of the textured mesh.

    Raises RenderFaultError if the mesh rasterizes to nothing.
    """
    if texture.ndim != 3 or texture.shape[2] != 3:
        raise ParameterError("texture must be (Ht, Wt, 3)")
    dtype = mesh.vertices.dtype
    xy, z = _screen_geometry(mesh, cam, theta)
    q = _pixel_grid(cam, dtype)
    w, h = cam.size
    p = q.shape[0]

    # fixed frustum slab around the nominal camera distance; keeping these
    # constants independent of the mesh keeps the image smooth in the vertices
    z_near = cam.translation[2] - depth_margin
    z_far = cam.translation[2] + depth_margin
    tri = xy[mesh.faces]  # (T, 3, 2)
    pi, fi = _candidate_pairs(q, tri.detach(), _soft_margin(sigma, cam))
    if pi.numel() == 0:
        raise RenderFaultError("mesh rasterized to empty image")

    cov, bary = _pair_coverage(q[pi], tri[fi], sigma)
    fverts = mesh.faces[fi]  # (K, 3)
    # perspective-correct interpolation: 1/z is linear in screen space
    inv_z = 1.0 / z[fverts]
    zf = 1.0 / (bary * inv_z).sum(-1)
    zb = ((z_far - zf) / (z_far - z_near)).clamp(-2.0, 2.0)  # 1 near, 0 far
    uvf = ((bary * inv_z).unsqueeze(-1) * mesh.uvs[fverts]).sum(-2) * zf.unsqueeze(-1)
    color = sample_texture(texture, uvf)  # (K, 3)

    # per-pixel shift cancels exactly between num and den; keeps exp in range
    zb_ref = torch.full((p,), -float("inf"), dtype=dtype).index_reduce(
        0, pi, zb.detach(), "amax", include_self=True
    )
    zb_ref = torch.where(torch.isinf(zb_ref), torch.zeros_like(zb_ref), zb_ref)
    wface = cov * torch.exp((zb - zb_ref[pi]) / gamma)
    num = torch.zeros(p, 3, dtype=dtype).index_add(0, pi, wface.unsqueeze(-1) * color)
    den = torch.zeros(p, dtype=dtype).index_add(0, pi, wface)
    log_transmit = torch.zeros(p, dtype=dtype).index_add(
        0, pi, torch.log1p(-cov.clamp(max=1 - 1e-12))
    )

    alpha = 1.0 - torch.exp(log_transmit)
    if float(alpha.max().detach()) < 1e-3:
        raise RenderFaultError("mesh rasterized to empty image")
    fg = num / den.clamp_min(_TINY).unsqueeze(-1)
    bg = torch.tensor(background, dtype=dtype)
    img = alpha.unsqueeze(-1) * fg + (1.0 - alpha.unsqueeze(-1)) * bg
    return img.reshape(h, w, 3)


def render_silhouette(
    mesh: Mesh,
    cam: Camera,
    face_subset: Tensor | None = None,
    sigma: float = 1e-5,
    theta: Tensor | None = None,
) -> Tensor:
    """Soft (H, W) coverage of the mesh (or a subset of its faces)."""
    dtype = mesh.vertices.dtype
    xy, _ = _screen_geometry(mesh, cam, theta)
    q = _pixel_grid(cam, dtype)
    w, h = cam.size
    faces = mesh.faces if face_subset is None else mesh.faces[face_subset]
    tri = xy[faces]
    pi, fi = _candidate_pairs(q, tri.detach(), _soft_margin(sigma, cam))
    log_transmit = torch.zeros(q.shape[0], dtype=dtype)
    if pi.numel():
        cov, _ = _pair_coverage(q[pi], tri[fi], sigma)
        log_transmit = log_transmit.index_add(0, pi, torch.log1p(-cov.clamp(max=1 - 1e-12)))
    return (1.0 - torch.exp(log_transmit)).reshape(h, w)


def soft_part_masks(
    mesh: Mesh,
    cam: Camera,
    classes: list[str],
    sigma: float = 1e-5,
    theta: Tensor | None = None,
) -> dict[str, Tensor]:
    """Differentiable per-class coverage maps plus a 'background' complement.

    Background is 1 minus total foreground coverage; the class maps are
    independent silhouettes and are not forced to partition.
    """
    out: dict[str, Tensor] = {}
    for c in classes:
        if c == "background":
            continue
        if c not in mesh.part_regions:
            raise ParameterError(f"unknown part class '{c}'")
        out[c] = render_silhouette(mesh, cam, face_subset=mesh.part_regions[c], sigma=sigma, theta=theta)
    if "background" in classes:
        out["background"] = 1.0 - render_silhouette(mesh, cam, sigma=sigma, theta=theta)
    return out


def rasterize_face_ids(mesh: Mesh, cam: Camera) -> Tensor:
    """Hard rasterization: (H, W) long map of nearest-hit face index, -1 = background."""
    dtype = mesh.vertices.dtype
    xy, z = _screen_geometry(mesh, cam, None)
    q = _pixel_grid(cam, dtype)
    w, h = cam.size
    tri = xy[mesh.faces]
    pi, fi = _candidate_pairs(q, tri, 0.0)
    best_z = torch.full((q.shape[0],), float("inf"), dtype=dtype)
    best_id = torch.full((q.shape[0],), -1, dtype=torch.long)
    if pi.numel():
        qk = q[pi]
        p0, p1, p2 = tri[fi, 0], tri[fi, 1], tri[fi, 2]
        area = _edge(p0, p1, p2)
        area_safe = torch.where(area.abs() < _TINY, torch.full_like(area, _TINY), area)
        w0 = _edge(p1, p2, qk) / area_safe
        w1 = _edge(p2, p0, qk) / area_safe
        w2 = _edge(p0, p1, qk) / area_safe
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0) & (area.abs() > _TINY)
        fverts = mesh.faces[fi]
        zf = 1.0 / (w0 / z[fverts[:, 0]] + w1 / z[fverts[:, 1]] + w2 / z[fverts[:, 2]])
        # nearest inside hit per pixel: reduce min depth, then match attaining pairs
        zin = torch.where(inside, zf, torch.full_like(zf, float("inf")))
        best_z = best_z.index_reduce(0, pi, zin, "amin")
        attains = inside & (zin <= best_z[pi])
        best_id[pi[attains]] = fi[attains]
    return best_id.reshape(h, w)


def render_part_masks(mesh: Mesh, cam: Camera, classes: list[str] | None = None) -> dict[str, Tensor]:
    """Hard per-class boolean masks from face-region membership plus 'background'.

    The returned masks are pairwise disjoint and their union covers the image.
    """
    if not mesh.part_regions:
        raise ParameterError("mesh has no part regions")
    available = list(mesh.part_regions.keys())
    if classes is None:
        classes = available + ["background"]
    for c in classes:
        if c != "background" and c not in mesh.part_regions:
            raise ParameterError(f"unknown part class '{c}'")
    face_ids = rasterize_face_ids(mesh, cam)
    class_of_face = torch.full((mesh.num_faces,), -1, dtype=torch.long)
    names = [c for c in classes if c != "background"]
    for ci, name in enumerate(names):
        class_of_face[mesh.part_regions[name]] = ci
    out: dict[str, Tensor] = {}
    fg = face_ids >= 0
    pixel_class = torch.full_like(face_ids, -1)
    pixel_class[fg] = class_of_face[face_ids[fg]]
    for ci, name in enumerate(names):
        out[name] = pixel_class == ci
    if "background" in classes:
        out["background"] = ~fg | (pixel_class == -1)
    return out
