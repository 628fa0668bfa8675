"""Training pipeline: paired data generation, the three fine-tuning stages
(geometry warm-up, joint fine-tuning, texture refinement), checkpointing and
the run orchestration. Also hosts the procedural texture family used to
distill the source texture generator.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .camera import Camera, project
from .deform import DeformNet, clone_for_style as clone_deform, deform
from .errors import (
    CheckpointError,
    DataError,
    LandmarkError,
    ParameterError,
    ProjectionError,
    RenderFaultError,
    TrainingFaultError,
)
from .losses import (
    LossConfig,
    LossLogger,
    MockPerceptualProvider,
    SEG_CLASSES,
    default_embedders,
    loss_cdl,
    loss_gan,
    loss_kp,
    loss_lpips,
    loss_recon,
    loss_reg,
    loss_seg,
)
from .mesh import (
    DEFAULT_DTYPE,
    FaceTemplate,
    MorphBasis,
    MorphParams,
    triangle_angle_cosines,
    vertex_normals,
)
from .render import render, soft_part_masks
from .stylize import MockLandmarkProvider, MockStyleSpec, mock_stylize, prompt_embedding
from .texture import (
    Discriminator,
    TextureGenerator,
    clone_for_style as clone_texture,
    generate_texture,
)

CHECKPOINT_VERSION = 1

STAGES = ("warmup", "joint", "texture")


def network_checkpoint(net: torch.nn.Module) -> dict:
    """Versioned snapshot: architecture metadata plus shape-annotated tensors."""
    state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    return {
        "version": CHECKPOINT_VERSION,
        "config": dict(getattr(net, "config", {})),
        "shapes": {k: tuple(v.shape) for k, v in state.items()},
        "state": state,
    }


def restore_network(net: torch.nn.Module, payload: dict):
    """Load a network_checkpoint payload, validating version and shapes."""
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')} incompatible with {CHECKPOINT_VERSION}"
        )
    own = net.state_dict()
    for k, shape in payload["shapes"].items():
        if k not in own or tuple(own[k].shape) != tuple(shape):
            raise CheckpointError(f"checkpoint tensor {k!r} does not fit the network")
    net.load_state_dict(payload["state"])


# UV-space feature placement for the procedural skin family; matches the
# part layout of the face template so rendered textures look face-like.
_TEX_FEATURES = (
    # (u, v, radius, base RGB, z index controlling brightness)
    (0.32, 0.38, 0.065, (0.15, 0.09, 0.05), 3),
    (0.68, 0.38, 0.065, (0.15, 0.09, 0.05), 3),
    (0.50, 0.76, 0.110, (0.62, 0.22, 0.22), 4),
    (0.50, 0.55, 0.080, (0.70, 0.48, 0.38), 5),
)


def procedural_face_texture(z: Tensor, resolution: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """Deterministic smooth texture family z -> (H, W, 3) image in [0, 1].

    A skin tone driven by z[0:3] with soft eye, mouth and nose features whose
    intensity is driven by z[3:6]. Low-frequency by construction so a small
    convolutional generator can be distilled onto it.
    """
    z = z.to(dtype)
    h = w = resolution
    v, u = torch.meshgrid(
        (torch.arange(h, dtype=dtype) + 0.5) / h,
        (torch.arange(w, dtype=dtype) + 0.5) / w,
        indexing="ij",
    )
    skin = 0.58 + 0.10 * torch.tanh(z[0:3])
    img = skin[None, None, :].expand(h, w, 3).clone()
    # gentle vertical shading so the family is not constant per channel
    img = img * (0.92 + 0.08 * (1.0 - v))[:, :, None]
    for fu, fv, fr, rgb, zi in _TEX_FEATURES:
        mask = torch.exp(-(((u - fu) ** 2 + (v - fv) ** 2) / (2.0 * fr**2)))
        amp = 0.5 + 0.35 * torch.tanh(z[zi])
        color = torch.tensor(rgb, dtype=dtype)
        img = img + (amp * mask)[:, :, None] * (color[None, None, :] - img)
    return img.clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Everything a fine-tuning run needs, JSON round-trippable.

    The stage order (warmup, joint, texture) is fixed; ablation flags switch
    individual ingredients off independently.
    """

    seed: int = 0
    n_pairs: int = 200
    batch_size: int = 4
    epochs: dict = field(default_factory=lambda: {"warmup": 2, "joint": 4, "texture": 4})
    lr_deform: float = 5e-5
    lr_texture: float = 5e-5
    lr_disc: float = 1e-4
    render_size: int = 32
    texture_resolution: int = 64
    k_latent: int = 64
    sigma: float = 1e-5
    prompt: str = "desk style"
    backend: str = "mock"
    t_init: int = 19
    style: dict = field(default_factory=lambda: {
        "nose_amplitude": 0.15,
        "nose_sigma": 1.2,
        "nose_direction": [0.0, 1.0, 0.0],
        "tint": [0.45, 1.0, 0.45],
    })
    yaw_range: tuple = (-0.45, 0.45)
    pitch_range: tuple = (-0.2, 0.2)
    distance: float = 4.0
    disable_cdl: bool = False
    disable_warmup: bool = False
    disable_texture: bool = False
    disable_eam: bool = False
    disable_init: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if set(self.epochs) != set(STAGES):
            raise ParameterError(f"epochs must cover exactly the stages {STAGES}")
        if self.n_pairs < 2 or self.batch_size < 2:
            raise ParameterError("need at least 2 pairs and batch size >= 2")
        if self.backend not in ("mock", "toy"):
            raise ParameterError(f"unknown stylizer backend {self.backend!r}")

    def style_spec(self) -> MockStyleSpec:
        kw = dict(self.style)
        if "tint" in kw:
            kw["tint"] = tuple(kw["tint"])
        return MockStyleSpec(**kw)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["yaw_range"] = list(self.yaw_range)
        d["pitch_range"] = list(self.pitch_range)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        d = json.loads(text)
        d["loss"] = LossConfig(**d["loss"])
        d["yaw_range"] = tuple(d["yaw_range"])
        d["pitch_range"] = tuple(d["pitch_range"])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def desk_run_config(**overrides) -> RunConfig:
    """Desk-scale preset: 200 pairs, 32 px renders, learning rates raised to
    converge within the small step budget."""
    base = dict(n_pairs=200, render_size=32, batch_size=2,
                lr_deform=3e-4, lr_texture=2e-3, lr_disc=2e-4)
    base.update(overrides)
    return RunConfig(**base)


def full_run_config(**overrides) -> RunConfig:
    """Full-scale preset (documented, not exercised in CI): 10,000 pairs at
    the published learning rate."""
    base = dict(n_pairs=10_000, render_size=128, texture_resolution=128,
                lr_deform=5e-5, lr_texture=5e-5)
    base.update(overrides)
    return RunConfig(**base)


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------


def save_png(image: Tensor, path: str | Path):
    arr = (image.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path: str | Path, dtype=DEFAULT_DTYPE) -> Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"))
    return torch.from_numpy(arr.astype(np.float64) / 255.0).to(dtype)


# ---------------------------------------------------------------------------
# Paired dataset generation
# ---------------------------------------------------------------------------


def _camera_for(config: RunConfig, yaw: float, pitch: float) -> Camera:
    s = config.render_size
    return Camera(focal=1.4 * s, principal=(s / 2.0, s / 2.0), yaw=yaw, pitch=pitch,
                  translation=(0.0, 0.0, config.distance), size=(s, s))


def generate_paired_dataset(
    config: RunConfig,
    template: FaceTemplate,
    basis: MorphBasis,
    d_src: DeformNet,
    g_src: TextureGenerator,
    out_dir: str | Path,
    stylizer=None,
) -> Path:
    """Render (source, stylized) training pairs and write the JSONL manifest.

    Per sample: shape, expression and texture parameters are drawn from the
    standard normal, a camera pose from the configured ranges; the source is
    rendered from the distilled source networks and stylized by the selected
    backend. Landmarks are taken on the stylized geometry. Samples whose
    stylization or landmarking fails are skipped and logged; a skip rate
    above 5% aborts the run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    g = torch.Generator().manual_seed(config.seed)
    provider = MockLandmarkProvider(template.landmark_vertices)
    spec = config.style_spec()
    if config.backend == "toy" and stylizer is None:
        raise ParameterError("toy backend requires a stylizer instance")

    manifest_path = out_dir / "manifest.jsonl"
    skip_log = out_dir / "skipped.log"
    skips: list[str] = []
    lines: list[str] = []
    with torch.no_grad():
        for i in range(config.n_pairs):
            sid = f"{i:05d}"
            beta = torch.randn(basis.k_shape, generator=g)
            psi = torch.randn(basis.k_expr, generator=g)
            z_seed = int(torch.randint(0, 2**31 - 1, (1,), generator=g))
            pose = torch.rand(2, generator=g)
            yaw = config.yaw_range[0] + float(pose[0]) * (config.yaw_range[1] - config.yaw_range[0])
            pitch = config.pitch_range[0] + float(pose[1]) * (config.pitch_range[1] - config.pitch_range[0])
            try:
                z = torch.randn(config.k_latent, generator=torch.Generator().manual_seed(z_seed))
                cam = _camera_for(config, yaw, pitch)
                mesh = deform(d_src, basis, MorphParams(beta=beta, psi=psi))
                tex = generate_texture(g_src, z)
                source = render(mesh, tex, cam, sigma=config.sigma)
                if config.backend == "mock":
                    styled = mock_stylize(mesh, tex, cam, spec,
                                          template_vertices=template.mesh.vertices,
                                          sigma=config.sigma)
                    styled_mesh = mesh.with_vertices(
                        spec.deform_vertices(mesh, template.mesh.vertices)
                    )
                else:
                    styled = stylizer.stylize(source, None, config.prompt,
                                              t_init=0 if config.disable_init else config.t_init,
                                              seed=z_seed)
                    styled_mesh = mesh
                lmk = provider.landmarks(styled_mesh, cam, sample_id=sid)
            except (LandmarkError, RenderFaultError, ProjectionError) as exc:
                skips.append(f"{sid}\t{type(exc).__name__}: {exc}")
                continue
            src_name = f"{sid}_src.png"
            sty_name = f"{sid}_sty.png"
            save_png(source, out_dir / src_name)
            save_png(styled, out_dir / sty_name)
            lines.append(json.dumps({
                "id": sid,
                "source_png": src_name,
                "stylized_png": sty_name,
                "beta": beta.tolist(),
                "psi": psi.tolist(),
                "theta": [yaw, pitch],
                "z_seed": z_seed,
                "lmk": lmk.tolist(),
                "prompt": config.prompt,
            }, sort_keys=True))
    skip_log.write_text("\n".join(skips) + ("\n" if skips else ""))
    if len(skips) > 0.05 * config.n_pairs:
        raise DataError(
            f"{len(skips)} of {config.n_pairs} samples failed stylization/landmarking; see {skip_log}"
        )
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path


def manifest_hash(manifest_path: str | Path) -> str:
    return hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()


def load_paired_dataset(manifest_path: str | Path, config: RunConfig) -> list[dict]:
    """Manifest records as tensors: images reloaded from disk, the texture
    latent regrown from its recorded seed, the camera rebuilt from theta."""
    manifest_path = Path(manifest_path)
    records = []
    for line in manifest_path.read_text().splitlines():
        if not line.strip():
            continue
        raw = json.loads(line)
        yaw, pitch = raw["theta"]
        records.append({
            "id": raw["id"],
            "source": load_png(manifest_path.parent / raw["source_png"]),
            "image": load_png(manifest_path.parent / raw["stylized_png"]),
            "beta": torch.tensor(raw["beta"], dtype=DEFAULT_DTYPE),
            "psi": torch.tensor(raw["psi"], dtype=DEFAULT_DTYPE),
            "z": torch.randn(config.k_latent,
                             generator=torch.Generator().manual_seed(raw["z_seed"])),
            "z_seed": raw["z_seed"],
            "theta": torch.tensor([yaw, pitch], dtype=DEFAULT_DTYPE),
            "lmk": torch.tensor(raw["lmk"], dtype=DEFAULT_DTYPE),
            "cam": _camera_for(config, yaw, pitch),
            "prompt": raw["prompt"],
            "txt": prompt_embedding(raw["prompt"]),
        })
    if not records:
        raise DataError(f"empty manifest {manifest_path}")
    return records


# ---------------------------------------------------------------------------
# Style models and stage plumbing
# ---------------------------------------------------------------------------


@dataclass
class StyleModels:
    """The frozen source networks and their trainable style counterparts."""

    d_src: DeformNet
    g_src: TextureGenerator
    d_style: DeformNet
    g_style: TextureGenerator
    disc: Discriminator
    joint_done: bool = False


def init_style_models(d_src: DeformNet, g_src: TextureGenerator, config: RunConfig) -> StyleModels:
    return StyleModels(
        d_src=d_src,
        g_src=g_src,
        d_style=clone_deform(d_src),
        g_style=clone_texture(g_src),
        disc=Discriminator(resolution=config.render_size),
    )


def assert_connectivity(mesh, template_mesh):
    if not torch.equal(mesh.faces, template_mesh.faces):
        raise TrainingFaultError("mesh connectivity diverged from the template")


def _steps_for(config: RunConfig, stage: str, n: int) -> int:
    return config.epochs[stage] * math.ceil(n / config.batch_size)


def _source_fields(d_src: DeformNet, basis: MorphBasis, dataset: list[dict]) -> dict:
    """Per-record source-model geometry (vertices, normals, angle cosines)."""
    out = {}
    faces = basis.template.faces
    with torch.no_grad():
        for rec in dataset:
            v = deform(d_src, basis, MorphParams(beta=rec["beta"], psi=rec["psi"])).vertices
            out[rec["id"]] = (v, vertex_normals(v, faces), triangle_angle_cosines(v, faces))
    return out


def _stage_state(step: int, gen: torch.Generator, opts: list[torch.optim.Optimizer]) -> dict:
    return {
        "step": step,
        "gen": gen.get_state(),
        "opt": [o.state_dict() for o in opts],
    }


def _restore_stage_state(state: dict | None, gen: torch.Generator,
                         opts: list[torch.optim.Optimizer]) -> int:
    if state is None:
        return 0
    gen.set_state(state["gen"])
    for opt, blob in zip(opts, state["opt"]):
        opt.load_state_dict(blob)
    return state["step"]


def _check_finite(loss: Tensor, stage: str, step: int):
    if not bool(torch.isfinite(loss)):
        raise TrainingFaultError(f"non-finite {stage} loss", step=step)


# ---------------------------------------------------------------------------
# Stage 1: geometry warm-up
# ---------------------------------------------------------------------------


def stage_warmup(
    models: StyleModels,
    template: FaceTemplate,
    basis: MorphBasis,
    dataset: list[dict],
    config: RunConfig,
    logger: LossLogger | None = None,
    state: dict | None = None,
    stop_after: int | None = None,
) -> tuple[list[float], dict]:
    """Landmark-guided geometry warm-up: optimizes the style deformation
    network against projected landmarks, regularized toward the source model
    and (unless ablated) cross-sample deformation consistency."""
    n = len(dataset)
    total = _steps_for(config, "warmup", n)
    gen = torch.Generator().manual_seed(config.seed + 101)
    opt = torch.optim.Adam(models.d_style.parameters(), lr=config.lr_deform)
    start = _restore_stage_state(state, gen, [opt])
    pre = _source_fields(models.d_src, basis, dataset)
    mesh0 = basis.template
    lmk_idx = torch.as_tensor(template.landmark_vertices, dtype=torch.long)
    steps_per_epoch = math.ceil(n / config.batch_size)
    history = []
    step = start
    for step in range(start, total):
        if stop_after is not None and step >= stop_after:
            break
        idx = torch.randint(n, (config.batch_size,), generator=gen)
        recs = [dataset[int(i)] for i in idx]
        betas = torch.stack([r["beta"] for r in recs])
        psis = torch.stack([r["psi"] for r in recs])
        offsets = models.d_style(mesh0.vertices, betas, psis)
        v = mesh0.vertices + offsets
        kp = v.new_zeros(())
        reg = v.new_zeros(())
        v_pre = []
        for j, rec in enumerate(recs):
            proj = project(rec["cam"], v[j, lmk_idx])
            kp = kp + loss_kp(proj, rec["lmk"])
            vp, np_, cosp = pre[rec["id"]]
            reg = reg + loss_reg(
                v[j], vertex_normals(v[j], mesh0.faces), triangle_angle_cosines(v[j], mesh0.faces),
                vp, np_, cosp,
                config.loss.lam_v, config.loss.lam_n, config.loss.lam_ang,
            )
            v_pre.append(vp)
        kp = kp / len(recs)
        reg = reg / len(recs)
        loss = config.loss.lam_kp * kp + config.loss.reg_weight("warmup") * reg
        terms = {"kp": kp, "reg": reg}
        if not config.disable_cdl:
            cdl = loss_cdl(v, torch.stack(v_pre), mesh0)
            loss = loss + config.loss.cdl_weight("warmup") * cdl
            terms["cdl"] = cdl
        _check_finite(loss, "warmup", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if logger is not None:
            for name, val in terms.items():
                logger.log(step, "warmup", name, float(val.detach()))
        history.append(float(loss.detach()))
        if (step + 1) % steps_per_epoch == 0:
            with torch.no_grad():
                probe = deform(models.d_style, basis,
                               MorphParams(beta=recs[0]["beta"], psi=recs[0]["psi"]))
            assert_connectivity(probe, mesh0)
        step += 1
    return history, _stage_state(step, gen, [opt])


# ---------------------------------------------------------------------------
# Stage 2: joint fine-tuning
# ---------------------------------------------------------------------------


def stage_joint(
    models: StyleModels,
    template: FaceTemplate,
    basis: MorphBasis,
    dataset: list[dict],
    config: RunConfig,
    mask_net,
    logger: LossLogger | None = None,
    state: dict | None = None,
    stop_after: int | None = None,
) -> tuple[list[float], dict]:
    """Joint geometry and texture fine-tuning against the stylized targets.

    The reconstruction loss compares the differentiable render with the
    stylized image inside the segmentation-derived pixel mask; the alignment
    loss compares rendered part coverage with the segmenter's soft masks of
    the target. Both the deformation network and the texture generator are
    optimized.
    """
    from .seg import loss_pixel_mask, seg_class_masks, segment

    n = len(dataset)
    total = _steps_for(config, "joint", n)
    gen = torch.Generator().manual_seed(config.seed + 202)
    opt_d = torch.optim.Adam(models.d_style.parameters(), lr=config.lr_deform)
    opt_g = torch.optim.Adam(models.g_style.parameters(), lr=config.lr_texture)
    start = _restore_stage_state(state, gen, [opt_d, opt_g])
    pre = _source_fields(models.d_src, basis, dataset)
    mesh0 = basis.template
    embedders = default_embedders()
    seg_parts = [c for c in SEG_CLASSES if c != "background"] + ["background"]
    # fixed per-record target segmentation, computed once
    target_masks = {}
    for rec in dataset:
        labels, soft = segment(mask_net, rec["image"])
        target_masks[rec["id"]] = (loss_pixel_mask(labels), seg_class_masks(soft))
    steps_per_epoch = math.ceil(n / config.batch_size)
    history = []
    step = start
    for step in range(start, total):
        if stop_after is not None and step >= stop_after:
            break
        idx = torch.randint(n, (config.batch_size,), generator=gen)
        recs = [dataset[int(i)] for i in idx]
        betas = torch.stack([r["beta"] for r in recs])
        psis = torch.stack([r["psi"] for r in recs])
        offsets = models.d_style(mesh0.vertices, betas, psis)
        v = mesh0.vertices + offsets
        recon = v.new_zeros(())
        seg = v.new_zeros(())
        reg = v.new_zeros(())
        v_pre = []
        for j, rec in enumerate(recs):
            mesh_j = mesh0.with_vertices(v[j])
            tex_j = models.g_style(rec["z"])
            img_r = render(mesh_j, tex_j, rec["cam"], sigma=config.sigma)
            px_mask, masks_s = target_masks[rec["id"]]
            recon = recon + loss_recon(img_r, rec["image"], px_mask, embedders,
                                       iteration=step, config=config.loss)
            masks_r = soft_part_masks(mesh_j, rec["cam"], seg_parts, sigma=config.sigma)
            seg = seg + loss_seg(masks_r, masks_s)
            vp, np_, cosp = pre[rec["id"]]
            reg = reg + loss_reg(
                v[j], vertex_normals(v[j], mesh0.faces), triangle_angle_cosines(v[j], mesh0.faces),
                vp, np_, cosp,
                config.loss.lam_v, config.loss.lam_n, config.loss.lam_ang,
            )
            v_pre.append(vp)
        recon = recon / len(recs)
        seg = seg / len(recs)
        reg = reg / len(recs)
        loss = (config.loss.lam_recon * recon + config.loss.lam_seg * seg
                + config.loss.reg_weight("joint") * reg)
        terms = {"recon": recon, "seg": seg, "reg": reg}
        if not config.disable_cdl:
            cdl = loss_cdl(v, torch.stack(v_pre), mesh0)
            loss = loss + config.loss.cdl_weight("joint") * cdl
            terms["cdl"] = cdl
        _check_finite(loss, "joint", step)
        opt_d.zero_grad()
        opt_g.zero_grad()
        loss.backward()
        opt_d.step()
        opt_g.step()
        if logger is not None:
            for name, val in terms.items():
                logger.log(step, "joint", name, float(val.detach()))
        history.append(float(loss.detach()))
        if (step + 1) % steps_per_epoch == 0:
            with torch.no_grad():
                probe = deform(models.d_style, basis,
                               MorphParams(beta=recs[0]["beta"], psi=recs[0]["psi"]))
            assert_connectivity(probe, mesh0)
        step += 1
    models.joint_done = True
    return history, _stage_state(step, gen, [opt_d, opt_g])


# ---------------------------------------------------------------------------
# Stage 3: texture refinement
# ---------------------------------------------------------------------------


def stage_texture(
    models: StyleModels,
    template: FaceTemplate,
    basis: MorphBasis,
    dataset: list[dict],
    config: RunConfig,
    logger: LossLogger | None = None,
    state: dict | None = None,
    stop_after: int | None = None,
    perceptual: MockPerceptualProvider | None = None,
    override_order: bool = False,
) -> tuple[list[float], dict]:
    """Adversarial texture refinement over frozen geometry.

    Alternates discriminator and generator updates; the geometry network is
    untouched. Refuses to run before the joint stage unless overridden. If the
    discriminator wins outright (loss below 1e-4 for 100 consecutive steps)
    the stage stops early with a warning.
    """
    if not models.joint_done and not override_order:
        raise ParameterError("texture refinement requires a completed joint stage "
                             "(pass override_order=True to force)")
    n = len(dataset)
    total = _steps_for(config, "texture", n)
    gen = torch.Generator().manual_seed(config.seed + 303)
    opt_g = torch.optim.Adam(models.g_style.parameters(), lr=config.lr_texture)
    opt_disc = torch.optim.Adam(models.disc.parameters(), lr=config.lr_disc)
    start = _restore_stage_state(state, gen, [opt_g, opt_disc])
    perceptual = perceptual or MockPerceptualProvider()
    mesh0 = basis.template
    # geometry frozen for the whole stage: precompute every mesh once
    frozen = {}
    with torch.no_grad():
        for rec in dataset:
            frozen[rec["id"]] = deform(models.d_style, basis,
                                       MorphParams(beta=rec["beta"], psi=rec["psi"]))
            assert_connectivity(frozen[rec["id"]], mesh0)
    history = []
    weak_disc_streak = 0
    step = start
    for step in range(start, total):
        if stop_after is not None and step >= stop_after:
            break
        idx = torch.randint(n, (config.batch_size,), generator=gen)
        recs = [dataset[int(i)] for i in idx]
        renders = []
        for rec in recs:
            tex = models.g_style(rec["z"])
            renders.append(render(frozen[rec["id"]], tex, rec["cam"], sigma=config.sigma))
        # discriminator update on detached renders
        d_loss = renders[0].new_zeros(())
        for rec, img_r in zip(recs, renders):
            d, _ = loss_gan(models.disc, img_r.detach(), rec["image"])
            d_loss = d_loss + d
        d_loss = d_loss / len(recs)
        _check_finite(d_loss, "texture", step)
        opt_disc.zero_grad()
        d_loss.backward()
        opt_disc.step()
        # generator update through the live renders
        g_adv = renders[0].new_zeros(())
        lpips = renders[0].new_zeros(())
        for rec, img_r in zip(recs, renders):
            _, gl = loss_gan(models.disc, img_r, rec["image"])
            g_adv = g_adv + gl
            lpips = lpips + loss_lpips(img_r, rec["image"], perceptual)
        g_adv = g_adv / len(recs)
        lpips = lpips / len(recs)
        g_loss = config.loss.lam_lpips * lpips + config.loss.lam_gan * g_adv
        _check_finite(g_loss, "texture", step)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
        if logger is not None:
            logger.log(step, "texture", "d", float(d_loss.detach()))
            logger.log(step, "texture", "lpips", float(lpips.detach()))
            logger.log(step, "texture", "gan", float(g_adv.detach()))
        history.append(float(g_loss.detach()))
        weak_disc_streak = weak_disc_streak + 1 if float(d_loss.detach()) < 1e-4 else 0
        step += 1
        if weak_disc_streak >= 100:
            warnings.warn("discriminator loss collapsed; stopping texture refinement early")
            break
    return history, _stage_state(step, gen, [opt_g, opt_disc])


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, payload: dict):
    """Atomic versioned save: never leaves a partial file behind."""
    path = Path(path)
    payload = dict(payload)
    payload["version"] = CHECKPOINT_VERSION
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> dict:
    try:
        payload = torch.load(Path(path), weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has version {payload.get('version') if isinstance(payload, dict) else '?'}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    return payload


def models_checkpoint(models: StyleModels, stage: str, state: dict | None = None) -> dict:
    return {
        "stage": stage,
        "joint_done": models.joint_done,
        "nets": {
            "d_style": network_checkpoint(models.d_style),
            "g_style": network_checkpoint(models.g_style),
            "disc": network_checkpoint(models.disc),
        },
        "stage_state": state,
    }


def model_space_checkpoint(template: FaceTemplate, basis: MorphBasis) -> dict:
    """Everything needed to rebuild the morphable space without the original
    construction arguments: the template grid plus the basis tensors."""
    return {
        "grid": template.grid,
        "landmark_vertices": list(template.landmark_vertices),
        "shape_basis": basis.shape_basis.clone(),
        "expr_basis": basis.expr_basis.clone(),
    }


def restore_model_space(payload: dict) -> tuple[FaceTemplate, MorphBasis]:
    from .mesh import make_face_template

    template = make_face_template(payload["grid"])
    if list(template.landmark_vertices) != list(payload["landmark_vertices"]):
        raise CheckpointError("checkpoint landmark set does not match the template")
    basis = MorphBasis(template=template.mesh,
                       shape_basis=payload["shape_basis"],
                       expr_basis=payload["expr_basis"])
    return template, basis


def restore_models(models: StyleModels, payload: dict):
    restore_network(models.d_style, payload["nets"]["d_style"])
    restore_network(models.g_style, payload["nets"]["g_style"])
    restore_network(models.disc, payload["nets"]["disc"])
    models.joint_done = payload.get("joint_done", False)


def state_hash(net: torch.nn.Module) -> str:
    """Content hash of a network's parameters and buffers."""
    h = hashlib.sha256()
    for k, v in sorted(net.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def train_pipeline_mask_net(template: FaceTemplate, basis: MorphBasis, config: RunConfig):
    """The segmenter used by the joint stage, trained on a self-annotated
    25-pair corpus at the run's render size."""
    from .seg import build_self_annotated_corpus, train_mask_net

    corpus = build_self_annotated_corpus(template, basis, config.style_spec(), n=25,
                                         size=config.render_size, seed=config.seed + 7000)
    torch.manual_seed(config.seed + 7001)
    net, _ = train_mask_net(corpus, seed=config.seed + 7002)
    return net


def run_pipeline(
    config: RunConfig,
    template: FaceTemplate,
    basis: MorphBasis,
    d_src: DeformNet,
    g_src: TextureGenerator,
    out_dir: str | Path,
    mask_net=None,
    stylizer=None,
) -> dict:
    """Run data generation and the fine-tuning stages end to end.

    Writes the manifest, per-step loss CSV and the final checkpoint into
    out_dir; returns the artifacts plus the trained models. On a training
    fault the last consistent state is checkpointed before the error
    propagates.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(config.to_json())
    manifest = generate_paired_dataset(config, template, basis, d_src, g_src,
                                       out_dir / "data", stylizer=stylizer)
    dataset = load_paired_dataset(manifest, config)
    # the discriminator draws its initial weights from the global RNG
    torch.manual_seed(config.seed + 404)
    models = init_style_models(d_src, g_src, config)
    if mask_net is None:
        mask_net = train_pipeline_mask_net(template, basis, config)
    histories: dict[str, list[float]] = {}
    csv_path = out_dir / "losses.csv"
    with open(csv_path, "w", newline="") as stream:
        logger = LossLogger(stream)
        try:
            if not config.disable_warmup:
                histories["warmup"], _ = stage_warmup(models, template, basis, dataset,
                                                      config, logger)
            histories["joint"], _ = stage_joint(models, template, basis, dataset, config,
                                                mask_net, logger)
            if not config.disable_texture:
                histories["texture"], _ = stage_texture(models, template, basis, dataset,
                                                        config, logger)
        except TrainingFaultError:
            save_checkpoint(out_dir / "fault.pt", models_checkpoint(models, "fault"))
            raise
    final = out_dir / "final.pt"
    save_checkpoint(final, {
        **models_checkpoint(models, "final"),
        "config_json": config.to_json(),
        "manifest_hash": manifest_hash(manifest),
        "model_space": model_space_checkpoint(template, basis),
    })
    return {
        "manifest": manifest,
        "manifest_hash": manifest_hash(manifest),
        "losses_csv": csv_path,
        "checkpoint": final,
        "models": models,
        "mask_net": mask_net,
        "histories": histories,
        "hashes": {
            "d_style": state_hash(models.d_style),
            "g_style": state_hash(models.g_style),
            "disc": state_hash(models.disc),
        },
    }
