"""Command-line entry points for the full pipeline.

Every subcommand runs offline with the mock stylizer backend. Stage commands
chain through self-contained checkpoints: distill-src produces the source
networks, gen-data renders the paired dataset, warmup/joint/refine fine-tune
the style networks, and sample/eval/export/serve consume the result.
"""
from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

import click
import torch

from .errors import (
    CheckpointError,
    DataError,
    FeatureError,
    LandmarkError,
    ParameterError,
    RenderFaultError,
    TrainingFaultError,
)

_FAILURES = (ParameterError, DataError, CheckpointError, RenderFaultError,
             TrainingFaultError, LandmarkError, FeatureError, FileNotFoundError)


def _fail_cleanly(fn):
    """One-line machine-parsable error on stderr, nonzero exit."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _FAILURES as exc:
            click.echo(f"error\t{type(exc).__name__}\t{exc}", err=True)
            sys.exit(1)

    return wrapper


def _load_config(config_path: str | None, seed: int | None):
    from .trainer import RunConfig, desk_run_config

    if config_path is None:
        cfg = desk_run_config()
    else:
        cfg = RunConfig.from_json(Path(config_path).read_text())
    if seed is not None:
        cfg = RunConfig.from_json(cfg.to_json())
        cfg.seed = seed
    return cfg


def _load_source(checkpoint: str):
    from .deform import DeformNet
    from .texture import TextureGenerator
    from .trainer import load_checkpoint, restore_model_space, restore_network

    payload = load_checkpoint(checkpoint)
    template, basis = restore_model_space(payload["model_space"])
    d_src = DeformNet(**payload["nets"]["d_src"]["config"])
    restore_network(d_src, payload["nets"]["d_src"])
    g_cfg = payload["nets"]["g_src"]["config"]
    g_src = TextureGenerator(k_latent=g_cfg["k_latent"], resolution=g_cfg["resolution"],
                             w_dim=g_cfg["w_dim"])
    restore_network(g_src, payload["nets"]["g_src"])
    return payload, template, basis, d_src, g_src


def _load_stage(checkpoint: str, config):
    """Rebuild StyleModels (sources + style nets) from a stage checkpoint."""
    from .trainer import init_style_models, load_checkpoint, restore_models

    payload, template, basis, d_src, g_src = _load_source(checkpoint)
    torch.manual_seed(config.seed + 404)
    models = init_style_models(d_src, g_src, config)
    if "d_style" in payload["nets"]:
        restore_models(models, payload)
    return payload, template, basis, models


def _save_stage(path: str, template, basis, models, config, stage: str,
                extra: dict | None = None):
    from .trainer import (
        model_space_checkpoint,
        models_checkpoint,
        network_checkpoint,
        save_checkpoint,
    )

    payload = models_checkpoint(models, stage)
    payload["nets"]["d_src"] = network_checkpoint(models.d_src)
    payload["nets"]["g_src"] = network_checkpoint(models.g_src)
    payload["model_space"] = model_space_checkpoint(template, basis)
    payload["config_json"] = config.to_json()
    payload.update(extra or {})
    save_checkpoint(path, payload)


def _run_stage(stage: str, config_path, seed, checkpoint, data, out, mask_net_path=None):
    from .losses import LossLogger
    from .trainer import (
        load_paired_dataset,
        stage_joint,
        stage_texture,
        stage_warmup,
        train_pipeline_mask_net,
    )

    config = _load_config(config_path, seed)
    _, template, basis, models = _load_stage(checkpoint, config)
    dataset = load_paired_dataset(data, config)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out.with_suffix(".losses.csv")
    with open(csv_path, "w", newline="") as stream:
        logger = LossLogger(stream)
        if stage == "warmup":
            stage_warmup(models, template, basis, dataset, config, logger)
        elif stage == "joint":
            from .seg import MaskNet

            if mask_net_path:
                net = MaskNet()
                net.load_state_dict(torch.load(mask_net_path, weights_only=True))
            else:
                net = train_pipeline_mask_net(template, basis, config)
                torch.save(net.state_dict(), out.with_suffix(".masknet.pt"))
            stage_joint(models, template, basis, dataset, config, net, logger)
        else:
            stage_texture(models, template, basis, dataset, config, logger)
    _save_stage(str(out), template, basis, models, config, stage)
    click.echo(f"{stage} complete: {out}")


@click.group()
def main():
    """Stylized morphable face model pipeline."""
    # all numerics run in double precision; the library assumes it
    torch.set_default_dtype(torch.float64)


@main.command("distill-src")
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--grid", type=int, default=16, show_default=True)
@click.option("--k-shape", type=int, default=10, show_default=True)
@click.option("--k-expr", type=int, default=10, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--deform-steps", type=int, default=2000, show_default=True)
@click.option("--texture-steps", type=int, default=800, show_default=True)
@_fail_cleanly
def distill_src(out, seed, grid, k_shape, k_expr, config_path, deform_steps,
                texture_steps):
    """Distill the linear morph basis and the procedural texture family into
    the source networks."""
    from .deform import DeformNet, distill_source
    from .mesh import make_face_template, make_toy_basis
    from .texture import TextureGenerator, distill_texture
    from .trainer import (
        model_space_checkpoint,
        network_checkpoint,
        procedural_face_texture,
        save_checkpoint,
    )

    config = _load_config(config_path, seed)
    template = make_face_template(grid)
    basis = make_toy_basis(template, k_shape=k_shape, k_expr=k_expr, seed=seed)
    torch.manual_seed(seed + 11)
    d_src = DeformNet(k_shape=k_shape, k_expr=k_expr)
    distill_source(d_src, basis, steps=deform_steps, seed=seed)
    torch.manual_seed(seed + 12)
    g_src = TextureGenerator(k_latent=config.k_latent,
                             resolution=config.texture_resolution)
    distill_texture(g_src, procedural_face_texture, steps=texture_steps, seed=seed)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, {
        "stage": "source",
        "model_space": model_space_checkpoint(template, basis),
        "config_json": config.to_json(),
        "nets": {
            "d_src": network_checkpoint(d_src),
            "g_src": network_checkpoint(g_src),
        },
    })
    click.echo(f"source networks written: {out}")


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--backend", type=click.Choice(["mock", "toy", "external"]), default=None)
@_fail_cleanly
def gen_data(config_path, seed, checkpoint, out, backend):
    """Render the paired source/stylized dataset and its manifest."""
    from .trainer import generate_paired_dataset

    config = _load_config(config_path, seed)
    if backend == "external":
        raise ParameterError("the external stylizer backend is not bundled; "
                             "use mock or toy")
    if backend is not None and backend != config.backend:
        from .trainer import RunConfig

        config = RunConfig.from_json(config.to_json())
        config.backend = backend
        config.__post_init__()
    if config.backend == "toy":
        raise ParameterError("toy backend data generation needs a trained "
                             "stylizer; run with the mock backend")
    _, template, basis, d_src, g_src = _load_source(checkpoint)
    manifest = generate_paired_dataset(config, template, basis, d_src, g_src, out)
    click.echo(f"manifest written: {manifest}")


@main.command("train-eam")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--data", required=True, type=click.Path(exists=True),
              help="Path to a paired-dataset manifest.")
@click.option("--out", required=True, type=click.Path())
@click.option("--steps", type=int, default=500, show_default=True)
@_fail_cleanly
def train_eam_cmd(config_path, seed, data, out, steps):
    """Train the expression-aware conditioning module on a paired dataset."""
    from .stylize import StylizerBackend, ToyDenoiser, train_eam
    from .trainer import load_paired_dataset, save_checkpoint

    config = _load_config(config_path, seed)
    dataset = load_paired_dataset(data, config)
    records = [{
        "image": rec["image"],
        "txt": rec["txt"],
        "lmk": rec["lmk"],
        "theta": rec["theta"],
        "psi": rec["psi"],
    } for rec in dataset]
    torch.manual_seed(config.seed + 50)
    backend = StylizerBackend(ToyDenoiser())
    _, history = train_eam(backend, records, steps=steps, seed=config.seed)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, {
        "stage": "eam",
        "denoiser": backend.denoiser.state_dict(),
        "eam": backend.eam.state_dict(),
        "history": history,
        "config_json": config.to_json(),
    })
    click.echo(f"eam written: {out} (final loss {history[-1]:.6f})")


@main.command("warmup")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_fail_cleanly
def warmup(config_path, seed, checkpoint, data, out):
    """Landmark-guided geometry warm-up from a source checkpoint."""
    _run_stage("warmup", config_path, seed, checkpoint, data, out)


@main.command("joint")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--mask-net", "mask_net_path", type=click.Path(exists=True), default=None,
              help="Reuse a trained segmenter instead of training one.")
@_fail_cleanly
def joint(config_path, seed, checkpoint, data, out, mask_net_path):
    """Joint geometry and texture fine-tuning from a warm-up checkpoint."""
    _run_stage("joint", config_path, seed, checkpoint, data, out,
               mask_net_path=mask_net_path)


@main.command("refine")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_fail_cleanly
def refine(config_path, seed, checkpoint, data, out):
    """Adversarial texture refinement from a joint checkpoint."""
    _run_stage("texture", config_path, seed, checkpoint, data, out)


@main.command("sample")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--beta", default=None, help="Comma-separated shape coefficients.")
@click.option("--psi", default=None, help="Comma-separated expression coefficients.")
@click.option("--yaw", type=float, default=0.0, show_default=True)
@click.option("--pitch", type=float, default=0.0, show_default=True)
@_fail_cleanly
def sample(checkpoint, seed, out, beta, psi, yaw, pitch):
    """Draw one sample and write mesh.obj, texture.png, render.png."""
    from .service import ModelBundle

    bundle = ModelBundle(checkpoint)
    g = torch.Generator().manual_seed(seed)
    beta_v = ([float(x) for x in beta.split(",")] if beta is not None
              else torch.randn(bundle.basis.k_shape, generator=g).tolist())
    psi_v = ([float(x) for x in psi.split(",")] if psi is not None
             else torch.randn(bundle.basis.k_expr, generator=g).tolist())
    written = bundle.export_sample(out, beta=beta_v, psi=psi_v, z_seed=seed,
                                   yaw=yaw, pitch=pitch)
    for path in written:
        click.echo(str(path))


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--n", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--no-embedder", is_flag=True, default=False,
              help="Report the style score as unavailable.")
@_fail_cleanly
def eval_cmd(checkpoint, n, seed, out, no_embedder):
    """Sample the style model and write an evaluation report."""
    from .evalkit import (
        EvalReport,
        MockJointEmbedder,
        face_diversity,
        sample_style_meshes,
        style_score,
        write_report,
    )
    from .render import render
    from .service import ModelBundle
    from .texture import generate_texture
    from .trainer import _camera_for

    bundle = ModelBundle(checkpoint)
    meshes = sample_style_meshes(bundle.d_style, bundle.basis, n, seed=seed)
    diversity = face_diversity(meshes)
    score = None
    if not no_embedder:
        cam = _camera_for(bundle.config, 0.0, 0.0)
        images = []
        with torch.no_grad():
            for i, mesh in enumerate(meshes[: min(n, 16)]):
                z = torch.randn(bundle.config.k_latent,
                                generator=torch.Generator().manual_seed(seed + i))
                tex = generate_texture(bundle.g_style, z)
                images.append(render(mesh, tex, cam, sigma=bundle.config.sigma))
        score = style_score(images, bundle.config.prompt, MockJointEmbedder())
    report = EvalReport(style=bundle.config.prompt, face_diversity=diversity,
                        style_score=score, n_samples=n, seed=seed,
                        config_hash=bundle.config.hash())
    Path(out).mkdir(parents=True, exist_ok=True)
    path = write_report(report, out)
    click.echo(report.to_json())
    click.echo(f"report written: {path}", err=True)


@main.command("export")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_fail_cleanly
def export(checkpoint, out):
    """Export the mean stylized face (OBJ + PNGs) and the model metadata."""
    from .service import ModelBundle

    bundle = ModelBundle(checkpoint)
    written = bundle.export_sample(out)
    info_path = Path(out) / "model_info.json"
    info_path.write_text(json.dumps(bundle.info(), sort_keys=True))
    for path in [*written, info_path]:
        click.echo(str(path))


@main.command("serve")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=None,
              help="Defaults to $STYLEMORPH_PORT or 8750.")
@_fail_cleanly
def serve(checkpoint, host, port):
    """Serve /model/info and /sample over HTTP for the viewer."""
    import uvicorn

    from .service import create_app

    if port is None:
        port = int(os.environ.get("STYLEMORPH_PORT", "8750"))
    app = create_app(checkpoint)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
