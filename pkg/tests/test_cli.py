import json
from pathlib import Path

import pytest
import torch
from click.testing import CliRunner

from stylemorph.cli import main
from stylemorph.evalkit import EvalReport
from stylemorph.trainer import (
    model_space_checkpoint,
    network_checkpoint,
    save_checkpoint,
)

_CACHE = Path(__file__).parent / ".cache"


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


@pytest.fixture(scope="module")
def source_checkpoint(tmp_path_factory, template, basis, d_src, g_src, tiny_run):
    """Source-stage checkpoint assembled from the cached distilled networks."""
    cfg, _, _ = tiny_run
    path = tmp_path_factory.mktemp("src") / "src.pt"
    save_checkpoint(path, {
        "stage": "source",
        "model_space": model_space_checkpoint(template, basis),
        "config_json": cfg.to_json(),
        "nets": {
            "d_src": network_checkpoint(d_src),
            "g_src": network_checkpoint(g_src),
        },
    })
    return path


@pytest.fixture(scope="module")
def tiny_config_file(tmp_path_factory, tiny_run):
    cfg, _, _ = tiny_run
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(cfg.to_json())
    return path


class TestDispatch:
    def test_unknown_subcommand_exits_2(self):
        result = invoke("trainify")
        assert result.exit_code == 2

    def test_unknown_flag_exits_2(self):
        result = invoke("sample", "--frobnicate", "1")
        assert result.exit_code == 2

    def test_corrupt_checkpoint_machine_parsable_error(self, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"garbage")
        result = invoke("sample", "--checkpoint", bad, "--out", tmp_path / "out")
        assert result.exit_code == 1
        line = result.stderr.strip().splitlines()[-1]
        kind, name, _ = line.split("\t", 2)
        assert (kind, name) == ("error", "CheckpointError")


class TestSampleCommand:
    def test_twice_is_byte_identical(self, tiny_run, tmp_path):
        _, _, result = tiny_run
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            run = invoke("sample", "--checkpoint", result["checkpoint"],
                         "--seed", 7, "--out", out)
            assert run.exit_code == 0, run.output
            outs.append(out)
        for fname in ("mesh.obj", "texture.png", "render.png", "params.json"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()

    def test_seed_changes_output(self, tiny_run, tmp_path):
        _, _, result = tiny_run
        for seed, name in ((7, "a"), (8, "b")):
            run = invoke("sample", "--checkpoint", result["checkpoint"],
                         "--seed", seed, "--out", tmp_path / name)
            assert run.exit_code == 0, run.output
        assert ((tmp_path / "a" / "mesh.obj").read_bytes()
                != (tmp_path / "b" / "mesh.obj").read_bytes())


class TestEvalCommand:
    def test_emits_report_with_config_hash(self, tiny_run, tmp_path):
        cfg, _, result = tiny_run
        run = invoke("eval", "--checkpoint", result["checkpoint"], "--n", 10,
                     "--seed", 0, "--out", tmp_path)
        assert run.exit_code == 0, run.output
        report = EvalReport.from_json(run.stdout.strip().splitlines()[-1])
        assert report.config_hash == cfg.hash()
        assert report.n_samples == 10
        assert report.face_diversity > 0
        assert report.style_score is not None
        on_disk = EvalReport.from_json((tmp_path / "eval.json").read_text())
        assert on_disk == report

    def test_no_embedder_reports_unavailable(self, tiny_run, tmp_path):
        _, _, result = tiny_run
        run = invoke("eval", "--checkpoint", result["checkpoint"], "--n", 4,
                     "--out", tmp_path, "--no-embedder")
        assert run.exit_code == 0, run.output
        assert json.loads(run.stdout.strip().splitlines()[-1])["style_score"] == "unavailable"


class TestExportCommand:
    def test_exports_mean_face_and_info(self, tiny_run, tmp_path):
        _, _, result = tiny_run
        run = invoke("export", "--checkpoint", result["checkpoint"], "--out", tmp_path)
        assert run.exit_code == 0, run.output
        for fname in ("mesh.obj", "texture.png", "render.png", "model_info.json"):
            assert (tmp_path / fname).exists()
        info = json.loads((tmp_path / "model_info.json").read_text())
        params = json.loads((tmp_path / "params.json").read_text())
        assert params["beta"] == [0.0] * info["k_beta"]


class TestStageChain:
    def test_full_chain_produces_final_checkpoint(self, source_checkpoint,
                                                  tiny_config_file, tmp_path):
        data = tmp_path / "run"
        manifest = data / "data" / "manifest.jsonl"
        steps = [
            ("gen-data", ["--config", tiny_config_file, "--checkpoint", source_checkpoint,
                          "--out", data / "data"]),
            ("warmup", ["--config", tiny_config_file, "--checkpoint", source_checkpoint,
                        "--data", manifest, "--out", data / "warmup.pt"]),
            ("joint", ["--config", tiny_config_file, "--checkpoint", data / "warmup.pt",
                       "--data", manifest, "--out", data / "joint.pt",
                       "--mask-net", _CACHE / "masknet_desk_v1.pt"]),
            ("refine", ["--config", tiny_config_file, "--checkpoint", data / "joint.pt",
                        "--data", manifest, "--out", data / "final.pt"]),
        ]
        for name, args in steps:
            run = invoke(name, *args)
            assert run.exit_code == 0, f"{name}: {run.output}\n{run.stderr}"
        assert (data / "warmup.losses.csv").exists()
        assert (data / "final.pt").exists()

        run = invoke("sample", "--checkpoint", data / "final.pt", "--seed", 3,
                     "--out", data / "sample")
        assert run.exit_code == 0, run.output
        assert (data / "sample" / "render.png").exists()

    def test_refine_before_joint_fails_cleanly(self, source_checkpoint,
                                               tiny_config_file, tmp_path):
        data = tmp_path / "data"
        run = invoke("gen-data", "--config", tiny_config_file,
                     "--checkpoint", source_checkpoint, "--out", data)
        assert run.exit_code == 0, run.output
        run = invoke("refine", "--config", tiny_config_file,
                     "--checkpoint", source_checkpoint,
                     "--data", data / "manifest.jsonl", "--out", tmp_path / "f.pt")
        assert run.exit_code == 1
        assert "error\tParameterError" in run.stderr

    def test_external_backend_rejected(self, source_checkpoint, tiny_config_file,
                                       tmp_path):
        run = invoke("gen-data", "--config", tiny_config_file,
                     "--checkpoint", source_checkpoint, "--out", tmp_path / "d",
                     "--backend", "external")
        assert run.exit_code == 1
        assert "error\tParameterError" in run.stderr


class TestTrainEam:
    def test_trains_on_generated_data(self, source_checkpoint, tiny_config_file,
                                      tmp_path):
        data = tmp_path / "data"
        run = invoke("gen-data", "--config", tiny_config_file,
                     "--checkpoint", source_checkpoint, "--out", data)
        assert run.exit_code == 0, run.output
        run = invoke("train-eam", "--config", tiny_config_file,
                     "--data", data / "manifest.jsonl",
                     "--out", tmp_path / "eam.pt", "--steps", 5)
        assert run.exit_code == 0, f"{run.output}\n{run.stderr}"
        blob = torch.load(tmp_path / "eam.pt", weights_only=False)
        assert len(blob["history"]) == 5
        assert "eam" in blob and "denoiser" in blob


class TestDistill:
    def test_smoke_writes_source_checkpoint(self, tmp_path):
        run = invoke("distill-src", "--out", tmp_path / "src.pt", "--grid", 8,
                     "--deform-steps", 3, "--texture-steps", 3)
        assert run.exit_code == 0, f"{run.output}\n{run.stderr}"
        from stylemorph.trainer import load_checkpoint

        payload = load_checkpoint(tmp_path / "src.pt")
        assert set(payload["nets"]) == {"d_src", "g_src"}
        assert payload["model_space"]["grid"] == 8
