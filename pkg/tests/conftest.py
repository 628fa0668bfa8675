from pathlib import Path

import torch
import pytest

from stylemorph.deform import DeformNet, distill_source
from stylemorph.mesh import make_face_template, make_toy_basis
from stylemorph.texture import TextureGenerator, distill_texture
from stylemorph.trainer import procedural_face_texture

torch.set_default_dtype(torch.float64)

_CACHE = Path(__file__).parent / ".cache"


def _cached_net(name: str, build):
    """Train-once cache for distilled networks shared across test sessions."""
    _CACHE.mkdir(exist_ok=True)
    path = _CACHE / f"{name}.pt"
    if path.exists():
        net, state = build(train=False), torch.load(path, weights_only=True)
        try:
            net.load_state_dict(state)
            return net
        except RuntimeError:
            path.unlink()
    net = build(train=True)
    torch.save(net.state_dict(), path)
    return net


@pytest.fixture(scope="session")
def template():
    return make_face_template(16)


@pytest.fixture(scope="session")
def small_template():
    # <= 100 vertices, used by the finite-difference gradient suites
    return make_face_template(8)


@pytest.fixture(scope="session")
def basis(template):
    return make_toy_basis(template, seed=0)


@pytest.fixture(scope="session")
def small_basis(small_template):
    return make_toy_basis(small_template, seed=0)


@pytest.fixture(scope="session")
def desk_mask_net(template, basis):
    """Segmenter trained for the desk preset's style, shared across suites."""
    from stylemorph.seg import MaskNet
    from stylemorph.trainer import desk_run_config, train_pipeline_mask_net

    _CACHE.mkdir(exist_ok=True)
    path = _CACHE / "masknet_desk_v1.pt"
    if path.exists():
        net = MaskNet()
        try:
            net.load_state_dict(torch.load(path, weights_only=True))
            return net
        except RuntimeError:
            path.unlink()
    net = train_pipeline_mask_net(template, basis, desk_run_config())
    torch.save(net.state_dict(), path)
    return net


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, template, basis, d_src, g_src, desk_mask_net):
    """A complete miniature pipeline run shared by the service and CLI suites."""
    from stylemorph.trainer import desk_run_config, run_pipeline

    cfg = desk_run_config(n_pairs=6, batch_size=2,
                          epochs={"warmup": 1, "joint": 1, "texture": 1})
    out = tmp_path_factory.mktemp("tiny_run")
    result = run_pipeline(cfg, template, basis, d_src, g_src, out,
                          mask_net=desk_mask_net)
    return cfg, out, result


@pytest.fixture(scope="session")
def d_src(basis):
    def build(train):
        torch.manual_seed(11)
        net = DeformNet(k_shape=basis.k_shape, k_expr=basis.k_expr)
        if train:
            distill_source(net, basis, seed=0)
        return net

    return _cached_net("d_src_v2", build)


@pytest.fixture(scope="session")
def g_src():
    def build(train):
        torch.manual_seed(12)
        gen = TextureGenerator(k_latent=64, resolution=64)
        if train:
            distill_texture(gen, procedural_face_texture, seed=0)
        return gen

    return _cached_net("g_src_v2", build)
