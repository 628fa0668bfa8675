import pytest
import torch

from stylemorph.deform import (
    DeformNet,
    bounding_box_diagonal,
    clone_for_style,
    deform,
    mean_vertex_error,
)
from stylemorph.errors import ParameterError, TrainingFaultError
from stylemorph.mesh import MorphParams
from stylemorph.trainer import network_checkpoint


def random_params(basis, seed):
    g = torch.Generator().manual_seed(seed)
    return MorphParams(
        beta=torch.randn(basis.k_shape, generator=g),
        psi=torch.randn(basis.k_expr, generator=g),
    )


class TestDeform:
    def test_zero_init_is_identity(self, basis):
        net = DeformNet(k_shape=basis.k_shape, k_expr=basis.k_expr)
        for seed in range(3):
            out = deform(net, basis, random_params(basis, seed))
            assert torch.equal(out.vertices, basis.template.vertices)

    def test_deterministic(self, d_src, basis):
        params = random_params(basis, 5)
        a = deform(d_src, basis, params).vertices
        b = deform(d_src, basis, params).vertices
        assert torch.equal(a, b)

    def test_connectivity_preserved(self, d_src, basis):
        out = deform(d_src, basis, random_params(basis, 7))
        assert torch.equal(out.faces, basis.template.faces)
        assert torch.equal(out.uvs, basis.template.uvs)
        for k in basis.template.part_regions:
            assert torch.equal(out.part_regions[k], basis.template.part_regions[k])

    def test_dimension_mismatch(self, basis):
        net = DeformNet(k_shape=basis.k_shape, k_expr=basis.k_expr)
        bad = MorphParams(beta=torch.zeros(basis.k_shape + 1), psi=torch.zeros(basis.k_expr))
        with pytest.raises(ParameterError):
            deform(net, basis, bad)

    def test_nonfinite_output_faults_with_batch_index(self, basis):
        net = DeformNet(k_shape=basis.k_shape, k_expr=basis.k_expr)
        with torch.no_grad():
            net.head.bias[0] = float("nan")
        with pytest.raises(TrainingFaultError) as ei:
            deform(net, basis, random_params(basis, 0), batch_index=3)
        assert ei.value.batch_index == 3

    def test_distilled_accuracy_on_held_out_params(self, d_src, basis):
        err = mean_vertex_error(d_src, basis)
        assert err < 0.01 * bounding_box_diagonal(basis.template)

    def test_jacobian_matches_finite_differences(self, small_basis):
        torch.manual_seed(21)
        net = DeformNet(k_shape=small_basis.k_shape, k_expr=small_basis.k_expr)
        # non-trivial weights in the head and modulation paths so the
        # Jacobian with respect to the coefficients is not all zeros
        with torch.no_grad():
            net.head.weight.normal_(0, 0.05)
            for f in net.film:
                f.weight.normal_(0, 0.05)
        verts = small_basis.template.vertices
        psi = torch.zeros(small_basis.k_expr)
        beta0 = torch.randn(small_basis.k_shape, generator=torch.Generator().manual_seed(2))

        jac = torch.autograd.functional.jacobian(
            lambda b: net(verts, b, psi), beta0, vectorize=True
        )

        step = 1e-4
        fd = torch.zeros_like(jac)
        for k in range(small_basis.k_shape):
            e = torch.zeros_like(beta0)
            e[k] = step
            with torch.no_grad():
                fd[..., k] = (net(verts, beta0 + e, psi) - net(verts, beta0 - e, psi)) / (2 * step)
        rel = float(torch.linalg.norm(jac - fd) / torch.linalg.norm(fd))
        assert rel < 1e-4

    def test_differentiable_wrt_params(self, d_src, basis):
        beta = torch.randn(basis.k_shape, generator=torch.Generator().manual_seed(3))
        beta.requires_grad_(True)
        psi = torch.zeros(basis.k_expr)
        out = deform(d_src, basis, MorphParams(beta=beta, psi=psi))
        out.vertices.sum().backward()
        assert float(beta.grad.abs().sum()) > 0


class TestCloneForStyle:
    def test_clone_matches_before_update(self, d_src, basis):
        clone = clone_for_style(d_src)
        params = random_params(basis, 9)
        assert torch.equal(deform(clone, basis, params).vertices, deform(d_src, basis, params).vertices)

    def test_perturbing_clone_leaves_source_untouched(self, d_src, basis):
        params = random_params(basis, 10)
        before = deform(d_src, basis, params).vertices.clone()
        clone = clone_for_style(d_src)
        with torch.no_grad():
            for p in clone.parameters():
                p.add_(1.0)
        assert torch.equal(deform(d_src, basis, params).vertices, before)

    def test_checkpoints_field_for_field_equal_at_creation(self, d_src):
        clone = clone_for_style(d_src)
        a, b = network_checkpoint(d_src), network_checkpoint(clone)
        assert a["version"] == b["version"]
        assert a["config"] == b["config"]
        assert a["shapes"] == b["shapes"]
        assert set(a["state"]) == set(b["state"])
        for k in a["state"]:
            assert torch.equal(a["state"][k], b["state"][k])
