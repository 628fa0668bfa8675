import io
import math

import pytest
import torch

from stylemorph.errors import FeatureError, ParameterError
from stylemorph.losses import (
    EmbedderSet,
    LossConfig,
    LossLogger,
    MockGlobalEmbedder,
    MockPatchEmbedder,
    MockPerceptualProvider,
    default_embedders,
    loss_cdl,
    loss_gan,
    loss_kp,
    loss_lpips,
    loss_recon,
    loss_reg,
    loss_seg,
)
from stylemorph.mesh import Mesh, triangle_angle_cosines, vertex_normals
from stylemorph.texture import Discriminator


def flat_square():
    # unit square in the xy-plane, normals along +z everywhere
    verts = torch.tensor([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [1.0, 1, 0]])
    faces = torch.tensor([[0, 1, 2], [2, 1, 3]])
    uvs = verts[:, :2].clone()
    return Mesh(verts, faces, uvs)


def rel_fd_error(fn, x0, step=1e-4):
    """Relative error between analytic gradient of fn and central differences."""
    x = x0.clone().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.clone()
    fd = torch.zeros_like(x0)
    flat = fd.reshape(-1)
    x0f = x0.reshape(-1)
    for i in range(x0f.numel()):
        xp, xm = x0f.clone(), x0f.clone()
        xp[i] += step
        xm[i] -= step
        with torch.no_grad():
            flat[i] = (fn(xp.reshape(x0.shape)) - fn(xm.reshape(x0.shape))) / (2 * step)
    return float(torch.linalg.norm(grad - fd) / torch.linalg.norm(fd))


class TestLossConfig:
    def test_stage_addressing(self):
        c = LossConfig()
        assert c.reg_weight("warmup") == 4.0 and c.reg_weight("joint") == 2.0
        assert c.cdl_weight("warmup") == 4000.0 and c.cdl_weight("joint") == 500.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ParameterError):
            LossConfig(lam_kp=-1.0)


class TestLossKp:
    def test_coincident_points_zero(self):
        pts = torch.rand(5, 2, generator=torch.Generator().manual_seed(0))
        assert float(loss_kp(pts, pts)) == 0.0

    def test_three_four_five(self):
        a = torch.tensor([[0.0, 0.0]])
        b = torch.tensor([[3.0, 4.0]])
        assert float(loss_kp(a, b)) == pytest.approx(5.0, abs=1e-12)

    def test_two_unit_offsets_sum(self):
        a = torch.zeros(2, 2)
        b = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        assert float(loss_kp(a, b)) == pytest.approx(2.0, abs=1e-12)

    def test_count_mismatch(self):
        with pytest.raises(ParameterError):
            loss_kp(torch.zeros(3, 2), torch.zeros(4, 2))

    def test_subgradient_zero_at_coincidence(self):
        pts = torch.rand(4, 2, generator=torch.Generator().manual_seed(1))
        x = pts.clone().requires_grad_(True)
        loss_kp(x, pts).backward()
        assert float(x.grad.abs().max()) == 0.0

    def test_gradient_matches_fd_away_from_coincidence(self):
        g = torch.Generator().manual_seed(2)
        tgt = torch.rand(6, 2, generator=g)
        x0 = torch.rand(6, 2, generator=g) + 0.5
        assert rel_fd_error(lambda x: loss_kp(x, tgt), x0) < 1e-4


class _FixedEmbedder:
    def __init__(self, vectors):
        self.vectors = list(vectors)
        self.calls = 0

    def embed(self, image):
        v = self.vectors[self.calls % len(self.vectors)]
        self.calls += 1
        return v


class TestLossRecon:
    def test_identical_images_zero(self):
        g = torch.Generator().manual_seed(3)
        img = torch.rand(8, 8, 3, generator=g)
        mask = torch.ones(8, 8)
        val = loss_recon(img, img.clone(), mask, default_embedders(), iteration=0)
        assert float(val) < 1e-12

    def test_orthogonal_embeddings_contribute_both_weights(self):
        img = torch.rand(4, 4, 3, generator=torch.Generator().manual_seed(4))
        mask = torch.ones(4, 4)
        e1 = torch.tensor([1.0, 0.0])
        e2 = torch.tensor([0.0, 1.0])
        emb = EmbedderSet(
            global_embed=_FixedEmbedder([e1, e2]), patch_embed=_FixedEmbedder([e1, e2])
        )
        val = loss_recon(img, img.clone(), mask, emb, iteration=0)
        assert float(val) == pytest.approx(0.2 * 1 + 0.2 * 1, abs=1e-12)

    def test_hand_computed_oracle(self):
        g = torch.Generator().manual_seed(5)
        a = torch.rand(4, 4, 3, generator=g)
        b = torch.rand(4, 4, 3, generator=g)
        mask = torch.ones(4, 4)
        emb = default_embedders()
        val = float(loss_recon(a, b, mask, emb, iteration=0))

        pixel = math.sqrt(float(((a - b) ** 2).sum()) / 16.0)
        ga, gb = emb.global_embed.embed(a), emb.global_embed.embed(b)
        pa, pb = emb.patch_embed.embed(a), emb.patch_embed.embed(b)
        cos_g = float((ga * gb).sum() / (torch.linalg.norm(ga) * torch.linalg.norm(gb)))
        cos_p = float((pa * pb).sum() / (torch.linalg.norm(pa) * torch.linalg.norm(pb)))
        expected = pixel + 0.2 * (1 - cos_g) + 0.2 * (1 - cos_p)
        assert val == pytest.approx(expected, abs=1e-10)

    def test_patch_term_disabled_after_cutoff(self):
        g = torch.Generator().manual_seed(6)
        a = torch.rand(4, 4, 3, generator=g)
        b = torch.rand(4, 4, 3, generator=g)
        mask = torch.ones(4, 4)
        emb = default_embedders()
        early = float(loss_recon(a, b, mask, emb, iteration=500))
        late = float(loss_recon(a, b, mask, emb, iteration=501))
        pa, pb = emb.patch_embed.embed(a), emb.patch_embed.embed(b)
        cos_p = float((pa * pb).sum())
        assert early - late == pytest.approx(0.2 * (1 - cos_p), abs=1e-10)

    def test_size_mismatch(self):
        with pytest.raises(ParameterError):
            loss_recon(
                torch.zeros(4, 4, 3), torch.zeros(5, 5, 3), torch.ones(4, 4),
                default_embedders(), 0,
            )

    def test_pixel_term_gradient_matches_fd(self):
        g = torch.Generator().manual_seed(7)
        b = torch.rand(4, 4, 3, generator=g)
        a0 = torch.rand(4, 4, 3, generator=g)
        mask = (torch.rand(4, 4, generator=g) > 0.3).to(torch.float64)
        zero = EmbedderSet(
            global_embed=_FixedEmbedder([torch.ones(2)]),
            patch_embed=_FixedEmbedder([torch.ones(2)]),
        )
        err = rel_fd_error(lambda x: loss_recon(x, b, mask, zero, 0), a0)
        assert err < 1e-4


class TestLossSeg:
    def test_identical_masks_zero(self):
        g = torch.Generator().manual_seed(8)
        masks = {c: torch.rand(6, 6, generator=g) for c in ("eyes", "nose", "ears", "background")}
        clone = {c: v.clone() for c, v in masks.items()}
        assert float(loss_seg(masks, clone)) == 0.0

    def test_single_pixel_unit_difference(self):
        zero = {c: torch.zeros(4, 4) for c in ("eyes", "nose", "ears", "background")}
        bump = {c: torch.zeros(4, 4) for c in ("eyes", "nose", "ears", "background")}
        bump["nose"][1, 2] = 1.0
        assert float(loss_seg(zero, bump)) == pytest.approx(1.0, abs=1e-12)

    def test_matches_loop_oracle(self):
        g = torch.Generator().manual_seed(9)
        classes = ("eyes", "nose", "ears", "background")
        a = {c: torch.rand(5, 5, generator=g) for c in classes}
        b = {c: torch.rand(5, 5, generator=g) for c in classes}
        expected = 0.0
        for c in classes:
            s = 0.0
            for i in range(5):
                for j in range(5):
                    s += float((a[c][i, j] - b[c][i, j]) ** 2)
            expected += math.sqrt(s)
        assert float(loss_seg(a, b)) == pytest.approx(expected, abs=1e-10)

    def test_missing_class_raises(self):
        masks = {"eyes": torch.zeros(4, 4)}
        with pytest.raises(ParameterError):
            loss_seg(masks, masks)

    def test_gradient_matches_fd(self):
        g = torch.Generator().manual_seed(10)
        classes = ("eyes", "nose", "ears", "background")
        b = {c: torch.rand(3, 3, generator=g) for c in classes}

        def fn(x):
            a = {c: x + i for i, c in enumerate(classes)}
            return loss_seg(a, b)

        assert rel_fd_error(fn, torch.rand(3, 3, generator=g)) < 1e-4


class TestLossLpips:
    def test_identical_zero(self):
        img = torch.rand(16, 16, 3, generator=torch.Generator().manual_seed(11))
        assert float(loss_lpips(img, img.clone(), MockPerceptualProvider())) == 0.0

    def test_symmetry(self):
        g = torch.Generator().manual_seed(12)
        a, b = torch.rand(16, 16, 3, generator=g), torch.rand(16, 16, 3, generator=g)
        p = MockPerceptualProvider()
        assert float(loss_lpips(a, b, p)) == pytest.approx(float(loss_lpips(b, a, p)), abs=1e-14)

    def test_matches_direct_feature_distance(self):
        g = torch.Generator().manual_seed(13)
        a, b = torch.rand(16, 16, 3, generator=g), torch.rand(16, 16, 3, generator=g)
        p = MockPerceptualProvider()
        expected = float(torch.linalg.norm(p.features(a) - p.features(b)))
        assert float(loss_lpips(a, b, p)) == pytest.approx(expected, abs=1e-10)

    def test_provider_failure_raises_feature_error(self):
        with pytest.raises(FeatureError):
            loss_lpips(torch.zeros(16, 16), torch.zeros(16, 16), MockPerceptualProvider())


class TestLossGan:
    def test_zero_init_discriminator_values(self):
        torch.manual_seed(14)
        d = Discriminator(resolution=16, channels=8)
        g = torch.Generator().manual_seed(15)
        d_loss, g_loss = loss_gan(d, torch.rand(16, 16, 3, generator=g), torch.rand(16, 16, 3, generator=g))
        assert float(d_loss.detach()) == pytest.approx(2 * math.log(2), abs=1e-12)
        assert float(g_loss.detach()) == pytest.approx(math.log(2), abs=1e-12)

    def test_d_loss_monotone_in_style_logit(self):
        class Stub:
            def __init__(self):
                self.logits = iter([])

            def __call__(self, img):
                return next(self.logits)

        vals = []
        for logit_s in (0.0, 1.0, 3.0):
            stub = Stub()
            stub.logits = iter([torch.tensor(logit_s), torch.tensor(-0.5)])
            d_loss, _ = loss_gan(stub, torch.zeros(1), torch.zeros(1))
            vals.append(float(d_loss))
        assert vals[0] > vals[1] > vals[2]

    def test_generator_gradient_matches_fd(self):
        torch.manual_seed(16)
        d = Discriminator(resolution=16, channels=8)
        with torch.no_grad():
            d.head.weight.normal_(0, 0.1)
        g = torch.Generator().manual_seed(17)
        x0 = torch.rand(16, 16, 3, generator=g)
        ref = torch.rand(16, 16, 3, generator=g)

        x = x0.clone().requires_grad_(True)
        loss_gan(d, x, ref)[1].backward()
        grad = x.grad.clone()

        step = 1e-4
        gen = torch.Generator().manual_seed(18)
        # spot check 30 random texels instead of the full image
        idx = torch.randint(0, 16, (30, 2), generator=gen)
        fd = torch.zeros(30, 3)
        with torch.no_grad():
            for r, (i, j) in enumerate(idx):
                for c in range(3):
                    xp, xm = x0.clone(), x0.clone()
                    xp[i, j, c] += step
                    xm[i, j, c] -= step
                    fd[r, c] = (loss_gan(d, xp, ref)[1] - loss_gan(d, xm, ref)[1]) / (2 * step)
        sel = grad[idx[:, 0], idx[:, 1]]
        assert float(torch.linalg.norm(sel - fd) / torch.linalg.norm(fd)) < 1e-3


class TestLossCdl:
    def test_identical_fields_zero(self, small_template):
        g = torch.Generator().manual_seed(19)
        pre = small_template.mesh.vertices.unsqueeze(0).repeat(3, 1, 1)
        disp = torch.randn(*small_template.mesh.vertices.shape, generator=g) * 0.1
        post = pre + disp.unsqueeze(0)
        assert float(loss_cdl(post, pre, small_template.mesh)) == 0.0

    def test_normal_displacements_annihilated(self, small_template):
        m = small_template.mesh
        n = vertex_normals(m.vertices, m.faces)
        g = torch.Generator().manual_seed(20)
        pre = m.vertices.unsqueeze(0).repeat(4, 1, 1)
        scales = torch.randn(4, m.vertices.shape[0], 1, generator=g)
        post = pre + scales * n.unsqueeze(0)
        assert float(loss_cdl(post, pre, m)) < 1e-20

    def test_two_sample_variance_oracle(self):
        m = flat_square()
        pre = m.vertices.unsqueeze(0).repeat(2, 1, 1)
        post = pre.clone()
        post[0, 0] += torch.tensor([1.0, 0.0, 0.0])
        post[1, 0] += torch.tensor([-1.0, 0.0, 0.0])
        # flat square: tangent projection keeps in-plane displacements intact
        disp = post - pre
        var = disp.var(dim=0, unbiased=False)
        assert float(var[0, 0]) == pytest.approx(1.0, abs=1e-12)
        expected = float(var.mean())
        assert float(loss_cdl(post, pre, m)) == pytest.approx(expected, abs=1e-12)

    def test_batch_too_small(self, small_template):
        v = small_template.mesh.vertices.unsqueeze(0)
        with pytest.raises(ParameterError):
            loss_cdl(v, v, small_template.mesh)

    def test_batch_permutation_invariance(self, small_template):
        g = torch.Generator().manual_seed(21)
        m = small_template.mesh
        pre = m.vertices.unsqueeze(0).repeat(4, 1, 1)
        post = pre + torch.randn(4, *m.vertices.shape, generator=g) * 0.1
        a = float(loss_cdl(post, pre, m))
        perm = torch.tensor([2, 0, 3, 1])
        b = float(loss_cdl(post[perm], pre[perm], m))
        assert a == pytest.approx(b, abs=1e-10)

    def test_common_shift_invariance(self, small_template):
        g = torch.Generator().manual_seed(22)
        m = small_template.mesh
        pre = m.vertices.unsqueeze(0).repeat(4, 1, 1)
        post = pre + torch.randn(4, *m.vertices.shape, generator=g) * 0.1
        common = torch.randn(*m.vertices.shape, generator=g) * 0.2
        a = float(loss_cdl(post, pre, m))
        b = float(loss_cdl(post + common.unsqueeze(0), pre, m))
        assert a == pytest.approx(b, abs=1e-10)

    def test_gradient_matches_fd(self, small_template):
        g = torch.Generator().manual_seed(23)
        m = small_template.mesh
        pre = m.vertices.unsqueeze(0).repeat(2, 1, 1)
        x0 = (pre + torch.randn(2, *m.vertices.shape, generator=g) * 0.1)[0]
        other = pre[0] + torch.randn(*m.vertices.shape, generator=g) * 0.1

        def fn(x):
            return loss_cdl(torch.stack([x, other]), pre, m)

        assert rel_fd_error(fn, x0) < 1e-4


class TestLossReg:
    def _terms(self, mesh):
        n = vertex_normals(mesh.vertices, mesh.faces)
        cos = triangle_angle_cosines(mesh.vertices, mesh.faces)
        return mesh.vertices, n, cos

    def test_identical_meshes_zero(self, small_template):
        v, n, c = self._terms(small_template.mesh)
        assert float(loss_reg(v, n, c, v, n, c)) == 0.0

    def test_unit_vertex_offset(self):
        v = torch.zeros(3, 3)
        v2 = v.clone()
        v2[1] += torch.tensor([0.0, 1.0, 0.0])
        zeros = torch.zeros(3, 3)
        cos = torch.zeros(1, 3)
        assert float(loss_reg(v2, zeros, cos, v, zeros, cos, lam_v=1, lam_n=0, lam_ang=0)) == 1.0

    def test_equilateral_vs_right_isoceles_angle_term(self):
        eq = torch.tensor([[0.0, 0, 0], [1.0, 0, 0], [0.5, math.sqrt(3) / 2, 0]])
        ri = torch.tensor([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1.0, 0]])
        faces = torch.tensor([[0, 1, 2]])
        cos_eq = triangle_angle_cosines(eq, faces)
        cos_ri = triangle_angle_cosines(ri, faces)
        val = float(
            loss_reg(ri, torch.zeros(3, 3), cos_ri, eq, torch.zeros(3, 3), cos_eq,
                     lam_v=0, lam_n=0, lam_ang=1)
        )
        expected = 0.25 + 2 * (0.5 - math.sqrt(2) / 2) ** 2
        assert val == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            loss_reg(torch.zeros(3, 3), torch.zeros(3, 3), torch.zeros(1, 3),
                     torch.zeros(4, 3), torch.zeros(3, 3), torch.zeros(1, 3))

    def test_angle_term_rigid_invariance(self, small_template):
        m = small_template.mesh
        g = torch.Generator().manual_seed(24)
        moved = m.vertices + torch.randn(*m.vertices.shape, generator=g) * 0.05
        base = float(loss_reg(
            m.vertices, torch.zeros_like(m.vertices), triangle_angle_cosines(moved, m.faces),
            m.vertices, torch.zeros_like(m.vertices), triangle_angle_cosines(m.vertices, m.faces),
            lam_v=0, lam_n=0, lam_ang=1,
        ))
        # common rigid transform of both meshes
        ang = torch.tensor(0.7)
        rot = torch.tensor([
            [torch.cos(ang), -torch.sin(ang), 0.0],
            [torch.sin(ang), torch.cos(ang), 0.0],
            [0.0, 0.0, 1.0],
        ])
        shift = torch.tensor([0.3, -0.2, 1.1])
        va = moved @ rot.T + shift
        vb = m.vertices @ rot.T + shift
        transformed = float(loss_reg(
            va, torch.zeros_like(va), triangle_angle_cosines(va, m.faces),
            vb, torch.zeros_like(vb), triangle_angle_cosines(vb, m.faces),
            lam_v=0, lam_n=0, lam_ang=1,
        ))
        assert base == pytest.approx(transformed, abs=1e-10)

    def test_gradient_matches_fd(self, small_template):
        m = small_template.mesh
        g = torch.Generator().manual_seed(25)
        x0 = m.vertices + torch.randn(*m.vertices.shape, generator=g) * 0.05

        def fn(x):
            return loss_reg(
                x, vertex_normals(x, m.faces), triangle_angle_cosines(x, m.faces),
                m.vertices, vertex_normals(m.vertices, m.faces),
                triangle_angle_cosines(m.vertices, m.faces),
            )

        assert rel_fd_error(fn, x0) < 1e-4


class TestLossLogger:
    def test_csv_rows(self):
        buf = io.StringIO()
        logger = LossLogger(buf)
        logger.log(0, "warmup", "kp", 1.5)
        logger.log(1, "joint", "recon", 0.25)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == "step,stage,loss,value"
        assert lines[1].startswith("0,warmup,kp,1.5")
        assert lines[2].startswith("1,joint,recon,0.25")
