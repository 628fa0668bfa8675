import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stylemorph.errors import DegenerateTriangleError, ParameterError
from stylemorph.mesh import (
    EyeSocketSpec,
    Mesh,
    MorphParams,
    insert_eyeballs,
    load_obj,
    make_sphere,
    morph,
    save_obj,
    tangent_project,
    triangle_angle_cosines,
    vertex_normals,
)


def unit_square():
    verts = torch.tensor([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    faces = torch.tensor([[0, 1, 2], [0, 2, 3]])
    uvs = torch.zeros(4, 2)
    return Mesh(verts, faces, uvs)


def octahedron():
    verts = torch.tensor(
        [[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
    )
    faces = torch.tensor(
        [
            [0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
            [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5],
        ]
    )
    return Mesh(verts, faces, torch.zeros(6, 2))


def random_mesh(n=20, seed=3):
    rng = np.random.default_rng(seed)
    verts = torch.tensor(rng.standard_normal((n, 3)))
    faces = []
    for _ in range(2 * n):
        f = rng.choice(n, size=3, replace=False)
        faces.append(f)
    return Mesh(verts, torch.tensor(np.array(faces)), torch.zeros(n, 2))


class TestMorph:
    def test_zero_params_is_template(self, basis):
        p = MorphParams(beta=torch.zeros(10), psi=torch.zeros(10))
        out = morph(basis, p)
        assert torch.equal(out.vertices, basis.template.vertices)
        assert torch.equal(out.faces, basis.template.faces)
        assert torch.equal(out.uvs, basis.template.uvs)

    def test_one_hot_beta(self, basis):
        beta = torch.zeros(10)
        beta[0] = 1.0
        out = morph(basis, MorphParams(beta=beta, psi=torch.zeros(10)))
        expected = basis.template.vertices + basis.shape_basis[:, :, 0]
        assert torch.allclose(out.vertices, expected, atol=0, rtol=0)

    def test_matches_dense_loop_oracle(self, basis):
        rng = np.random.default_rng(7)
        beta = torch.tensor(rng.standard_normal(10))
        psi = torch.tensor(rng.standard_normal(10))
        out = morph(basis, MorphParams(beta=beta, psi=psi))
        # independent loop-based matrix product
        expected = basis.template.vertices.clone().numpy()
        sb = basis.shape_basis.numpy()
        eb = basis.expr_basis.numpy()
        for n in range(expected.shape[0]):
            for c in range(3):
                for k in range(10):
                    expected[n, c] += sb[n, c, k] * float(beta[k])
                    expected[n, c] += eb[n, c, k] * float(psi[k])
        assert np.abs(out.vertices.numpy() - expected).max() < 1e-12

    def test_dimension_mismatch(self, basis):
        with pytest.raises(ParameterError):
            morph(basis, MorphParams(beta=torch.zeros(3), psi=torch.zeros(10)))

    def test_linearity(self, basis):
        rng = np.random.default_rng(11)
        b1 = torch.tensor(rng.standard_normal(10))
        b2 = torch.tensor(rng.standard_normal(10))
        psi = torch.tensor(rng.standard_normal(10))
        t = basis.template.vertices
        lhs = morph(basis, MorphParams(beta=b1 + b2, psi=psi)).vertices - t
        rhs = (morph(basis, MorphParams(beta=b1, psi=psi)).vertices - t) + (
            morph(basis, MorphParams(beta=b2, psi=torch.zeros(10))).vertices - t
        )
        assert torch.allclose(lhs, rhs, atol=1e-10)


class TestVertexNormals:
    def test_planar_square(self):
        m = unit_square()
        n = vertex_normals(m.vertices, m.faces)
        assert torch.allclose(n, torch.tensor([[0.0, 0, 1]]).expand(4, 3), atol=1e-12)

    def test_octahedron_symmetry(self):
        m = octahedron()
        n = vertex_normals(m.vertices, m.faces)
        expected = m.vertices / torch.linalg.norm(m.vertices, dim=1, keepdim=True)
        assert torch.allclose(n, expected, atol=1e-10)

    def test_matches_double_loop_oracle(self):
        m = random_mesh()
        n = vertex_normals(m.vertices, m.faces)
        acc = np.zeros((m.num_vertices, 3))
        v = m.vertices.numpy()
        for f in m.faces.numpy():
            fn = np.cross(v[f[1]] - v[f[0]], v[f[2]] - v[f[0]])
            for vid in f:
                acc[vid] += fn
        for i in range(m.num_vertices):
            nrm = np.linalg.norm(acc[i])
            expected = acc[i] / nrm if nrm > 1e-12 else np.array([0.0, 0, 1])
            assert np.abs(n[i].numpy() - expected).max() < 1e-10

    def test_degenerate_star_default_and_diagnostics(self):
        # vertex 3 is isolated; vertices 0-2 form a zero-area sliver
        verts = torch.tensor([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [5, 5, 5]])
        faces = torch.tensor([[0, 1, 2]])
        diags: list[int] = []
        n = vertex_normals(verts, faces, diagnostics=diags)
        assert torch.allclose(n[3], torch.tensor([0.0, 0, 1]))
        assert 3 in diags and 0 in diags


class TestAngleCosines:
    def test_equilateral(self):
        verts = torch.tensor([[0.0, 0, 0], [1, 0, 0], [0.5, math.sqrt(3) / 2, 0]])
        cos = triangle_angle_cosines(verts, torch.tensor([[0, 1, 2]]))
        assert torch.allclose(cos, torch.full((1, 3), 0.5), atol=1e-12)

    def test_right_isoceles(self):
        verts = torch.tensor([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
        cos = triangle_angle_cosines(verts, torch.tensor([[0, 1, 2]]))
        expected = torch.tensor([[0.0, math.sqrt(2) / 2, math.sqrt(2) / 2]])
        assert torch.allclose(cos, expected, atol=1e-12)

    def test_law_of_cosines_oracle(self):
        rng = np.random.default_rng(5)
        verts = torch.tensor(rng.standard_normal((3, 3)))
        cos = triangle_angle_cosines(verts, torch.tensor([[0, 1, 2]]))[0].numpy()
        v = verts.numpy()
        a = np.linalg.norm(v[1] - v[2])  # opposite corner 0
        b = np.linalg.norm(v[0] - v[2])
        c = np.linalg.norm(v[0] - v[1])
        expected = [
            (b * b + c * c - a * a) / (2 * b * c),
            (a * a + c * c - b * b) / (2 * a * c),
            (a * a + b * b - c * c) / (2 * a * b),
        ]
        assert np.abs(cos - np.array(expected)).max() < 1e-12

    def test_zero_edge_raises_with_face_index(self):
        verts = torch.tensor([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0]])
        faces = torch.tensor([[0, 1, 2], [1, 2, 3]])
        with pytest.raises(DegenerateTriangleError) as ei:
            triangle_angle_cosines(verts, faces)
        assert ei.value.face_index == 1

    @settings(max_examples=20, deadline=None)
    @given(
        yaw=st.floats(-3.0, 3.0),
        scale=st.floats(0.1, 10.0),
        tx=st.floats(-5.0, 5.0),
    )
    def test_rigid_and_scale_invariance(self, yaw, scale, tx):
        m = octahedron()
        base = triangle_angle_cosines(m.vertices, m.faces)
        c, s = math.cos(yaw), math.sin(yaw)
        rot = torch.tensor([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        moved = scale * (m.vertices @ rot.T) + torch.tensor([tx, 0.0, 0.0])
        assert torch.allclose(triangle_angle_cosines(moved, m.faces), base, atol=1e-10)


class TestTangentProject:
    def test_normal_displacement_annihilated(self):
        m = octahedron()
        n = vertex_normals(m.vertices, m.faces)
        out = tangent_project(m, n * 2.5)
        assert torch.allclose(out, torch.zeros_like(out), atol=1e-12)

    def test_tangent_displacement_unchanged(self):
        m = unit_square()
        d = torch.tensor([[0.3, -0.7, 0.0]]).expand(4, 3)
        assert torch.allclose(tangent_project(m, d), d, atol=1e-12)

    def test_gram_schmidt_oracle(self):
        m = octahedron()
        rng = np.random.default_rng(9)
        d = torch.tensor(rng.standard_normal((6, 3)))
        out = tangent_project(m, d)
        n = vertex_normals(m.vertices, m.faces).numpy()
        dn = d.numpy()
        for i in range(6):
            expected = dn[i] - np.dot(dn[i], n[i]) * n[i]
            assert np.abs(out[i].numpy() - expected).max() < 1e-12

    def test_idempotent_and_orthogonal(self, template):
        m = template.mesh
        rng = np.random.default_rng(1)
        d = torch.tensor(rng.standard_normal((m.num_vertices, 3)))
        p1 = tangent_project(m, d)
        p2 = tangent_project(m, p1)
        assert torch.allclose(p1, p2, atol=1e-10)
        n = vertex_normals(m.vertices, m.faces)
        assert float((p1 * n).sum(dim=1).abs().max()) < 1e-10


class TestInsertEyeballs:
    def socket_mesh(self):
        # center vertex 0 surrounded by eyelid ring at exact distance 1
        ring = [[math.cos(a), math.sin(a), 0.0] for a in np.linspace(0, 2 * np.pi, 6, endpoint=False)]
        verts = torch.tensor([[0.0, 0, 0]] + ring)
        faces = torch.tensor([[0, 1 + i, 1 + (i + 1) % 6] for i in range(6)])
        return Mesh(verts, faces, torch.zeros(7, 2), part_regions={"face": torch.arange(6)})

    def test_unit_distance_radius(self):
        m = self.socket_mesh()
        spec = EyeSocketSpec(centers=[0], eyelids=[[1, 2, 3, 4, 5, 6]], kappa=1.0)
        out = insert_eyeballs(m, spec)
        eye_verts = out.vertices[m.num_vertices :]
        radii = torch.linalg.norm(eye_verts - m.vertices[0], dim=1)
        assert torch.allclose(radii, torch.ones_like(radii), atol=1e-10)

    def test_vertex_count_conservation(self, template):
        m = template.mesh
        sphere = make_sphere()
        out = insert_eyeballs(m, template.sockets, eyeball_template=sphere)
        assert out.num_vertices == m.num_vertices + 2 * sphere.num_vertices
        assert out.num_faces == m.num_faces + 2 * sphere.num_faces
        assert "eyeball" in out.part_regions

    def test_mixed_distance_mean_oracle(self):
        verts = torch.tensor([[0.0, 0, 0], [0.8, 0, 0], [0, 1.0, 0], [0, 0, 1.2]])
        faces = torch.tensor([[0, 1, 2], [0, 2, 3]])
        m = Mesh(verts, faces, torch.zeros(4, 2))
        kappa = 0.7
        spec = EyeSocketSpec(centers=[0], eyelids=[[1, 2, 3]], kappa=kappa)
        out = insert_eyeballs(m, spec)
        eye_verts = out.vertices[4:]
        radius = float(torch.linalg.norm(eye_verts - verts[0], dim=1).max())
        assert abs(radius - kappa * 1.0) < 1e-10

    def test_original_geometry_bit_exact(self, template):
        m = template.mesh
        out = insert_eyeballs(m, template.sockets)
        assert torch.equal(out.vertices[: m.num_vertices], m.vertices)
        assert torch.equal(out.faces[: m.num_faces], m.faces)

    def test_invalid_indices(self, template):
        with pytest.raises(ParameterError):
            insert_eyeballs(template.mesh, EyeSocketSpec(centers=[99999], eyelids=[[0]]))
        with pytest.raises(ParameterError):
            insert_eyeballs(template.mesh, EyeSocketSpec(centers=[0], eyelids=[[]]))


class TestObjIO:
    def test_roundtrip(self, template, tmp_path):
        path = tmp_path / "face.obj"
        save_obj(template.mesh, path)
        loaded = load_obj(path)
        assert torch.allclose(loaded.vertices, template.mesh.vertices, atol=1e-9)
        assert torch.equal(loaded.faces, template.mesh.faces)
        assert torch.allclose(loaded.uvs, template.mesh.uvs, atol=1e-9)
        assert set(loaded.part_regions) == set(template.mesh.part_regions)
        for k in loaded.part_regions:
            assert torch.equal(loaded.part_regions[k], template.mesh.part_regions[k])


class TestTemplateInvariants:
    def test_validates(self, template):
        template.mesh.validate()

    def test_part_regions_disjoint(self, template):
        all_ids = [int(i) for v in template.mesh.part_regions.values() for i in v]
        assert len(all_ids) == len(set(all_ids))

    def test_landmarks_in_expected_regions(self, template):
        m = template.mesh
        lmk = template.landmark_vertices
        assert len(lmk) == 5
        # nose tip is the most protruding vertex (smallest z)
        assert int(m.vertices[:, 2].argmin()) == lmk[2]
