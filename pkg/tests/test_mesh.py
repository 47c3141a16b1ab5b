import numpy as np
import pytest
from numpy.testing import assert_allclose

from garmfit.mesh import (Mesh, MeshError, boundary_corners,
                          boundary_curvature_cosines, boundary_loops,
                          build_differential_cache, build_edge_topology,
                          build_laplacian_matrix, compute_cotangent_weights,
                          corner_cosine_gradients, corner_cosines,
                          dihedral_angles, face_areas_normals,
                          hinge_angle_gradients, hinge_angles, hinge_stencil,
                          laplacian_coordinates, normalize_laplacians)

from conftest import grid_mesh, quad_mesh, tube_mesh


def fan_disk(n=8):
    """Regular n-gon fan around a center vertex."""
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    ring = np.stack([np.cos(ang), np.sin(ang), np.zeros(n)], axis=1)
    verts = np.vstack([[0.0, 0.0, 0.0], ring])
    faces = np.array([[0, 1 + i, 1 + (i + 1) % n] for i in range(n)])
    return Mesh(verts, faces)


class TestMeshValidation:
    def test_shape_checks(self):
        with pytest.raises(MeshError):
            Mesh(np.zeros((4, 2)), np.zeros((1, 3), dtype=int))
        with pytest.raises(MeshError):
            Mesh(np.zeros((4, 3)), np.array([[0, 1]]))
        with pytest.raises(MeshError):
            Mesh(np.zeros((4, 3)), np.array([[0, 1, 9]]))
        with pytest.raises(MeshError):
            Mesh(np.zeros((4, 3)), np.array([[0, 1, 2]]), uvs=np.zeros((3, 2)))

    def test_empty_faces_reshaped(self):
        m = Mesh(np.zeros((2, 3)), np.zeros((0,), dtype=int))
        assert m.faces.shape == (0, 3)
        assert m.bbox_diagonal() == 0.0

    def test_copy_is_deep(self):
        m = quad_mesh()
        c = m.copy()
        c.vertices[0] = 9.0
        assert m.vertices[0, 0] == 0.0


class TestEdgeTopology:
    def test_quad_counts(self):
        topo = build_edge_topology(quad_mesh().faces, 4)
        assert len(topo.edges) == 5
        assert topo.interior.sum() == 1
        assert topo.nonmanifold == 0
        # the shared diagonal is (0, 2)
        diag = topo.edges[topo.interior][0]
        assert tuple(diag) == (0, 2)

    def test_opposite_vertices_on_diagonal(self):
        topo = build_edge_topology(quad_mesh().faces, 4)
        e = np.flatnonzero(topo.interior)[0]
        assert set(topo.opposite[e]) == {1, 3}

    def test_n_vertices_optional(self):
        a = build_edge_topology(quad_mesh().faces)
        b = build_edge_topology(quad_mesh().faces, 4)
        assert np.array_equal(a.edges, b.edges)

    def test_three_faces_on_an_edge(self):
        faces = np.array([[0, 1, 2], [1, 0, 3], [0, 1, 4]])
        topo = build_edge_topology(faces, 5)
        assert topo.nonmanifold >= 1

    def test_repeated_winding(self):
        faces = np.array([[0, 1, 2], [0, 1, 3]])
        topo = build_edge_topology(faces, 4)
        assert topo.nonmanifold == 1

    def test_degenerate_face_rejected(self):
        with pytest.raises(MeshError, match="repeats a vertex"):
            build_edge_topology(np.array([[0, 0, 1]]), 2)

    def test_empty(self):
        topo = build_edge_topology(np.zeros((0, 3), dtype=int), 0)
        assert len(topo.edges) == 0


class TestBoundaryLoops:
    def test_quad_single_loop(self):
        loops = boundary_loops(quad_mesh().faces, 4)
        assert len(loops) == 1
        assert loops[0][0] == 0
        assert set(loops[0]) == {0, 1, 2, 3}

    def test_tube_two_loops(self):
        m = tube_mesh(10, 6)
        loops = boundary_loops(m.faces, m.n_vertices)
        assert len(loops) == 2
        assert all(len(lp) == 10 for lp in loops)
        assert loops[0][0] < loops[1][0]

    def test_closed_mesh_no_loops(self):
        # tetrahedron
        faces = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [2, 0, 3]])
        assert boundary_loops(faces, 4) == []

    def test_winding_direction(self):
        loops = boundary_loops(np.array([[0, 1, 2]]), 3)
        assert list(loops[0]) == [0, 1, 2]


class TestCotangentWeights:
    def test_equilateral_interior_edge(self):
        # two equilateral triangles share edge (0,1): both opposite angles
        # are 60 degrees, so c = 0.5 * (cot60 + cot60) = 1/sqrt(3)
        h = np.sqrt(3.0) / 2.0
        verts = np.array([[0, 0, 0], [1, 0, 0], [0.5, h, 0], [0.5, -h, 0.0]])
        faces = np.array([[0, 1, 2], [0, 3, 1]])
        m = Mesh(verts, faces)
        topo = build_edge_topology(faces, 4)
        cot = compute_cotangent_weights(m, topo)
        e = np.flatnonzero((topo.edges == [0, 1]).all(axis=1))[0]
        assert_allclose(cot[e], 0.5773502691896258, rtol=1e-12)

    def test_right_angle_is_zero_after_clamp(self):
        # 90-degree opposite corner: cot = 0 exactly
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
        m = Mesh(verts, np.array([[0, 1, 2]]))
        cot = compute_cotangent_weights(m)
        topo = build_edge_topology(m.faces, 3)
        e = np.flatnonzero((topo.edges == [0, 1]).all(axis=1))[0]
        assert cot[e] == pytest.approx(0.5, abs=1e-12)
        hyp = np.flatnonzero((topo.edges == [1, 2]).all(axis=1))[0]
        assert cot[hyp] == 0.0

    def test_obtuse_clamped_nonnegative(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0.5, 0.05, 0.0]])
        m = Mesh(verts, np.array([[0, 1, 2]]))
        assert (compute_cotangent_weights(m) >= 0.0).all()

    def test_degenerate_raises(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]])
        m = Mesh(verts, np.array([[0, 1, 2]]))
        with pytest.raises(MeshError, match="degenerate"):
            compute_cotangent_weights(m)


class TestLaplacian:
    def test_rows_sum_to_zero(self):
        m = grid_mesh()
        topo = build_edge_topology(m.faces, m.n_vertices)
        cot = compute_cotangent_weights(m, topo)
        L = build_laplacian_matrix(m.n_vertices, topo.edges, cot)
        assert_allclose(L @ np.ones(m.n_vertices), 0.0, atol=1e-12)
        # constant fields are in the kernel, so translations vanish
        assert_allclose(L @ (m.vertices + 5.0), L @ m.vertices, atol=1e-12)

    def test_flat_interior_vertex_vanishes(self):
        m = fan_disk(6)
        cache = build_differential_cache(m)
        d = laplacian_coordinates(m.vertices, cache.laplacian)
        assert_allclose(d[0], 0.0, atol=1e-12)

    def test_normalization_unit_norm(self):
        rng = np.random.default_rng(0)
        d = rng.normal(size=(30, 3))
        t = normalize_laplacians(d)
        assert_allclose(np.sum(t * t), 1.0, rtol=1e-12)

    def test_normalize_zero_field_passthrough(self):
        z = np.zeros((4, 3))
        assert_allclose(normalize_laplacians(z), 0.0)


class TestHinges:
    def test_flat_angle_zero(self):
        m = quad_mesh()
        topo = build_edge_topology(m.faces, 4)
        theta, valid = hinge_angles(m.vertices, hinge_stencil(topo))
        assert valid.all()
        assert_allclose(theta, 0.0, atol=1e-14)

    def test_fold_angle_and_sign(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]])
        faces = np.array([[0, 1, 2], [0, 2, 3]])
        for h in (0.3, -0.3):
            v = verts.copy()
            v[3, 2] = h
            theta, valid = hinge_angles(
                v, hinge_stencil(build_edge_topology(faces, 4)))
            assert valid.all()
            # independent check through the face normals
            n0 = np.cross(v[1] - v[0], v[2] - v[0])
            n1 = np.cross(v[2] - v[0], v[3] - v[0])
            expect = np.arccos(np.dot(n0, n1)
                               / (np.linalg.norm(n0) * np.linalg.norm(n1)))
            assert_allclose(abs(theta[0]), expect, rtol=1e-12)
        up, _ = hinge_angles(
            np.vstack([verts[:3], [0, 1, 0.3]]),
            hinge_stencil(build_edge_topology(faces, 4)))
        dn, _ = hinge_angles(
            np.vstack([verts[:3], [0, 1, -0.3]]),
            hinge_stencil(build_edge_topology(faces, 4)))
        assert_allclose(up[0], -dn[0], rtol=1e-12)

    def test_collapsed_hinge_masked(self):
        verts = np.array([[0, 0, 0], [0, 0, 0], [1, 1, 0], [0, 1, 0.0]])
        faces = np.array([[0, 1, 2], [0, 2, 3]])
        topo = build_edge_topology(faces, 4)
        theta, valid = hinge_angles(verts, hinge_stencil(topo))
        assert not valid.all()
        assert np.isfinite(theta).all()

    def test_gradients_match_fd(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0.8, 0.9, 0.2],
                          [0.1, 0.8, -0.4]])
        faces = np.array([[0, 1, 2], [0, 2, 3]])
        hinge = hinge_stencil(build_edge_topology(faces, 4))
        theta0, grads, valid = hinge_angle_gradients(verts, hinge)
        assert valid.all()
        eps = 1e-6
        for slot in range(4):
            v = hinge[0, slot]
            for c in range(3):
                p = verts.copy()
                p[v, c] += eps
                tp, _ = hinge_angles(p, hinge)
                p[v, c] -= 2 * eps
                tm, _ = hinge_angles(p, hinge)
                fd = (tp[0] - tm[0]) / (2 * eps)
                assert_allclose(grads[0, slot, c], fd, rtol=1e-5, atol=1e-8)

    def test_dihedral_rejects_nonmanifold(self):
        faces = np.array([[0, 1, 2], [1, 0, 3], [0, 1, 4]])
        verts = np.array([[0, 0, 0], [1, 0, 0], [0.5, 1, 0], [0.5, -1, 0],
                          [0.5, 0.5, 1.0]])
        with pytest.raises(MeshError, match="non-manifold"):
            dihedral_angles(Mesh(verts, faces))


class TestBoundaryCurvature:
    @pytest.mark.parametrize("n", [5, 8, 12])
    def test_regular_ngon_cosines(self, n):
        cos, corners = boundary_curvature_cosines(fan_disk(n))
        assert len(corners) == n
        assert_allclose(cos, np.cos(2 * np.pi / n), rtol=1e-12)

    def test_corner_gradients_match_fd(self):
        rng = np.random.default_rng(2)
        m = fan_disk(6)
        verts = m.vertices + 0.05 * rng.normal(size=m.vertices.shape)
        loops = boundary_loops(m.faces, m.n_vertices)
        corners = boundary_corners(loops)
        cos0, grads, valid = corner_cosine_gradients(verts, corners)
        assert valid.all()
        eps = 1e-6
        for slot in range(3):
            v = corners[2, slot]
            for c in range(3):
                p = verts.copy()
                p[v, c] += eps
                cp, _ = corner_cosines(p, corners)
                p[v, c] -= 2 * eps
                cm, _ = corner_cosines(p, corners)
                fd = (cp[2] - cm[2]) / (2 * eps)
                assert_allclose(grads[2, slot, c], fd, rtol=1e-5, atol=1e-8)

    def test_short_loops_skipped(self):
        assert len(boundary_corners([np.array([0, 1])])) == 0


class TestDifferentialCache:
    def test_weights_normalized(self):
        m = tube_mesh(10, 6)
        cache = build_differential_cache(m)
        assert_allclose(cache.hinge_weights.sum(), 1.0, rtol=1e-12)
        assert_allclose(cache.corner_weights.sum(), 1.0, rtol=1e-12)
        assert_allclose(np.sum(cache.tilde_laplacians ** 2), 1.0, rtol=1e-12)

    def test_face_areas(self):
        areas, normals = face_areas_normals(quad_mesh().vertices,
                                            quad_mesh().faces)
        assert_allclose(areas, 0.5)
        assert_allclose(normals, [[0, 0, 1], [0, 0, 1]])

    def test_nonmanifold_rejected(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0.5, 1, 0], [0.5, -1, 0],
                          [0.5, 0.5, 1.0]])
        faces = np.array([[0, 1, 2], [1, 0, 3], [0, 1, 4]])
        with pytest.raises(MeshError, match="non-manifold"):
            build_differential_cache(Mesh(verts, faces))
