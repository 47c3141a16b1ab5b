import numpy as np
import pytest
from numpy.testing import assert_allclose

from garmfit.config import LossWeights
from garmfit.contact import ContactPairs, FitRegion
from garmfit.losses import (ConnectPairs, LossReport, Objective, bending_term,
                            boundary_term, connect_term, laplacian_term,
                            residual_penalties, separation_term,
                            tightness_term)
from garmfit.mesh import build_differential_cache

from conftest import grid_mesh, tube_mesh


def one_pair(d, normal=(0.0, 0.0, 1.0)):
    """A single contact pair at signed distance d for a vertex at origin+d*n."""
    n = np.asarray(normal, dtype=float)
    pos = (d * n)[None, :]
    return ContactPairs(vertex=np.array([0]), face=np.array([0]),
                        point=np.zeros((1, 3)), normal=n[None, :],
                        area_weight=np.array([1.0]),
                        source_distance=np.array([0.0])), pos


def fd_gradient(fn, positions, eps=1e-6):
    g = np.zeros_like(positions)
    for i in range(positions.shape[0]):
        for c in range(3):
            p = positions.copy()
            p[i, c] += eps
            up = fn(p)
            p[i, c] -= 2 * eps
            dn = fn(p)
            g[i, c] = (up - dn) / (2 * eps)
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


class TestSeparation:
    def test_inactive_above_margin(self):
        pairs, pos = one_pair(0.05)
        value, grad, d = separation_term(pairs, pos, margin=0.01)
        assert value == 0.0
        assert_allclose(grad, 0.0)
        assert_allclose(d, [0.05])

    def test_hand_value(self):
        # one pair, unit weight, margin 0.01, d = -0.02 -> (0.03)^2
        pairs, pos = one_pair(-0.02)
        value, _, _ = separation_term(pairs, pos, margin=0.01)
        assert value == pytest.approx(9e-4, rel=1e-12)

    def test_gradient_pushes_outward(self):
        pairs, pos = one_pair(-0.02)
        _, grad, _ = separation_term(pairs, pos, margin=0.01)
        # descent direction -grad points along +n
        assert grad[0, 2] < 0

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_fd(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.normal(size=(6, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        pairs = ContactPairs(
            vertex=np.arange(6), face=np.zeros(6, dtype=int),
            point=rng.normal(size=(6, 3)), normal=n,
            area_weight=rng.dirichlet(np.ones(6)),
            source_distance=np.zeros(6))
        pos = pairs.point + rng.uniform(-0.3, -0.05, 6)[:, None] * n
        _, grad, _ = separation_term(pairs, pos, margin=0.01)
        want = fd_gradient(
            lambda p: separation_term(pairs, p, margin=0.01)[0], pos)
        assert rel_err(grad, want) < 1e-6


class TestTightness:
    def test_matched_fit_is_zero(self):
        pairs, pos = one_pair(0.02)
        pairs.source_distance = np.array([0.02])
        value, grad = tightness_term(pairs, pos, np.ones(1, bool))
        assert value == pytest.approx(0.0, abs=1e-18)
        assert_allclose(grad, 0.0)

    def test_hand_value(self):
        pairs, pos = one_pair(0.05)
        pairs.source_distance = np.array([0.02])
        value, _ = tightness_term(pairs, pos, np.ones(1, bool))
        assert value == pytest.approx(9e-4, rel=1e-12)

    def test_region_mask_excludes(self):
        pairs, pos = one_pair(0.05)
        pairs.source_distance = np.array([0.02])
        value, grad = tightness_term(pairs, pos, np.zeros(1, bool))
        assert value == 0.0
        assert_allclose(grad, 0.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_fd(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = rng.normal(size=(5, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        pairs = ContactPairs(
            vertex=np.arange(5), face=np.zeros(5, dtype=int),
            point=rng.normal(size=(5, 3)), normal=n,
            area_weight=np.full(5, 0.2),
            source_distance=rng.uniform(0.0, 0.05, 5))
        pos = pairs.point + rng.uniform(0.02, 0.3, 5)[:, None] * n
        mask = rng.uniform(size=5) < 0.7
        _, grad = tightness_term(pairs, pos, mask)
        want = fd_gradient(
            lambda p: tightness_term(pairs, p, mask)[0], pos)
        assert rel_err(grad, want) < 1e-6


class TestLaplacian:
    def test_identity_zero(self):
        m = tube_mesh(10, 6)
        cache = build_differential_cache(m)
        value, grad = laplacian_term(cache.laplacian, cache.tilde_laplacians,
                                     m.vertices)
        assert value < 1e-24
        assert_allclose(grad, 0.0, atol=1e-12)

    @pytest.mark.parametrize("s", [0.25, 1.0, 4.0])
    def test_scale_invariance(self, s):
        m = tube_mesh(12, 7)
        cache = build_differential_cache(m)
        value, _ = laplacian_term(cache.laplacian, cache.tilde_laplacians,
                                  s * m.vertices)
        assert value < 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_fd(self, seed):
        rng = np.random.default_rng(200 + seed)
        m = grid_mesh(5, 4)
        cache = build_differential_cache(m)
        pos = m.vertices + 0.1 * rng.normal(size=m.vertices.shape)
        _, grad = laplacian_term(cache.laplacian, cache.tilde_laplacians, pos)
        want = fd_gradient(
            lambda p: laplacian_term(cache.laplacian,
                                     cache.tilde_laplacians, p)[0], pos)
        assert rel_err(grad, want) < 1e-4


class TestBending:
    def test_flat_to_flat_zero(self):
        m = grid_mesh(4, 4)
        cache = build_differential_cache(m)
        value, grad, skipped = bending_term(cache, m.vertices)
        assert value == 0.0
        assert skipped == 0
        assert_allclose(grad, 0.0, atol=1e-14)

    def test_single_hinge_right_angle(self):
        # flat two-triangle source; fold the target to 90 degrees
        verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]])
        faces = np.array([[0, 1, 2], [0, 2, 3]])
        from garmfit.mesh import Mesh
        cache = build_differential_cache(Mesh(verts, faces))
        target = verts.copy()
        # rotate vertex 3 about the diagonal hinge (0,2) by 90 degrees
        axis = (verts[2] - verts[0]) / np.linalg.norm(verts[2] - verts[0])
        rel = verts[3] - verts[0]
        par = np.dot(rel, axis) * axis
        perp = rel - par
        target[3] = verts[0] + par + np.cross(axis, perp)
        value, _, _ = bending_term(cache, target)
        assert value == pytest.approx((np.pi / 2) ** 2, rel=1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_fd(self, seed):
        rng = np.random.default_rng(300 + seed)
        m = grid_mesh(4, 3)
        cache = build_differential_cache(m)
        pos = m.vertices + 0.15 * rng.normal(size=m.vertices.shape)
        _, grad, _ = bending_term(cache, pos)
        want = fd_gradient(lambda p: bending_term(cache, p)[0], pos)
        assert rel_err(grad, want) < 1e-4


class TestBoundary:
    def test_identity_zero(self):
        m = grid_mesh(4, 4)
        cache = build_differential_cache(m)
        value, grad, skipped = boundary_term(cache, m.vertices)
        assert value == 0.0
        assert skipped == 0
        assert_allclose(grad, 0.0, atol=1e-14)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_fd(self, seed):
        rng = np.random.default_rng(400 + seed)
        m = grid_mesh(4, 3)
        cache = build_differential_cache(m)
        pos = m.vertices + 0.1 * rng.normal(size=m.vertices.shape)
        _, grad, _ = boundary_term(cache, pos)
        want = fd_gradient(lambda p: boundary_term(cache, p)[0], pos)
        assert rel_err(grad, want) < 1e-4


class TestConnect:
    def test_hand_value(self):
        pairs = ConnectPairs(vertex=np.array([0]),
                             anchor=np.zeros((1, 3)),
                             rest_length=np.array([0.1]),
                             source_dir=np.array([[0.0, 0.0, 1.0]]))
        pos = np.array([[0.0, 0.0, 0.3]])
        value, _ = connect_term(pairs, pos)
        assert value == pytest.approx(0.04, rel=1e-12)

    def test_at_rest_zero(self):
        pairs = ConnectPairs(vertex=np.array([0]),
                             anchor=np.zeros((1, 3)),
                             rest_length=np.array([0.3]),
                             source_dir=np.array([[0.0, 0.0, 1.0]]))
        value, grad = connect_term(pairs, np.array([[0.0, 0.0, 0.3]]))
        assert value == pytest.approx(0.0, abs=1e-18)
        assert_allclose(grad, 0.0, atol=1e-12)

    def test_coincident_uses_source_dir(self):
        pairs = ConnectPairs(vertex=np.array([0]),
                             anchor=np.zeros((1, 3)),
                             rest_length=np.array([0.1]),
                             source_dir=np.array([[1.0, 0.0, 0.0]]))
        value, grad = connect_term(pairs, np.zeros((1, 3)))
        assert value == pytest.approx(0.01, rel=1e-12)
        assert grad[0, 0] != 0.0
        assert np.isfinite(grad).all()

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_fd(self, seed):
        rng = np.random.default_rng(500 + seed)
        pairs = ConnectPairs(vertex=np.arange(4),
                             anchor=rng.normal(size=(4, 3)),
                             rest_length=rng.uniform(0.05, 0.2, 4),
                             source_dir=np.tile([0.0, 0.0, 1.0], (4, 1)))
        pos = pairs.anchor + rng.uniform(0.1, 0.5, 4)[:, None] \
            * rng.normal(size=(4, 3))
        _, grad = connect_term(pairs, pos)
        want = fd_gradient(lambda p: connect_term(pairs, p)[0], pos)
        assert rel_err(grad, want) < 1e-5


class TestResidualPenalties:
    def test_z_only(self):
        delta = np.array([[0.5, -0.3, 0.2], [0.1, 0.9, -0.4]])
        dz_val, dw_val, g_dz, g_dw = residual_penalties(delta, np.zeros(2))
        assert dz_val == pytest.approx(0.2 ** 2 + 0.4 ** 2, rel=1e-12)
        assert dw_val == 0.0
        assert_allclose(g_dz, [0.4, -0.8])

    def test_weight_residuals(self):
        _, dw_val, _, g_dw = residual_penalties(np.zeros((2, 3)),
                                                np.array([0.05, -0.02]))
        assert dw_val == pytest.approx(0.0025 + 0.0004, rel=1e-12)
        assert_allclose(g_dw, [0.1, -0.04])


class TestComposite:
    def test_hand_composition(self):
        rep = LossReport(separation=1.0, tightness=2.0, laplacian=3.0)
        assert rep.recompose(LossWeights()) == pytest.approx(211.5, rel=1e-12)

    def test_report_recomposition_consistency(self, mini_scene):
        import garmfit as gf
        from conftest import mini_config, problem_for
        cfg = mini_config(iterations=5, log_every=1)
        problem = problem_for(mini_scene, cfg)
        state = gf.build_state(problem.source_garment, problem)
        dec = state.decode()
        rep, grad, g_dz, g_dw = state.objective.evaluate(
            dec.positions, state.pairs, state.residuals.delta_coords,
            dec.constrained_dw)
        assert rep.total == pytest.approx(rep.recompose(cfg.weights),
                                          rel=1e-9)
        assert grad.shape == dec.positions.shape
        assert np.isfinite(grad).all()

    def test_margin_must_be_positive(self):
        m = grid_mesh(3, 3)
        cache = build_differential_cache(m)
        region = FitRegion("all", np.arange(m.n_vertices),
                           np.ones(m.n_vertices, bool))
        with pytest.raises(ValueError, match="margin"):
            Objective(cache, LossWeights(), 0.0, region)
