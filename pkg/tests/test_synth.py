import numpy as np
import pytest
from numpy.testing import assert_allclose

import garmfit as gf
from garmfit.mesh import boundary_loops, build_edge_topology
from garmfit.synth import (GarmentSpec, SceneParams, avatar_mesh,
                           build_humanoid, capsules_of, generate_scene,
                           sequence_scene_params, skin_weights,
                           standard_scene_params, tube_garment,
                           two_layer_scene_params, union_sdf)


class TestHumanoid:
    def test_structure(self):
        skel, radii = build_humanoid()
        assert len(skel) == len(radii)
        assert "hips" in skel.names and "spine" in skel.names
        assert skel.bones[0].parent is None
        for b in skel.bones[1:]:
            assert b.parent is not None and b.parent < len(skel)

    def test_length_scale_applied(self):
        base, _ = build_humanoid()
        scaled, _ = build_humanoid(length_scales={"spine": 1.5})
        i = base.index_of("spine")
        assert_allclose(np.linalg.norm(scaled.bones[i].direction),
                        1.5 * np.linalg.norm(base.bones[i].direction))

    def test_radius_scale_applied(self):
        skel, base_r = build_humanoid()
        _, r = build_humanoid(radius_scales={"hips": 2.0})
        i = skel.index_of("hips")
        assert r[i] == pytest.approx(2.0 * base_r[i])
        others = np.arange(len(r)) != i
        assert_allclose(r[others], base_r[others])

    def test_arm_elevation_lifts_arms(self):
        flat, _ = build_humanoid(0.0)
        lifted, _ = build_humanoid(40.0)
        i = flat.index_of("l_upper_arm")
        assert lifted.bones[i].direction[2] > flat.bones[i].direction[2]
        # non-arm bones untouched
        j = flat.index_of("spine")
        assert_allclose(lifted.bones[j].direction, flat.bones[j].direction)

    def test_scaling_moves_children_with_parent_tip(self):
        scaled, _ = build_humanoid(length_scales={"spine": 1.3})
        base, _ = build_humanoid()
        i = base.index_of("spine")
        stretch = 0.3 * base.bones[i].direction
        k = base.index_of("chest")
        assert_allclose(scaled.bones[k].head, base.bones[k].head + stretch)


class TestUnionSdf:
    def test_single_capsule_oracle(self):
        p0 = np.array([[0.0, 0.0, 0.0]])
        p1 = np.array([[0.0, 0.0, 1.0]])
        r = np.array([0.3])
        pts = np.array([
            [0.5, 0.0, 0.5],     # side: 0.5 - 0.3
            [0.0, 0.0, 1.7],     # beyond tip: 0.7 - 0.3
            [0.0, 0.0, 0.5],     # on axis: -0.3
        ])
        assert_allclose(union_sdf(pts, p0, p1, r), [0.2, 0.4, -0.3],
                        atol=1e-12)

    def test_union_takes_minimum(self):
        p0 = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        p1 = np.array([[0.0, 0.0, 1.0], [2.0, 0.0, 1.0]])
        r = np.array([0.3, 0.5])
        pt = np.array([[1.0, 0.0, 0.5]])
        assert union_sdf(pt, p0, p1, r)[0] == pytest.approx(0.5)


@pytest.fixture(scope="module")
def avatar():
    skel, radii = build_humanoid()
    return avatar_mesh(skel, radii, resolution=32)


class TestAvatarMesh:
    def test_closed_and_manifold(self, avatar):
        topo = build_edge_topology(avatar.faces, avatar.n_vertices)
        assert topo.nonmanifold == 0
        assert not boundary_loops(avatar.faces, avatar.n_vertices)

    def test_oriented_outward(self, avatar):
        vol6 = np.einsum(
            "ij,ij->i", avatar.vertices[avatar.faces[:, 0]],
            np.cross(avatar.vertices[avatar.faces[:, 1]],
                     avatar.vertices[avatar.faces[:, 2]])).sum()
        assert vol6 > 0

    def test_surface_near_zero_level(self, avatar):
        skel, radii = build_humanoid()
        p0, p1, r = capsules_of(skel, radii)
        d = union_sdf(avatar.vertices, p0, p1, r)
        # marching cubes error is bounded by the cell size
        assert np.max(np.abs(d)) < 0.1


class TestSkinWeights:
    def test_coverage_and_budget(self, mini_scene):
        skin = mini_scene.source_skinning
        sums = np.bincount(skin.vertex, weights=skin.weight,
                           minlength=mini_scene.source_avatar.n_vertices)
        assert_allclose(sums, 1.0, atol=1e-9)
        per_vertex = np.bincount(skin.vertex)
        assert per_vertex.max() <= 4
        assert per_vertex.min() >= 1

    def test_far_from_joints_single_bone_dominates(self):
        skel, radii = build_humanoid()
        avatar = avatar_mesh(skel, radii, resolution=32)
        skin = skin_weights(avatar, skel, radii)
        # a vertex near the head capsule's middle should be mostly "head"
        hi = skel.index_of("head")
        hb = skel.bones[hi]
        mid = hb.head + 0.5 * hb.direction
        v = int(np.argmin(np.linalg.norm(avatar.vertices - mid, axis=1)))
        sel = skin.vertex == v
        w = dict(zip(skin.bone[sel], skin.weight[sel]))
        assert w.get(hi, 0.0) > 0.5


class TestTubeGarment:
    def test_open_tube_topology(self, mini_scene):
        g = mini_scene.source_garments[0]
        topo = build_edge_topology(g.faces, g.n_vertices)
        assert topo.nonmanifold == 0
        loops = boundary_loops(g.faces, g.n_vertices)
        assert len(loops) == 2    # top and bottom hems

    def test_sits_outside_body(self, mini_scene):
        skel = mini_scene.source_skeleton
        radii = np.array([r for _, r in mini_scene.capsules["source"]])
        p0, p1, r = capsules_of(skel, radii)
        d = union_sdf(mini_scene.source_garments[0].vertices, p0, p1, r)
        assert d.min() > 0.005

    def test_clearance_controls_radius(self):
        skel, radii = build_humanoid()
        tight = tube_garment(GarmentSpec(n_around=24, n_along=18,
                                         clearance=0.01), skel, radii)
        loose = tube_garment(GarmentSpec(n_around=24, n_along=18,
                                         clearance=0.08), skel, radii)
        rt = np.linalg.norm(tight.vertices[:, :2], axis=1)
        rl = np.linalg.norm(loose.vertices[:, :2], axis=1)
        assert_allclose(np.mean(rl - rt), 0.07, atol=1e-3)

    def test_wrinkles_modulate_surface(self):
        skel, radii = build_humanoid()
        plain = tube_garment(GarmentSpec(n_around=24, n_along=18), skel, radii)
        wavy = tube_garment(GarmentSpec(n_around=24, n_along=18,
                                        wrinkle_amp=0.01), skel, radii)
        dev = np.linalg.norm(wavy.vertices - plain.vertices, axis=1)
        assert dev.max() == pytest.approx(0.01, abs=2e-3)
        assert dev.min() < 1e-6


class TestSceneGeneration:
    def test_bitwise_deterministic(self, mini_params, mini_scene):
        again = generate_scene(mini_params)
        pairs = [
            (again.source_garments[0].vertices,
             mini_scene.source_garments[0].vertices),
            (again.source_avatar.vertices, mini_scene.source_avatar.vertices),
            (again.target_avatar.vertices, mini_scene.target_avatar.vertices),
            (again.source_skinning.weight, mini_scene.source_skinning.weight),
        ]
        for a, b in pairs:
            assert a.tobytes() == b.tobytes()

    def test_target_body_differs_from_source(self, mini_scene):
        src = mini_scene.source_avatar.vertices
        tgt = mini_scene.target_avatar.vertices
        assert np.ptp(src[:, 0]) != pytest.approx(np.ptp(tgt[:, 0]), rel=0.01)

    def test_params_round_trip(self):
        p = standard_scene_params(seed=5)
        q = SceneParams.from_dict(p.to_dict())
        assert q.to_dict() == p.to_dict()

    def test_two_layer_has_two_garments(self):
        p = two_layer_scene_params()
        assert len(p.garments) == 2
        assert p.garments[0].clearance < p.garments[1].clearance

    def test_sequence_elevations_increase(self):
        frames = sequence_scene_params(frames=3)
        elevs = [f.arm_elevation for f in frames]
        assert elevs == sorted(elevs) and elevs[0] < elevs[-1]
        for f in frames:
            assert f.garments[0].chain == ("l_upper_arm", "l_lower_arm")
