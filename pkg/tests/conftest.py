import numpy as np
import pytest

import garmfit as gf


def quad_mesh():
    """Unit square split into two triangles, CCW from +z."""
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                      [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return gf.Mesh(verts, faces)


def grid_mesh(nx=6, ny=5, uvs=True):
    """Open rectangular grid in the xy-plane."""
    xs, ys = np.meshgrid(np.linspace(0, 1, nx), np.linspace(0, 1, ny),
                         indexing="ij")
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a = i * ny + j
            b = (i + 1) * ny + j
            faces.append([a, b, b + 1])
            faces.append([a, b + 1, a + 1])
    uv = verts[:, :2].copy() if uvs else None
    return gf.Mesh(verts, np.array(faces), uv)


def tube_mesh(n_around=12, n_along=8, radius=0.5, height=1.0):
    """Closed-loop open-ended tube along +z with wrap-aware UVs."""
    phis = np.linspace(0, 2 * np.pi, n_around, endpoint=False)
    ts = np.linspace(0, 1, n_along)
    verts, uvs = [], []
    for i, phi in enumerate(phis):
        for j, t in enumerate(ts):
            verts.append([radius * np.cos(phi), radius * np.sin(phi),
                          height * t])
            uvs.append([phi / (2 * np.pi), t])
    faces = []
    for i in range(n_around):
        ni = (i + 1) % n_around
        for j in range(n_along - 1):
            a = i * n_along + j
            b = ni * n_along + j
            faces.append([a, b, b + 1])
            faces.append([a, b + 1, a + 1])
    return gf.Mesh(np.array(verts), np.array(faces), np.array(uvs))


@pytest.fixture(scope="session")
def mini_params():
    params = gf.standard_scene_params(seed=3)
    params.avatar_resolution = 36
    params.garments[0].n_around = 28
    params.garments[0].n_along = 22
    return params


@pytest.fixture(scope="session")
def mini_scene(mini_params):
    return gf.generate_scene(mini_params)


def mini_config(**overrides):
    base = dict(mode="single", iterations=200, learning_rate=5e-3,
                log_every=50, pair_update_every=100)
    base.update(overrides)
    return gf.RefitConfig(**base)


def problem_for(bundle, cfg, garment=0, region=None):
    return gf.RefitProblem(
        source_garment=bundle.source_garments[garment],
        source_avatar=bundle.source_avatar,
        target_avatar=bundle.target_avatar,
        source_skeleton=bundle.source_skeleton,
        target_skeleton=bundle.target_skeleton,
        source_skinning=bundle.source_skinning,
        fit_region=region or bundle.fit_regions[garment],
        config=cfg,
    )
