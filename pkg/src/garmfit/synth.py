"""Procedural test scenes: capsule humanoids, skinning, and tube garments.

Scenes are deterministic functions of (parameters, seed).  The avatar
surface is a marching-cubes extraction of a union-of-capsules signed
distance field; garments are UV tubes draped around the capsules with a
clearance profile and optional sinusoidal wrinkles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from skimage import measure

from .mesh import Mesh
from .skeleton import Bone, Skeleton, VertexBoneWeights


# name, parent, attach point on parent ("tip"/"head"), unit direction, length, capsule radius
_HUMANOID = [
    ("hips",        None,          "",     (0.0, 0.0, 1.0),   0.12, 0.135),
    ("spine",       "hips",        "tip",  (0.0, 0.0, 1.0),   0.22, 0.130),
    ("chest",       "spine",       "tip",  (0.0, 0.0, 1.0),   0.16, 0.140),
    ("neck",        "chest",       "tip",  (0.0, 0.0, 1.0),   0.08, 0.050),
    ("head",        "neck",        "tip",  (0.0, 0.0, 1.0),   0.16, 0.090),
    ("l_rib",       "chest",       "head", (0.834, 0.0, 0.552), 0.20, 0.065),
    ("l_upper_arm", "l_rib",       "tip",  (1.0, 0.0, 0.0),   0.26, 0.045),
    ("l_lower_arm", "l_upper_arm", "tip",  (1.0, 0.0, 0.0),   0.24, 0.038),
    ("r_rib",       "chest",       "head", (-0.834, 0.0, 0.552), 0.20, 0.065),
    ("r_upper_arm", "r_rib",       "tip",  (-1.0, 0.0, 0.0),  0.26, 0.045),
    ("r_lower_arm", "r_upper_arm", "tip",  (-1.0, 0.0, 0.0),  0.24, 0.038),
    ("l_crotch",    "hips",        "head", (0.825, 0.0, -0.565), 0.10, 0.075),
    ("l_upper_leg", "l_crotch",    "tip",  (0.0, 0.0, -1.0),  0.40, 0.075),
    ("l_lower_leg", "l_upper_leg", "tip",  (0.0, 0.0, -1.0),  0.38, 0.055),
    ("r_crotch",    "hips",        "head", (-0.825, 0.0, -0.565), 0.10, 0.075),
    ("r_upper_leg", "r_crotch",    "tip",  (0.0, 0.0, -1.0),  0.40, 0.075),
    ("r_lower_leg", "r_upper_leg", "tip",  (0.0, 0.0, -1.0),  0.38, 0.055),
]

_ROOT_HEAD = np.array([0.0, 0.0, 0.92])
_CROTCH_REF = np.array([1.0, 0.0, 0.0])


def _rot_y(deg: float) -> np.ndarray:
    r = math.radians(deg)
    c, s = math.cos(r), math.sin(r)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def build_humanoid(arm_elevation: float = 0.0,
                   length_scales: dict[str, float] | None = None,
                   radius_scales: dict[str, float] | None = None):
    """Skeleton plus per-bone capsule radii.

    ``arm_elevation`` rotates the arm chains upward (degrees); scale dicts
    multiply individual bone lengths and radii by name.
    """
    length_scales = length_scales or {}
    radius_scales = radius_scales or {}
    lift_l = _rot_y(-arm_elevation)   # +x arm swings toward +z
    lift_r = _rot_y(arm_elevation)

    bones: list[Bone] = []
    radii: list[float] = []
    tips: dict[str, np.ndarray] = {}
    heads: dict[str, np.ndarray] = {}
    index: dict[str, int] = {}
    for name, parent, attach, d, length, radius in _HUMANOID:
        direction = np.asarray(d, dtype=np.float64)
        if "arm" in name:
            direction = (lift_l if name.startswith("l_") else lift_r) @ direction
        direction = direction * (length * length_scales.get(name, 1.0))
        if parent is None:
            head = _ROOT_HEAD.copy()
            pidx = None
        else:
            head = (tips if attach == "tip" else heads)[parent].copy()
            pidx = index[parent]
        bones.append(Bone(name, head, direction, pidx))
        heads[name] = head
        tips[name] = head + direction
        index[name] = len(bones) - 1
        radii.append(radius * radius_scales.get(name, 1.0))
    return Skeleton(bones, _CROTCH_REF.copy()), np.array(radii)


def capsules_of(skeleton: Skeleton, radii: np.ndarray):
    """(p0, p1, r) arrays for the union signed distance field."""
    p0 = skeleton.heads()
    p1 = p0 + skeleton.directions()
    return p0, p1, np.asarray(radii, dtype=np.float64)


def union_sdf(points: np.ndarray, p0: np.ndarray, p1: np.ndarray,
              r: np.ndarray) -> np.ndarray:
    """min over capsules of (distance to segment - radius)."""
    seg = p1 - p0
    seglen2 = np.einsum("bj,bj->b", seg, seg)
    rel = points[:, None, :] - p0[None, :, :]
    t = np.clip(np.einsum("nbj,bj->nb", rel, seg) / seglen2, 0.0, 1.0)
    closest = p0[None] + t[..., None] * seg[None]
    d = np.linalg.norm(points[:, None, :] - closest, axis=-1) - r[None, :]
    return d.min(axis=1)


def avatar_mesh(skeleton: Skeleton, radii: np.ndarray,
                resolution: int = 96, padding: float = 0.06) -> Mesh:
    """Closed avatar surface extracted from the capsule union field."""
    p0, p1, r = capsules_of(skeleton, radii)
    lo = np.minimum(p0, p1).min(axis=0) - r.max() - padding
    hi = np.maximum(p0, p1).max(axis=0) + r.max() + padding
    h = float((hi - lo).max()) / resolution
    ns = np.maximum(((hi - lo) / h).astype(int) + 1, 2)
    xs = lo[0] + h * np.arange(ns[0])
    ys = lo[1] + h * np.arange(ns[1])
    zs = lo[2] + h * np.arange(ns[2])

    vol = np.empty((ns[0], ns[1], ns[2]))
    yy, zz = np.meshgrid(ys, zs, indexing="ij")
    flat_yz = np.stack([yy.ravel(), zz.ravel()], axis=1)
    for ix, x in enumerate(xs):  # slab-wise to bound memory
        pts = np.column_stack([np.full(len(flat_yz), x), flat_yz])
        vol[ix] = union_sdf(pts, p0, p1, r).reshape(len(ys), len(zs))

    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0,
                                                spacing=(h, h, h))
    verts = verts + lo
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    vol6 = np.einsum("ij,ij->i", verts[faces[:, 0]],
                     np.cross(verts[faces[:, 1]], verts[faces[:, 2]])).sum()
    if vol6 < 0:
        faces = faces[:, [0, 2, 1]]
    return Mesh(verts, faces)


def skin_weights(avatar: Mesh, skeleton: Skeleton, radii: np.ndarray,
                 rounds: int = 12, keep: int = 4,
                 prune_tol: float = 1e-4) -> VertexBoneWeights:
    """One-hot nearest-bone assignment diffused over the surface.

    A few rounds of neighbor averaging turn the hard partition into smooth
    blends near joints; each vertex then keeps its ``keep`` strongest bones.
    """
    p0, p1, _ = capsules_of(skeleton, radii)
    seg = p1 - p0
    seglen2 = np.einsum("bj,bj->b", seg, seg)
    rel = avatar.vertices[:, None, :] - p0[None, :, :]
    t = np.clip(np.einsum("nbj,bj->nb", rel, seg) / seglen2, 0.0, 1.0)
    closest = p0[None] + t[..., None] * seg[None]
    dist = np.linalg.norm(avatar.vertices[:, None, :] - closest, axis=-1)
    nearest = np.argmin(dist, axis=1)

    n, b = avatar.n_vertices, len(skeleton)
    W = np.zeros((n, b))
    W[np.arange(n), nearest] = 1.0

    i = np.concatenate([avatar.faces[:, 0], avatar.faces[:, 1], avatar.faces[:, 2],
                        np.arange(n)])
    j = np.concatenate([avatar.faces[:, 1], avatar.faces[:, 2], avatar.faces[:, 0],
                        np.arange(n)])
    A = sparse.coo_matrix((np.ones(len(i)), (i, j)), shape=(n, n)).tocsr()
    A = A + A.T
    inv_deg = 1.0 / np.asarray(A.sum(axis=1)).ravel()
    for _ in range(rounds):
        W = 0.5 * W + 0.5 * (inv_deg[:, None] * (A @ W))

    if keep < b:
        cut = np.partition(W, b - keep, axis=1)[:, b - keep, None]
        W[W < cut] = 0.0
    W /= W.sum(axis=1, keepdims=True)

    vidx, bidx = np.nonzero(W)
    raw = VertexBoneWeights(vidx, bidx, W[vidx, bidx], n)
    return raw.pruned(prune_tol)


def _radial_profile(centers: np.ndarray, dirs: np.ndarray,
                    p0, p1, r, r_max: float) -> np.ndarray:
    """Outermost surface distance along each radial ray, nan when the ray
    misses the body entirely."""
    m = 48
    ts = np.linspace(0.0, r_max, m)
    out = np.full(len(centers), np.nan)
    chunk = max(1, 200_000 // m)
    for s in range(0, len(centers), chunk):
        ce = centers[s:s + chunk]
        di = dirs[s:s + chunk]
        pts = ce[:, None, :] + ts[None, :, None] * di[:, None, :]
        sdf = union_sdf(pts.reshape(-1, 3), p0, p1, r).reshape(len(ce), m)
        inside = sdf <= 0.0
        any_in = inside.any(axis=1)
        last = (m - 1) - np.argmax(inside[:, ::-1], axis=1)
        last = np.clip(last, 0, m - 2)
        lo = ts[last].copy()
        hi = ts[last + 1].copy()
        lo_pts = ce + lo[:, None] * di
        f_lo = union_sdf(lo_pts, p0, p1, r)
        for _ in range(30):
            mid = 0.5 * (lo + hi)
            f_mid = union_sdf(ce + mid[:, None] * di, p0, p1, r)
            same = (f_mid <= 0.0) == (f_lo <= 0.0)
            lo = np.where(same, mid, lo)
            f_lo = np.where(same, f_mid, f_lo)
            hi = np.where(same, hi, mid)
        res = 0.5 * (lo + hi)
        res[~any_in] = np.nan
        out[s:s + chunk] = res
    return out


@dataclass
class GarmentSpec:
    """A UV tube wrapped around a straight axis between two chain bones.

    The default axis ends at the spine tail, keeping the top hem below the
    armpits so radial rays never catch the arm capsules.
    """

    name: str = "tube"
    chain: tuple[str, str] = ("hips", "spine")  # axis: chain[0].head -> chain[1].tail
    t_lo: float = 0.02
    t_hi: float = 0.98
    n_around: int = 96
    n_along: int = 84
    clearance: float = 0.02
    top_taper: float = 0.0       # clearance drop approaching t_hi
    taper_start: float = 0.8
    wrinkle_amp: float = 0.0
    wrinkle_waves: tuple[float, float] = (10.0, 3.0)
    fit_region: str = "waist"


def tube_garment(spec: GarmentSpec, skeleton: Skeleton,
                 radii: np.ndarray) -> Mesh:
    """Drape a tube around the capsule body along the spec's axis."""
    p0, p1, r = capsules_of(skeleton, radii)
    a0 = skeleton.bones[skeleton.index_of(spec.chain[0])].head
    b = skeleton.bones[skeleton.index_of(spec.chain[1])]
    a1 = b.head + b.direction
    start = a0 + spec.t_lo * (a1 - a0)
    end = a0 + spec.t_hi * (a1 - a0)

    axis = end - start
    axlen = np.linalg.norm(axis)
    az = axis / axlen
    ref = np.array([0.0, 0.0, 1.0]) if abs(az[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u1 = np.cross(ref, az)
    u1 /= np.linalg.norm(u1)
    u2 = np.cross(az, u1)

    na, nl = spec.n_around, spec.n_along
    phi = 2.0 * np.pi * np.arange(na) / na
    tt = np.linspace(0.0, 1.0, nl)
    PHI, T = np.meshgrid(phi, tt, indexing="ij")  # (na, nl)
    centers = start[None, None, :] + T[..., None] * axis[None, None, :]
    dirs = np.cos(PHI)[..., None] * u1 + np.sin(PHI)[..., None] * u2

    r_max = float(r.max()) * 2.0 + 0.8
    prof = _radial_profile(centers.reshape(-1, 3), dirs.reshape(-1, 3),
                           p0, p1, r, r_max).reshape(na, nl)
    # rays that miss the body borrow the widest hit of their ring
    ring_max = np.nanmax(prof, axis=0) if not np.isnan(prof).all() else None
    if ring_max is not None:
        fill = np.where(np.isnan(ring_max), np.nanmax(prof), ring_max)
        prof = np.where(np.isnan(prof), fill[None, :], prof)
    else:
        prof = np.full_like(prof, 0.05)

    cl = spec.clearance - spec.top_taper * np.clip(
        (T - spec.taper_start) / max(1.0 - spec.taper_start, 1e-9), 0.0, 1.0)
    wr = spec.wrinkle_amp * np.sin(spec.wrinkle_waves[0] * PHI) \
        * np.sin(np.pi * spec.wrinkle_waves[1] * T)
    R = prof + cl + wr

    verts = (centers + R[..., None] * dirs).reshape(-1, 3)
    uvs = np.stack([PHI.ravel() / (2.0 * np.pi), T.ravel()], axis=1)

    # grid faces, wrapped around phi; vertex id = i * nl + j
    i = np.arange(na)
    j = np.arange(nl - 1)
    I, J = np.meshgrid(i, j, indexing="ij")
    a = I * nl + J
    bq = ((I + 1) % na) * nl + J
    c = ((I + 1) % na) * nl + (J + 1)
    d = I * nl + (J + 1)
    f1 = np.stack([a, bq, c], axis=-1).reshape(-1, 3)
    f2 = np.stack([a, c, d], axis=-1).reshape(-1, 3)
    faces = np.concatenate([f1, f2])
    return Mesh(verts, faces, uvs)


@dataclass
class SceneParams:
    seed: int = 7
    avatar_resolution: int = 96
    arm_elevation: float = 0.0
    garments: list[GarmentSpec] = field(default_factory=lambda: [GarmentSpec()])
    target_length_scales: dict = field(default_factory=dict)   # name -> (lo, hi)
    target_radius_scales: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "avatar_resolution": self.avatar_resolution,
            "arm_elevation": self.arm_elevation,
            "garments": [vars(g).copy() for g in self.garments],
            "target_length_scales": dict(self.target_length_scales),
            "target_radius_scales": dict(self.target_radius_scales),
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneParams":
        gs = []
        for g in d.get("garments", []):
            g = dict(g)
            g["chain"] = tuple(g.get("chain", ("hips", "chest")))
            g["wrinkle_waves"] = tuple(g.get("wrinkle_waves", (10.0, 3.0)))
            gs.append(GarmentSpec(**g))
        return SceneParams(
            seed=d.get("seed", 7),
            avatar_resolution=d.get("avatar_resolution", 96),
            arm_elevation=d.get("arm_elevation", 0.0),
            garments=gs or [GarmentSpec()],
            target_length_scales={k: tuple(v) for k, v in
                                  d.get("target_length_scales", {}).items()},
            target_radius_scales={k: tuple(v) for k, v in
                                  d.get("target_radius_scales", {}).items()},
        )


def _sample_scales(ranges: dict, rng: np.random.Generator) -> dict[str, float]:
    out = {}
    for name in sorted(ranges):
        lo, hi = ranges[name]
        out[name] = float(lo) if lo == hi else float(rng.uniform(lo, hi))
    return out


def generate_scene(params: SceneParams):
    """Deterministic scene bundle for the given parameters.

    Returns the container defined in scene I/O; imported late to keep this
    module free of file-format concerns.
    """
    from .sceneio import SceneBundle

    rng = np.random.default_rng(params.seed)
    lscale = _sample_scales(params.target_length_scales, rng)
    rscale = _sample_scales(params.target_radius_scales, rng)

    src_skel, src_radii = build_humanoid(params.arm_elevation)
    tgt_skel, tgt_radii = build_humanoid(params.arm_elevation, lscale, rscale)

    src_avatar = avatar_mesh(src_skel, src_radii, params.avatar_resolution)
    tgt_avatar = avatar_mesh(tgt_skel, tgt_radii, params.avatar_resolution)
    src_skin = skin_weights(src_avatar, src_skel, src_radii)
    tgt_skin = skin_weights(tgt_avatar, tgt_skel, tgt_radii)

    garments = [tube_garment(g, src_skel, src_radii) for g in params.garments]
    labels = [g.fit_region for g in params.garments]

    return SceneBundle(
        source_garments=garments, fit_regions=labels,
        source_avatar=src_avatar, target_avatar=tgt_avatar,
        source_skeleton=src_skel, target_skeleton=tgt_skel,
        source_skinning=src_skin, target_skinning=tgt_skin,
        params=params,
        capsules={
            "source": [(n, r) for n, r in zip(src_skel.names, src_radii)],
            "target": [(n, r) for n, r in zip(tgt_skel.names, tgt_radii)],
        },
    )


def standard_scene_params(seed: int = 7) -> SceneParams:
    """The single-garment benchmark scene: wrinkled torso tube on a source
    body, target torso 1.4x wider with mildly re-proportioned bones."""
    return SceneParams(
        seed=seed,
        garments=[GarmentSpec(name="torso_tube", n_around=96, n_along=84,
                              clearance=0.02, wrinkle_amp=0.006,
                              wrinkle_waves=(10.0, 3.0),
                              fit_region="upper_trunk_and_waist")],
        # torso widening averages 1.4x, distributed so each bone's radius
        # change stays proportional to its length
        target_radius_scales={
            "hips": (1.28, 1.28), "spine": (1.55, 1.55), "chest": (1.38, 1.38),
            "neck": (1.05, 1.05), "head": (1.0, 1.0),
            "l_rib": (1.15, 1.15), "r_rib": (1.15, 1.15),
            "l_upper_arm": (1.05, 1.05), "r_upper_arm": (1.05, 1.05),
            "l_crotch": (1.2, 1.2), "r_crotch": (1.2, 1.2),
            "l_upper_leg": (1.1, 1.1), "r_upper_leg": (1.1, 1.1),
        },
        target_length_scales={
            "hips": (1.05, 1.05), "spine": (1.12, 1.12), "chest": (1.06, 1.06),
            "l_upper_leg": (0.95, 0.95), "r_upper_leg": (0.95, 0.95),
        },
    )


def two_layer_scene_params(seed: int = 11) -> SceneParams:
    """Two concentric torso tubes meeting near the top hem, where the
    connection pairs form."""
    inner = GarmentSpec(name="inner_tube", n_around=72, n_along=60,
                        clearance=0.016, wrinkle_amp=0.004,
                        fit_region="upper_trunk_and_waist")
    outer = GarmentSpec(name="outer_tube", n_around=72, n_along=60,
                        clearance=0.042, top_taper=0.026, taper_start=0.85,
                        wrinkle_amp=0.004, fit_region="upper_trunk_and_waist")
    p = standard_scene_params(seed)
    p.garments = [inner, outer]
    return p


def sequence_scene_params(seed: int = 13, frames: int = 3) -> list[SceneParams]:
    """Arm-raise frames with a sleeve tube on the left arm."""
    out = []
    for f in range(frames):
        sleeve = GarmentSpec(name="sleeve", chain=("l_upper_arm", "l_lower_arm"),
                             t_lo=0.05, t_hi=0.9, n_around=48, n_along=40,
                             clearance=0.012, wrinkle_amp=0.003,
                             wrinkle_waves=(6.0, 2.0), fit_region="all")
        p = SceneParams(
            seed=seed + f, arm_elevation=20.0 * f, garments=[sleeve],
            target_radius_scales={
                "l_upper_arm": (1.3, 1.3), "l_lower_arm": (1.25, 1.25),
                "l_rib": (1.1, 1.1),
            },
            target_length_scales={"l_upper_arm": (1.08, 1.08)},
        )
        out.append(p)
    return out
