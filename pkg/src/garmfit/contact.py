"""Garment-to-body contact pairs, signed distances, and fit-control regions.

A pair attaches one garment vertex to a point on a body face.  Pairs are
frozen between rebuilds, so during a loss evaluation the signed distance is
affine in the vertex position with gradient equal to the face normal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import Mesh, face_areas_normals
from .skeleton import BoneFrames, Skeleton, VertexBoneWeights

log = logging.getLogger("garmfit")

# bones whose combined influence marks a vertex as upper-trunk
TORSO_CHAIN = ("spine", "chest", "neck", "head", "l_rib", "r_rib")

REGION_LABELS = ("waist", "upper_trunk", "upper_trunk_and_waist", "all")


class ContactError(ValueError):
    pass


@dataclass
class ContactPairs:
    """One attachment per garment vertex, vectorized."""

    vertex: np.ndarray           # (N,) garment vertex index
    face: np.ndarray             # (N,) body face index
    point: np.ndarray            # (N, 3) attachment point on the face
    normal: np.ndarray           # (N, 3) flat face normal
    area_weight: np.ndarray      # (N,) normalized over the pair list
    source_distance: np.ndarray  # (N,) d^s, filled at problem setup

    def __len__(self) -> int:
        return len(self.vertex)


def signed_distances(pairs: ContactPairs, positions: np.ndarray) -> np.ndarray:
    """d = n_a . (g - a); positive outside, negative penetrating."""
    rel = positions[pairs.vertex] - pairs.point
    return np.einsum("ij,ij->i", pairs.normal, rel)


def closest_points_on_triangles(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Closest point on each triangle to each query, elementwise.

    ``p`` is (..., 3) and ``tri`` is (..., 3, 3); shapes broadcast over the
    leading axes.  Degenerate triangles fall back to the nearest corner.
    """
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    ab = b - a
    ac = c - a
    ap = p - a

    d1 = np.einsum("...i,...i->...", ab, ap)
    d2 = np.einsum("...i,...i->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i->...", ab, bp)
    d4 = np.einsum("...i,...i->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i->...", ab, cp)
    d6 = np.einsum("...i,...i->...", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.zeros(np.broadcast_shapes(p.shape, a.shape))
    done = np.zeros(out.shape[:-1], dtype=bool)

    def put(mask, value):
        nonlocal done
        mask = mask & ~done
        out[mask] = value[mask] if value.shape == out.shape else \
            np.broadcast_to(value, out.shape)[mask]
        done = done | mask

    put((d1 <= 0) & (d2 <= 0), np.broadcast_to(a, out.shape))
    put((d3 >= 0) & (d4 <= d3), np.broadcast_to(b, out.shape))
    put((d6 >= 0) & (d5 <= d6), np.broadcast_to(c, out.shape))

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0) & np.isfinite(v_ab),
            a + v_ab[..., None] * ab)
        v_ac = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0) & np.isfinite(v_ac),
            a + v_ac[..., None] * ac)
        v_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0) & np.isfinite(v_bc),
            b + v_bc[..., None] * (c - b))
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        put(np.isfinite(v) & np.isfinite(w), a + v[..., None] * ab + w[..., None] * ac)

    if not done.all():
        # degenerate leftovers: nearest corner
        rest = ~done
        d2corner = np.stack([np.sum((p - q) ** 2, axis=-1) for q in (a, b, c)], axis=-1)
        pick = np.argmin(d2corner, axis=-1)
        corners = np.stack([np.broadcast_to(q, out.shape) for q in (a, b, c)], axis=-2)
        out[rest] = np.take_along_axis(
            corners, pick[..., None, None], axis=-2)[..., 0, :][rest]
    return out


class BodyIndex:
    """KD-tree over body face centroids plus per-face data for pair queries."""

    def __init__(self, body: Mesh):
        if body.n_faces == 0:
            raise ContactError("body mesh has no faces")
        self.mesh = body
        self.triangles = body.vertices[body.faces]
        self.centroids = self.triangles.mean(axis=1)
        self.areas, self.normals = face_areas_normals(body.vertices, body.faces)
        self.tree = cKDTree(self.centroids)

    def update_pairs(self, positions: np.ndarray, k: int = 8) -> ContactPairs:
        """KNN over face centroids, exact closest point per candidate face,
        minimum wins; ties go to the lowest face index."""
        n = len(positions)
        k = min(k, len(self.centroids))
        _, idx = self.tree.query(positions, k=k)
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        if idx.shape[0] != n:
            idx = idx.reshape(n, -1)
        idx = np.sort(idx, axis=1)
        cand = self.triangles[idx]                       # (n, k, 3, 3)
        cp = closest_points_on_triangles(positions[:, None, :], cand)
        d2 = np.sum((positions[:, None, :] - cp) ** 2, axis=-1)
        sel = np.argmin(d2, axis=1)
        rows = np.arange(n)
        face = idx[rows, sel]
        point = cp[rows, sel]
        aw = self.areas[face]
        total = aw.sum()
        if total <= 0:
            raise ContactError("candidate faces have zero total area")
        return ContactPairs(rows.astype(np.int64), face, point,
                            self.normals[face], aw / total,
                            np.zeros(n))


def _nearest_on_segments(points: np.ndarray, p0: np.ndarray, seg: np.ndarray):
    """Per point: index of nearest segment and the closest point on it."""
    rel = points[:, None, :] - p0[None, :, :]
    seglen2 = np.einsum("bj,bj->b", seg, seg)
    t = np.clip(np.einsum("nbj,bj->nb", rel, seg) / seglen2, 0.0, 1.0)
    prox = p0[None] + t[..., None] * seg[None]
    d2 = np.sum((points[:, None, :] - prox) ** 2, axis=-1)
    b = np.argmin(d2, axis=1)
    return b, prox[np.arange(len(points)), b]


def _ray_mesh_hits(origins, dirs, body: BodyIndex, chunk: int = 64):
    """Facing hit with minimum |t| along each full line; t = nan if none."""
    tri = body.triangles
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    a0 = tri[:, 0]
    nrm = body.normals
    n = len(origins)
    best_t = np.full(n, np.nan)
    best_f = np.full(n, -1, dtype=np.int64)
    for s in range(0, n, chunk):
        o = origins[s:s + chunk]
        d = dirs[s:s + chunk]
        h = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum("fj,cfj->cf", e1, h)
        ok = np.abs(det) > 1e-14
        det_s = np.where(ok, det, 1.0)
        sv = o[:, None, :] - a0[None, :, :]
        u = np.einsum("cfj,cfj->cf", sv, h) / det_s
        q = np.cross(sv, e1[None, :, :])
        v = np.einsum("cj,cfj->cf", d, q) / det_s
        t = np.einsum("fj,cfj->cf", e2, q) / det_s
        inside = ok & (u >= -1e-9) & (v >= -1e-9) & (u + v <= 1 + 1e-9)
        facing = np.einsum("fj,cj->cf", nrm, d) < 0.0
        score = np.where(inside & facing, np.abs(t), np.inf)
        pick = np.argmin(score, axis=1)
        rows = np.arange(len(o))
        hit = np.isfinite(score[rows, pick])
        best_t[s:s + chunk][hit] = t[rows, pick][hit]
        best_f[s:s + chunk][hit] = pick[hit]
    return best_t, best_f


def bone_guided_pairs(positions: np.ndarray, frames: BoneFrames,
                      body: BodyIndex, k: int = 8) -> ContactPairs:
    """Initial pairs for a freshly transferred garment.

    Each vertex shoots a ray toward the axis of its nearest bone segment and
    attaches to the facing hit nearest to it; vertices with no usable ray or
    no facing hit fall back to the closest-point query.
    """
    positions = np.asarray(positions, dtype=np.float64)
    seg = frames.axes[:, 2] * frames.lengths[:, None]
    b_star, prox = _nearest_on_segments(positions, frames.origins, seg)

    v = positions - prox
    zax = frames.axes[b_star, 2]
    vperp = v - np.einsum("ij,ij->i", v, zax)[:, None] * zax
    norm = np.linalg.norm(vperp, axis=1)
    usable = norm > 1e-9

    pairs = body.update_pairs(positions, k=k)  # fallback, reused for fields
    if usable.any():
        dirs = -vperp[usable] / norm[usable, None]
        t, f = _ray_mesh_hits(positions[usable], dirs, body)
        hit = f >= 0
        rows = np.flatnonzero(usable)[hit]
        pairs.face[rows] = f[hit]
        pairs.point[rows] = positions[rows] + t[hit, None] * dirs[hit]
        pairs.normal[rows] = body.normals[f[hit]]
    n_fallback = int(len(positions) - len(rows)) if usable.any() else len(positions)
    if n_fallback:
        log.debug("bone-guided init fell back to nearest point for %d vertices",
                  n_fallback)
    aw = body.areas[pairs.face]
    pairs.area_weight = aw / aw.sum()
    return pairs


@dataclass
class FitRegion:
    label: str
    vertices: np.ndarray  # sorted garment vertex indices
    mask: np.ndarray      # (V,) bool

    def __len__(self) -> int:
        return len(self.vertices)


def build_fit_region(label: str, garment_points: np.ndarray,
                     weights: VertexBoneWeights, frames: BoneFrames,
                     skeleton: Skeleton,
                     torso_chain: tuple[str, ...] = TORSO_CHAIN) -> FitRegion:
    """Select the tightness-controlled vertex set from bone-frame bands.

    Waist: hips-frame z in [0, 1] and at least half the blend weight on
    {hips, spine}.  UpperTrunk: spine-frame z in [0, 1] and at least half
    the weight on the torso chain.  All: everything.
    """
    key = label.strip().lower().replace("-", "_")
    if key not in REGION_LABELS:
        raise ContactError(f"unknown fit region label {label!r}")
    n = len(garment_points)
    if key == "all":
        mask = np.ones(n, dtype=bool)
        return FitRegion("all", np.arange(n, dtype=np.int64), mask)

    hips = skeleton.index_of("hips")
    spine = skeleton.index_of("spine")

    def weight_on(bone_ids: set[int]) -> np.ndarray:
        sel = np.isin(weights.bone, sorted(bone_ids))
        return np.bincount(weights.vertex[sel], weights=weights.weight[sel],
                           minlength=n)

    mask = np.zeros(n, dtype=bool)
    if key in ("waist", "upper_trunk_and_waist"):
        z = frames.to_local(hips, garment_points)[:, 2]
        mask |= (z >= 0.0) & (z <= 1.0) & (weight_on({hips, spine}) >= 0.5)
    if key in ("upper_trunk", "upper_trunk_and_waist"):
        chain = {skeleton.index_of(nm) for nm in torso_chain
                 if nm in skeleton.names}
        if not chain:
            raise ContactError("no torso-chain bones present in the skeleton")
        z = frames.to_local(spine, garment_points)[:, 2]
        mask |= (z >= 0.0) & (z <= 1.0) & (weight_on(chain) >= 0.5)
    return FitRegion(key, np.flatnonzero(mask).astype(np.int64), mask)


def penetration_fractions(positions: np.ndarray, body: BodyIndex,
                          margin: float, k: int = 8) -> dict:
    """Fraction of vertices inside the body beyond the margin, measured
    against freshly built closest-point pairs."""
    pairs = body.update_pairs(positions, k=k)
    d = signed_distances(pairs, positions)
    n = len(d)
    return {
        "vertices": int(n),
        "margin": float(margin),
        "below_margin": float(np.count_nonzero(d < -margin) / n),
        "below_3x_margin": float(np.count_nonzero(d < -3.0 * margin) / n),
        "min_distance": float(d.min()),
    }


def tightness_gap(positions: np.ndarray, body: BodyIndex,
                  source_distances: np.ndarray, region_mask: np.ndarray,
                  k: int = 8) -> float:
    """Mean |d - d^s| over the fit region, with d from fresh pairs."""
    pairs = body.update_pairs(positions, k=k)
    d = signed_distances(pairs, positions)
    sel = region_mask[pairs.vertex]
    if not sel.any():
        return 0.0
    return float(np.mean(np.abs(d - source_distances[pairs.vertex])[sel]))
