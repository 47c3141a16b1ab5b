"""Garment initialization on a new body: weight inheritance and transfer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .config import RefitConfig
from .mesh import Mesh
from .skeleton import BoneBlendCoords, BoneFrames, Skeleton, VertexBoneWeights, blend

BRUTE_FORCE_LIMIT = 50_000


def nearest_vertex_indices(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Index of the closest reference point per query point.

    Ties go to the lowest reference index.  Small reference sets are scanned
    directly in chunks; large ones go through a KD-tree.
    """
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if len(ref) == 0:
        raise ValueError("empty reference point set")
    if len(ref) <= BRUTE_FORCE_LIMIT:
        out = np.empty(len(query), dtype=np.int64)
        # cap the distance matrix at ~40M floats
        chunk = max(1, int(40_000_000 // max(len(ref), 1)))
        for s in range(0, len(query), chunk):
            block = query[s:s + chunk]
            d2 = np.sum((block[:, None, :] - ref[None, :, :]) ** 2, axis=2)
            out[s:s + chunk] = np.argmin(d2, axis=1)
        return out
    tree = cKDTree(ref)
    _, idx = tree.query(query, k=1)
    return np.asarray(idx, dtype=np.int64)


def inherit_weights(garment_points: np.ndarray, body_points: np.ndarray,
                    body_weights: VertexBoneWeights,
                    prune_tol: float = 1e-4) -> VertexBoneWeights:
    """Copy each garment vertex's weights from its nearest body vertex,
    then prune tiny entries and renormalize."""
    nearest = nearest_vertex_indices(garment_points, body_points)

    counts = np.bincount(body_weights.vertex, minlength=body_weights.n_vertices)
    ptr = np.zeros(body_weights.n_vertices + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])

    take_counts = counts[nearest]
    starts = ptr[nearest]
    total = int(take_counts.sum())
    gv = np.repeat(np.arange(len(garment_points), dtype=np.int64), take_counts)
    # entry index ranges of each copied row, flattened
    offs = np.arange(total, dtype=np.int64) - np.repeat(
        np.cumsum(take_counts) - take_counts, take_counts)
    src = np.repeat(starts, take_counts) + offs

    raw = VertexBoneWeights(gv, body_weights.bone[src], body_weights.weight[src],
                            len(garment_points))
    return raw.normalized().pruned(prune_tol)


def transfer(coords: BoneBlendCoords, target_frames: BoneFrames) -> np.ndarray:
    """Decode stored coordinates against another skeleton's frames."""
    return blend(target_frames, coords)


def transfer_mesh(source: Mesh, coords: BoneBlendCoords,
                  target_frames: BoneFrames) -> Mesh:
    out = source.copy()
    out.vertices = transfer(coords, target_frames)
    return out


@dataclass
class RefitProblem:
    """Everything one garment refit needs.

    Source and target skeletons must list the same bones in the same order;
    the source skinning belongs to the source avatar's vertices.
    """

    source_garment: Mesh
    source_avatar: Mesh
    target_avatar: Mesh
    source_skeleton: Skeleton
    target_skeleton: Skeleton
    source_skinning: VertexBoneWeights
    fit_region: str = "waist"
    config: RefitConfig = field(default_factory=RefitConfig)

    def __post_init__(self):
        if self.source_skeleton.names != self.target_skeleton.names:
            raise ValueError("source and target skeletons disagree on bones")
        if self.source_skinning.n_vertices != self.source_avatar.n_vertices:
            raise ValueError("skinning weights do not match the source avatar")
