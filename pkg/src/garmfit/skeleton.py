"""Bone hierarchies, per-bone orthonormal frames, and bone-local coordinates.

A garment vertex is stored, per influencing bone, as coordinates in that
bone's frame divided by the bone length.  Blending the per-bone
reconstructions with convex weights gives the world position back; the whole
representation rides along with rigid motions and uniform rescaling of the
skeleton.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FALLBACK_TOL = 1e-6


class SkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class Bone:
    """One bone: world head position plus a direction vector whose norm is
    the bone length."""

    name: str
    head: np.ndarray
    direction: np.ndarray
    parent: int | None

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.direction))

    @property
    def tail(self) -> np.ndarray:
        return self.head + self.direction


@dataclass
class Skeleton:
    bones: list[Bone]
    crotch_ref: np.ndarray  # world vector seeding the root frame x-axis

    def __post_init__(self):
        self.crotch_ref = np.asarray(self.crotch_ref, dtype=np.float64).reshape(3)
        roots = [i for i, b in enumerate(self.bones) if b.parent is None]
        if len(roots) != 1:
            raise SkeletonError(f"expected exactly one root bone, found {len(roots)}")
        for i, b in enumerate(self.bones):
            if b.parent is not None and not (0 <= b.parent < i):
                raise SkeletonError(
                    f"bone {i} ({b.name}) must come after its parent")
            if b.length <= 0:
                raise SkeletonError(f"bone {i} ({b.name}) has zero length")
        names = [b.name for b in self.bones]
        if len(set(names)) != len(names):
            raise SkeletonError("bone names must be unique")

    @property
    def root_index(self) -> int:
        return next(i for i, b in enumerate(self.bones) if b.parent is None)

    @property
    def names(self) -> list[str]:
        return [b.name for b in self.bones]

    def index_of(self, name: str) -> int:
        for i, b in enumerate(self.bones):
            if b.name == name:
                return i
        raise SkeletonError(f"no bone named {name!r}")

    def __len__(self) -> int:
        return len(self.bones)

    def heads(self) -> np.ndarray:
        return np.array([b.head for b in self.bones], dtype=np.float64)

    def directions(self) -> np.ndarray:
        return np.array([b.direction for b in self.bones], dtype=np.float64)


@dataclass
class BoneFrames:
    """Per-bone orthonormal frame: rows of axes[b] are (x, y, z)."""

    origins: np.ndarray  # (B, 3) bone heads
    axes: np.ndarray     # (B, 3, 3)
    lengths: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.origins)

    def to_local(self, bone, points: np.ndarray) -> np.ndarray:
        """Map world points into bone-local coordinates, divided by length.

        ``bone`` may be a scalar index or an array aligned with ``points``.
        """
        points = np.asarray(points, dtype=np.float64)
        if np.isscalar(bone) or np.ndim(bone) == 0:
            rel = points - self.origins[bone]
            return (rel @ self.axes[bone].T) / self.lengths[bone]
        bone = np.asarray(bone)
        rel = points - self.origins[bone]
        return np.einsum("ejk,ek->ej", self.axes[bone], rel) / self.lengths[bone, None]

    def to_world(self, bone, coords: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_local`."""
        coords = np.asarray(coords, dtype=np.float64)
        if np.isscalar(bone) or np.ndim(bone) == 0:
            return self.origins[bone] + self.lengths[bone] * (coords @ self.axes[bone])
        bone = np.asarray(bone)
        world = np.einsum("ej,ejk->ek", coords, self.axes[bone])
        return self.origins[bone] + self.lengths[bone, None] * world


def _orthonormalize(v: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, float]:
    """Component of v orthogonal to unit z, and its norm before scaling."""
    perp = v - np.dot(v, z) * z
    n = float(np.linalg.norm(perp))
    return perp, n


def build_frames(skeleton: Skeleton, crotch_ref: np.ndarray | None = None) -> BoneFrames:
    """Construct every bone frame in hierarchy order.

    The root takes z along its own direction and x from the crotch reference
    vector, orthogonalized against z.  A child takes z along its direction
    and carries the parent x-axis over by projection; when the parent x-axis
    is within 1e-6 of parallel to the new z it falls back to the parent
    z-axis, signed so that sign(-x_p . z) with sign(0) = +1 keeps the carried
    axis pointing away from the parent x.  y closes a right-handed frame.
    """
    if crotch_ref is None:
        crotch_ref = skeleton.crotch_ref
    crotch_ref = np.asarray(crotch_ref, dtype=np.float64).reshape(3)

    n = len(skeleton.bones)
    origins = np.zeros((n, 3))
    axes = np.zeros((n, 3, 3))
    lengths = np.zeros(n)

    for i, bone in enumerate(skeleton.bones):
        origins[i] = bone.head
        lengths[i] = bone.length
        z = np.asarray(bone.direction, dtype=np.float64) / lengths[i]
        if bone.parent is None:
            seed, norm = _orthonormalize(crotch_ref, z)
            if norm < FALLBACK_TOL:
                raise SkeletonError(
                    "crotch reference is parallel to the root bone")
            x = seed / norm
        else:
            xp = axes[bone.parent, 0]
            seed, norm = _orthonormalize(xp, z)
            if norm >= FALLBACK_TOL:
                x = seed / norm
            else:
                sign = -1.0 if float(np.dot(xp, z)) > 0.0 else 1.0
                seed, norm = _orthonormalize(sign * axes[bone.parent, 2], z)
                if norm == 0.0:
                    raise SkeletonError(
                        f"cannot seed a frame for bone {i} ({bone.name})")
                x = seed / norm
        y = np.cross(z, x)
        axes[i, 0] = x
        axes[i, 1] = y
        axes[i, 2] = z
    return BoneFrames(origins, axes, lengths)


@dataclass
class VertexBoneWeights:
    """Sparse per-vertex bone weights in flat (entry) layout.

    Entries are sorted by vertex then bone; every vertex must own at least
    one entry once normalized.
    """

    vertex: np.ndarray   # (E,) int
    bone: np.ndarray     # (E,) int
    weight: np.ndarray   # (E,) float
    n_vertices: int

    def __post_init__(self):
        self.vertex = np.asarray(self.vertex, dtype=np.int64)
        self.bone = np.asarray(self.bone, dtype=np.int64)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        order = np.lexsort((self.bone, self.vertex))
        if not np.array_equal(order, np.arange(len(order))):
            self.vertex = self.vertex[order]
            self.bone = self.bone[order]
            self.weight = self.weight[order]

    def __len__(self) -> int:
        return len(self.vertex)

    def sums(self) -> np.ndarray:
        return np.bincount(self.vertex, weights=self.weight, minlength=self.n_vertices)

    def normalized(self) -> "VertexBoneWeights":
        s = self.sums()
        covered = np.bincount(self.vertex, minlength=self.n_vertices) > 0
        if not covered.all():
            missing = int(np.flatnonzero(~covered)[0])
            raise SkeletonError(f"vertex {missing} has no bone weights")
        if np.any(s[covered] <= 0):
            bad = int(np.flatnonzero(covered & (s <= 0))[0])
            raise SkeletonError(f"vertex {bad} has all-zero bone weights")
        return VertexBoneWeights(self.vertex, self.bone, self.weight / s[self.vertex],
                                 self.n_vertices)

    def pruned(self, tol: float = 1e-4) -> "VertexBoneWeights":
        """Drop entries with weight <= tol, keeping at least the largest
        entry per vertex, then renormalize."""
        keep = self.weight > tol
        # never orphan a vertex: retain its best entry
        best = np.full(self.n_vertices, -1, dtype=np.int64)
        order = np.argsort(self.weight, kind="stable")
        best[self.vertex[order]] = order  # last write is the max weight
        keep[best[best >= 0]] = True
        kept = VertexBoneWeights(self.vertex[keep], self.bone[keep],
                                 self.weight[keep], self.n_vertices)
        return kept.normalized()


@dataclass
class BoneBlendCoords:
    """Bone-local coordinates plus blend weights, one entry per
    (vertex, influencing bone) pair, vertex-sorted."""

    vertex: np.ndarray   # (E,)
    bone: np.ndarray     # (E,)
    coords: np.ndarray   # (E, 3)
    weight: np.ndarray   # (E,)
    n_vertices: int

    def __len__(self) -> int:
        return len(self.vertex)

    def weights_view(self) -> VertexBoneWeights:
        return VertexBoneWeights(self.vertex, self.bone, self.weight, self.n_vertices)


def encode_garment(points: np.ndarray, frames: BoneFrames,
                   weights: VertexBoneWeights) -> BoneBlendCoords:
    """Store every vertex in the frames of its weighted bones."""
    points = np.asarray(points, dtype=np.float64)
    weights = weights.normalized()
    coords = frames.to_local(weights.bone, points[weights.vertex])
    return BoneBlendCoords(weights.vertex.copy(), weights.bone.copy(), coords,
                           weights.weight.copy(), len(points))


def blend(frames: BoneFrames, coords: BoneBlendCoords,
          coord_offsets: np.ndarray | None = None) -> np.ndarray:
    """Weighted sum of per-bone reconstructions, one position per vertex.

    Weight sums are checked against 1 to 1e-6; optimization paths that
    renormalize on the fly use the decoder in the optimizer module instead.
    """
    s = np.bincount(coords.vertex, weights=coords.weight, minlength=coords.n_vertices)
    if np.max(np.abs(s - 1.0)) > 1e-6:
        bad = int(np.argmax(np.abs(s - 1.0)))
        raise SkeletonError(f"blend weights of vertex {bad} sum to {s[bad]:.8f}")
    local = coords.coords if coord_offsets is None else coords.coords + coord_offsets
    recon = frames.to_world(coords.bone, local)
    out = np.zeros((coords.n_vertices, 3))
    w = coords.weight
    for c in range(3):
        out[:, c] = np.bincount(coords.vertex, weights=w * recon[:, c],
                                minlength=coords.n_vertices)
    return out


def transform_skeleton(skeleton: Skeleton, R: np.ndarray,
                       t: np.ndarray | None = None,
                       scale: float = 1.0) -> Skeleton:
    """Apply x -> scale * R x + t to every bone; the crotch reference is a
    direction and only rotates."""
    R = np.asarray(R, dtype=np.float64)
    t = np.zeros(3) if t is None else np.asarray(t, dtype=np.float64)
    bones = [Bone(b.name, scale * (R @ b.head) + t, scale * (R @ b.direction),
                  b.parent) for b in skeleton.bones]
    return Skeleton(bones, R @ skeleton.crotch_ref)
