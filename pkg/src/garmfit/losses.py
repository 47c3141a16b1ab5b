"""Objective terms and their analytic position gradients.

Every term returns (value, gradient w.r.t. garment vertex positions); the
optimizer chains those through the decoder.  The two residual penalties act
on the residual arrays directly and are reported here so the composite total
can be recomposed from the report exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .config import LossWeights
from .contact import ContactPairs, FitRegion, signed_distances
from .mesh import (DifferentialCache, corner_cosine_gradients,
                   hinge_angle_gradients)

log = logging.getLogger("garmfit")


def _scatter3(grad: np.ndarray, idx: np.ndarray, values: np.ndarray) -> None:
    n = len(grad)
    for c in range(3):
        grad[:, c] += np.bincount(idx, weights=values[:, c], minlength=n)


@dataclass
class LossReport:
    total: float = 0.0
    separation: float = 0.0
    tightness: float = 0.0
    connect: float = 0.0
    laplacian: float = 0.0
    bending: float = 0.0
    boundary: float = 0.0
    coord_reg: float = 0.0     # squared z-residuals
    weight_reg: float = 0.0    # squared constrained weight residuals
    grad_norms: dict = field(default_factory=dict)
    penetration_count: int = 0
    min_distance: float = 0.0
    skipped_hinges: int = 0
    skipped_corners: int = 0

    def recompose(self, w: LossWeights) -> float:
        contact = self.separation + w.tightness_scale * self.tightness \
            + w.connect_scale * self.connect
        return (w.contact_scale * contact
                + w.laplacian_scale * self.laplacian
                + self.bending + self.boundary
                + self.coord_reg + w.weight_reg_scale * self.weight_reg)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "separation": self.separation,
            "tightness": self.tightness,
            "connect": self.connect,
            "laplacian": self.laplacian,
            "bending": self.bending,
            "boundary": self.boundary,
            "coord_reg": self.coord_reg,
            "weight_reg": self.weight_reg,
            "grad_norms": {k: float(v) for k, v in self.grad_norms.items()},
            "penetration_count": self.penetration_count,
            "min_distance": self.min_distance,
        }


def separation_term(pairs: ContactPairs, positions: np.ndarray, margin: float):
    """Sum of area-weighted squared penetrations past the margin."""
    d = signed_distances(pairs, positions)
    gap = np.maximum(margin - d, 0.0)
    value = float(np.sum(pairs.area_weight * gap * gap))
    grad = np.zeros_like(positions)
    coef = -2.0 * pairs.area_weight * gap
    _scatter3(grad, pairs.vertex, coef[:, None] * pairs.normal)
    return value, grad, d


def tightness_term(pairs: ContactPairs, positions: np.ndarray,
                   region_mask: np.ndarray, distances: np.ndarray | None = None):
    """Squared deviation of the signed distance from its source value,
    inside the fit-control region only."""
    d = signed_distances(pairs, positions) if distances is None else distances
    sel = region_mask[pairs.vertex]
    diff = np.where(sel, d - pairs.source_distance, 0.0)
    value = float(np.sum(diff * diff))
    grad = np.zeros_like(positions)
    _scatter3(grad, pairs.vertex, (2.0 * diff)[:, None] * pairs.normal)
    return value, grad


def laplacian_term(L: sparse.csr_matrix, tilde_source: np.ndarray,
                   positions: np.ndarray, source_zero: bool = False):
    """Match normalized Laplacian coordinate fields.

    The normalization makes the value scale-free in the target positions;
    the gradient accounts for the moving normalizer.
    """
    D = L @ positions
    s = float(np.sqrt(np.sum(D * D)))
    if s == 0.0 or source_zero:
        value = float(np.sum(tilde_source * tilde_source)) if not source_zero else 0.0
        return value, np.zeros_like(positions)
    Dh = D / s
    diff = Dh - tilde_source
    value = float(np.sum(diff * diff))
    # d value / d D = (2/s) (Dh <Dh,T> - T)  with T the source field
    dot = float(np.sum(Dh * tilde_source))
    gD = (2.0 / s) * (dot * Dh - tilde_source)
    grad = L @ gD  # L is symmetric
    return value, grad


def bending_term(cache: DifferentialCache, positions: np.ndarray):
    """Length-weighted squared hinge-angle deviation from the source."""
    hinge = cache.hinge
    if not len(hinge):
        return 0.0, np.zeros_like(positions), 0
    theta, grads, valid = hinge_angle_gradients(positions, hinge)
    diff = np.where(valid, theta - cache.dihedrals, 0.0)
    w = cache.hinge_weights
    value = float(np.sum(w * diff * diff))
    coef = (2.0 * w * diff)[:, None, None]
    contrib = coef * grads
    grad = np.zeros_like(positions)
    for slot in range(4):
        _scatter3(grad, hinge[:, slot], contrib[:, slot])
    skipped = int(np.count_nonzero(~valid))
    if skipped:
        log.debug("bending term skipped %d degenerate hinges", skipped)
    return value, grad, skipped


def boundary_term(cache: DifferentialCache, positions: np.ndarray):
    """Length-weighted squared change of boundary edge-turn cosines."""
    corners = cache.corners
    if not len(corners):
        return 0.0, np.zeros_like(positions), 0
    cos, grads, valid = corner_cosine_gradients(positions, corners)
    diff = np.where(valid, cos - cache.corner_cosines, 0.0)
    w = cache.corner_weights
    value = float(np.sum(w * diff * diff))
    coef = (2.0 * w * diff)[:, None, None]
    contrib = coef * grads
    grad = np.zeros_like(positions)
    for slot in range(3):
        _scatter3(grad, corners[:, slot], contrib[:, slot])
    skipped = int(np.count_nonzero(~valid))
    return value, grad, skipped


@dataclass
class ConnectPairs:
    """Distance constraints from active-layer vertices to fixed anchors on an
    already-refitted inner layer."""

    vertex: np.ndarray        # (N,) active garment vertex
    anchor: np.ndarray        # (N, 3) current inner-layer positions
    rest_length: np.ndarray   # (N,) source distances
    source_dir: np.ndarray    # (N, 3) unit source directions, the guard

    def __len__(self) -> int:
        return len(self.vertex)


def connect_term(pairs: ConnectPairs, positions: np.ndarray):
    """Squared deviation of inter-layer distances from their source values."""
    rel = positions[pairs.vertex] - pairs.anchor
    length = np.linalg.norm(rel, axis=1)
    ok = length > 1e-9
    # coincident points take the stored source direction
    dirs = np.where(ok[:, None], rel / np.where(ok, length, 1.0)[:, None],
                    pairs.source_dir)
    diff = length - pairs.rest_length
    value = float(np.sum(diff * diff))
    grad = np.zeros_like(positions)
    _scatter3(grad, pairs.vertex, (2.0 * diff)[:, None] * dirs)
    return value, grad


def residual_penalties(delta_coords: np.ndarray, constrained_dw: np.ndarray):
    """Squared z-coordinate residuals and squared constrained weight
    residuals, with gradients in their own spaces."""
    dz = delta_coords[:, 2]
    dz_val = float(np.sum(dz * dz))
    dw_val = float(np.sum(constrained_dw * constrained_dw))
    grad_dz = 2.0 * dz                 # w.r.t. delta z
    grad_dw = 2.0 * constrained_dw     # w.r.t. constrained weight residual
    return dz_val, dw_val, grad_dz, grad_dw


class Objective:
    """Bundles the frozen per-run state and evaluates the composite loss.

    ``evaluate`` returns the report plus the gradient w.r.t. positions;
    residual-penalty gradients are returned separately since they bypass
    the decode chain.
    """

    def __init__(self, cache: DifferentialCache, weights: LossWeights,
                 margin: float, region: FitRegion,
                 connect: ConnectPairs | None = None):
        if margin <= 0:
            raise ValueError("penetration margin must be positive")
        self.cache = cache
        self.weights = weights
        self.margin = margin
        self.region = region
        self.connect = connect
        if len(region.vertices) == 0:
            log.warning("fit region %r matched no vertices; tightness is idle",
                        region.label)

    def evaluate(self, positions: np.ndarray, pairs: ContactPairs,
                 delta_coords: np.ndarray, constrained_dw: np.ndarray,
                 want_grad: bool = True):
        w = self.weights
        rep = LossReport()

        sep, g_sep, d = separation_term(pairs, positions, self.margin)
        tight, g_tight = tightness_term(pairs, positions, self.region.mask, d)
        lap, g_lap = laplacian_term(self.cache.laplacian,
                                    self.cache.tilde_laplacians, positions,
                                    self.cache.laplacian_zero)
        bend, g_bend, sk_h = bending_term(self.cache, positions)
        bound, g_bound, sk_c = boundary_term(self.cache, positions)
        if self.connect is not None and len(self.connect):
            conn, g_conn = connect_term(self.connect, positions)
        else:
            conn, g_conn = 0.0, None
        dz_val, dw_val, g_dz, g_dw = residual_penalties(delta_coords, constrained_dw)

        rep.separation, rep.tightness, rep.connect = sep, tight, conn
        rep.laplacian, rep.bending, rep.boundary = lap, bend, bound
        rep.coord_reg, rep.weight_reg = dz_val, dw_val
        rep.skipped_hinges, rep.skipped_corners = sk_h, sk_c
        rep.penetration_count = int(np.count_nonzero(d < 0.0))
        rep.min_distance = float(d.min()) if len(d) else 0.0
        rep.total = rep.recompose(w)

        grad = w.contact_scale * (g_sep + w.tightness_scale * g_tight) \
            + w.laplacian_scale * g_lap + g_bend + g_bound
        if g_conn is not None:
            grad += w.contact_scale * w.connect_scale * g_conn
        rep.grad_norms = {
            "separation": float(np.linalg.norm(g_sep)),
            "tightness": float(np.linalg.norm(g_tight)),
            "laplacian": float(np.linalg.norm(g_lap)),
            "bending": float(np.linalg.norm(g_bend)),
            "boundary": float(np.linalg.norm(g_bound)),
            "connect": 0.0 if g_conn is None else float(np.linalg.norm(g_conn)),
            "total": float(np.linalg.norm(grad)),
        }
        # residual-space penalty gradients: dz feeds the z-coordinate slots,
        # dw feeds the constrained weight residuals (chained by the caller)
        return rep, grad, g_dz, w.weight_reg_scale * g_dw
