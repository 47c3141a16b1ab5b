"""Residual-space optimization.

Residuals live per (vertex, bone) entry: a 3-vector added to the stored
bone-local coordinates and a raw weight residual squashed through
clamp*tanh before perturbing the blend weights.  The decoder renormalizes
the perturbed weights, so decoded blends always use convex weights.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RefitConfig
from .contact import (BodyIndex, ContactPairs, FitRegion, bone_guided_pairs,
                      build_fit_region)
from .losses import ConnectPairs, LossReport, Objective
from .mesh import DifferentialCache, Mesh, build_differential_cache
from .skeleton import (BoneBlendCoords, BoneFrames, VertexBoneWeights, blend,
                       build_frames, encode_garment)
from .transfer import RefitProblem, inherit_weights

log = logging.getLogger("garmfit")


class OptimizationError(RuntimeError):
    pass


@dataclass
class ResidualSet:
    delta_coords: np.ndarray  # (E, 3)
    raw_weight: np.ndarray    # (E,)

    @staticmethod
    def zeros(n_entries: int) -> "ResidualSet":
        return ResidualSet(np.zeros((n_entries, 3)), np.zeros(n_entries))

    def copy(self) -> "ResidualSet":
        return ResidualSet(self.delta_coords.copy(), self.raw_weight.copy())


def constrain_weight_residual(raw: np.ndarray, clamp: float) -> np.ndarray:
    """Map unbounded raw residuals into (-clamp, clamp)."""
    return clamp * np.tanh(raw)


@dataclass
class DecodeResult:
    positions: np.ndarray      # (V, 3)
    entry_weight: np.ndarray   # (E,) renormalized blend weights
    recon: np.ndarray          # (E, 3) per-bone reconstructions
    tanh_raw: np.ndarray       # (E,)
    perturbed_sum: np.ndarray  # (V,) normalizer before division
    constrained_dw: np.ndarray  # (E,) clamp * tanh(raw)


def decode(coords: BoneBlendCoords, residuals: ResidualSet, frames: BoneFrames,
           clamp: float) -> DecodeResult:
    th = np.tanh(residuals.raw_weight)
    dw = clamp * th
    perturbed = coords.weight + dw
    s = np.bincount(coords.vertex, weights=perturbed, minlength=coords.n_vertices)
    if np.any(s <= 1e-6):
        bad = int(np.flatnonzero(s <= 1e-6)[0])
        raise OptimizationError(f"perturbed weights of vertex {bad} collapsed")
    wt = perturbed / s[coords.vertex]
    recon = frames.to_world(coords.bone, coords.coords + residuals.delta_coords)
    positions = np.zeros((coords.n_vertices, 3))
    for c in range(3):
        positions[:, c] = np.bincount(coords.vertex, weights=wt * recon[:, c],
                                      minlength=coords.n_vertices)
    return DecodeResult(positions, wt, recon, th, s, dw)


def chain_gradients(coords: BoneBlendCoords, frames: BoneFrames,
                    dec: DecodeResult, grad_positions: np.ndarray,
                    clamp: float):
    """Pull a position gradient back onto the residual arrays."""
    gv = grad_positions[coords.vertex]                      # (E, 3)
    scale = (dec.entry_weight * frames.lengths[coords.bone])[:, None]
    grad_delta = scale * np.einsum("ejk,ek->ej", frames.axes[coords.bone], gv)

    q = np.einsum("ej,ej->e", gv, dec.recon)
    mean = np.bincount(coords.vertex, weights=dec.entry_weight * q,
                       minlength=coords.n_vertices)
    grad_dw = (q - mean[coords.vertex]) / dec.perturbed_sum[coords.vertex]
    grad_raw = grad_dw * clamp * (1.0 - dec.tanh_raw ** 2)
    return grad_delta, grad_raw


class AdamW:
    """Decoupled-weight-decay adaptive stepper with the max-normalizer
    variant; numpy arrays updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, amsgrad: bool = True):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.amsgrad = amsgrad
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.vmax = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if not np.all(np.isfinite(g)):
                bad = np.argwhere(~np.isfinite(g))[0]
                raise OptimizationError(
                    f"non-finite gradient at residual index {tuple(bad)}")
            m = self.m[i]
            v = self.v[i]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if self.amsgrad:
                np.maximum(self.vmax[i], v, out=self.vmax[i])
                denom = np.sqrt(self.vmax[i] / c2) + self.eps
            else:
                denom = np.sqrt(v / c2) + self.eps
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / denom


@dataclass
class RefitState:
    """Everything one optimization loop touches."""

    garment: Mesh                  # source-side garment this state encodes
    coords: BoneBlendCoords
    residuals: ResidualSet
    source_frames: BoneFrames
    target_frames: BoneFrames
    weights: VertexBoneWeights     # inherited blend weights (baseline)
    cache: DifferentialCache
    body: BodyIndex
    objective: Objective
    region: FitRegion
    pairs: ContactPairs
    source_distances: np.ndarray   # (V,) d^s per garment vertex
    margin: float
    config: RefitConfig
    initial_positions: np.ndarray = None
    trace: list = field(default_factory=list)

    def decode(self) -> DecodeResult:
        return decode(self.coords, self.residuals, self.target_frames,
                      self.config.weights.weight_clamp)

    def final_weights(self) -> VertexBoneWeights:
        dec = self.decode()
        return VertexBoneWeights(self.coords.vertex.copy(), self.coords.bone.copy(),
                                 dec.entry_weight.copy(), self.coords.n_vertices)


def build_state(garment: Mesh, problem: RefitProblem,
                collision: Mesh | None = None,
                connect: ConnectPairs | None = None,
                warm_start: np.ndarray | None = None) -> RefitState:
    """Assemble the optimization state for one garment (or proxy) mesh.

    With ``warm_start`` the given positions become the new zero-residual
    baseline: they are encoded against the target frames and the first
    contact pairs come from the plain nearest-point query (the garment is
    already near the body).  Otherwise the baseline is the raw transfer and
    pairs are bone-guided.
    """
    cfg = problem.config
    source_frames = build_frames(problem.source_skeleton)
    target_frames = build_frames(problem.target_skeleton)

    weights = inherit_weights(garment.vertices, problem.source_avatar.vertices,
                              problem.source_skinning, cfg.prune_tol)
    cache = build_differential_cache(garment)

    source_body = BodyIndex(problem.source_avatar)
    source_pairs = source_body.update_pairs(garment.vertices, cfg.contact_knn)
    source_d = np.einsum("ij,ij->i",
                         source_pairs.normal,
                         garment.vertices - source_pairs.point)

    region = build_fit_region(problem.fit_region, garment.vertices, weights,
                              source_frames, problem.source_skeleton)

    margin = cfg.weights.penetration_margin
    if margin is None:
        margin = cfg.margin_scale * problem.target_avatar.bbox_diagonal()
    body = BodyIndex(collision if collision is not None else problem.target_avatar)
    objective = Objective(cache, cfg.weights, margin, region, connect)

    if warm_start is None:
        coords = encode_garment(garment.vertices, source_frames, weights)
        init_positions = blend(target_frames, coords)
        pairs = bone_guided_pairs(init_positions, target_frames, body,
                                  cfg.contact_knn)
    else:
        coords = encode_garment(warm_start, target_frames, weights)
        init_positions = np.asarray(warm_start, dtype=np.float64)
        pairs = body.update_pairs(init_positions, cfg.contact_knn)
    pairs.source_distance = source_d[pairs.vertex]

    return RefitState(
        garment=garment, coords=coords,
        residuals=ResidualSet.zeros(len(coords)),
        source_frames=source_frames, target_frames=target_frames,
        weights=weights, cache=cache, body=body, objective=objective,
        region=region, pairs=pairs, source_distances=source_d,
        margin=margin, config=cfg, initial_positions=init_positions,
    )


def _trace_record(it: int, rep: LossReport, dec: DecodeResult,
                  coords: BoneBlendCoords, wall: float, deterministic: bool) -> dict:
    wsum = np.bincount(coords.vertex, weights=dec.entry_weight,
                       minlength=coords.n_vertices)
    rec = {"iteration": it}
    rec.update(rep.to_dict())
    rec["max_abs_weight_residual"] = float(np.max(np.abs(dec.constrained_dw))) \
        if len(dec.constrained_dw) else 0.0
    rec["weight_sum_error"] = float(np.max(np.abs(wsum - 1.0)))
    rec["wall_time"] = 0.0 if deterministic else wall
    return rec


def run(state: RefitState, iterations: int | None = None,
        lr: float | None = None) -> tuple[np.ndarray, list[dict]]:
    """Optimize the residuals in place; returns final positions and trace."""
    cfg = state.config
    iterations = cfg.iterations if iterations is None else iterations
    lr = cfg.learning_rate if lr is None else lr
    clamp = cfg.weights.weight_clamp
    every = cfg.pair_update_every
    log_every = max(1, cfg.log_every)

    opt = AdamW([state.residuals.delta_coords, state.residuals.raw_weight], lr=lr)
    t0 = time.perf_counter()
    positions = None
    for it in range(iterations + 1):
        dec = state.decode()
        positions = dec.positions
        if every and it and it % every == 0 and it < iterations:
            state.pairs = state.body.update_pairs(positions, cfg.contact_knn)
            state.pairs.source_distance = state.source_distances[state.pairs.vertex]
        rep, gpos, g_dz, g_dw = state.objective.evaluate(
            positions, state.pairs, state.residuals.delta_coords,
            dec.constrained_dw)
        if it % log_every == 0 or it == iterations:
            state.trace.append(_trace_record(
                it, rep, dec, state.coords,
                time.perf_counter() - t0, cfg.deterministic))
        if it == iterations:
            break
        grad_delta, grad_raw = chain_gradients(
            state.coords, state.target_frames, dec, gpos, clamp)
        grad_delta[:, 2] += g_dz
        grad_raw += g_dw * clamp * (1.0 - dec.tanh_raw ** 2)
        opt.step([grad_delta, grad_raw])
    return positions, state.trace


def displacement_magnitudes(initial: np.ndarray,
                            final: np.ndarray) -> np.ndarray:
    """Per-vertex net displacement ||final - initial||.

    Bone frames are orthonormal, so this norm is the same whether the offset
    is read in world space or rotated into any bone's frame; the spread
    statistic compares the fields the two parameterizations produce."""
    return np.linalg.norm(final - initial, axis=1)


def dominant_bones(coords: BoneBlendCoords) -> np.ndarray:
    """Index of the highest-weighted bone per vertex."""
    order = np.argsort(coords.weight, kind="stable")
    dom = np.zeros(coords.n_vertices, dtype=np.int64)
    dom[coords.vertex[order]] = coords.bone[order]  # last write = max weight
    return dom


def spread_statistic(r: np.ndarray) -> dict:
    """Interquartile range of r / median(r)."""
    med = float(np.median(r))
    ratio = r / max(med, 1e-30)
    q1, q3 = np.percentile(ratio, [25.0, 75.0])
    return {"median": med, "iqr_ratio": float(q3 - q1),
            "q1": float(q1), "q3": float(q3)}


def benchmark_global_offsets(state: RefitState, iterations: int,
                             lr: float | None = None) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """Reference optimizer over raw world-space vertex offsets.

    Same objective and stepper; the representation is the only change.
    Residual penalties do not exist here (there are no bone residuals), so
    their report entries stay zero.
    """
    cfg = state.config
    lr = cfg.learning_rate if lr is None else lr
    base = blend(state.target_frames, state.coords)
    offsets = np.zeros_like(base)
    no_delta = np.zeros((0, 3))
    no_dw = np.zeros(0)
    opt = AdamW([offsets], lr=lr)
    trace = []
    t0 = time.perf_counter()
    log_every = max(1, cfg.log_every)
    pairs = state.pairs
    for it in range(iterations + 1):
        positions = base + offsets
        if cfg.pair_update_every and it and it % cfg.pair_update_every == 0 \
                and it < iterations:
            pairs = state.body.update_pairs(positions, cfg.contact_knn)
            pairs.source_distance = state.source_distances[pairs.vertex]
        rep, gpos, _, _ = state.objective.evaluate(
            positions, pairs, no_delta, no_dw)
        if it % log_every == 0 or it == iterations:
            rec = {"iteration": it}
            rec.update(rep.to_dict())
            rec["wall_time"] = 0.0 if cfg.deterministic else time.perf_counter() - t0
            trace.append(rec)
        if it == iterations:
            break
        opt.step([gpos])
    return base + offsets, offsets, trace
