"""Resolution hierarchy and orchestration: coarse proxies, layered garments,
and per-frame sequences.

The proxy is built by UV-grid clustering per chart.  Every fine vertex is
anchored to one coarse triangle with barycentric coordinates plus a detail
offset expressed in that triangle's own (edge, edge, scaled-normal) basis,
so the down/up round trip at the source is exact and detail co-scales with
the coarse triangles under deformation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .contact import BodyIndex
from .losses import ConnectPairs
from .mesh import Mesh, build_edge_topology
from .optim import RefitState, build_state, run
from .skeleton import VertexBoneWeights, blend, encode_garment
from .transfer import RefitProblem, nearest_vertex_indices

log = logging.getLogger("garmfit")


class HierarchyError(ValueError):
    pass


@dataclass
class SamplingMap:
    """Fine-to-coarse correspondence produced by :func:`downsample`."""

    coarse: Mesh
    cluster_of: np.ndarray   # (Vf,) coarse vertex per fine vertex
    anchor_face: np.ndarray  # (Vf,) coarse face per fine vertex
    anchor_bary: np.ndarray  # (Vf, 3)
    detail: np.ndarray       # (Vf, 3) coefficients in the face basis


def _face_bases(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """(F, 3, 3) basis per face, columns (e1, e2, n_hat * sqrt(2 area)).

    The basis scales linearly with the triangle, so stored detail
    coefficients reproduce uniformly scaled detail on uniformly scaled
    geometry.  Degenerate faces fall back to an orthonormal frame.
    """
    p0 = positions[faces[:, 0]]
    e1 = positions[faces[:, 1]] - p0
    e2 = positions[faces[:, 2]] - p0
    n = np.cross(e1, e2)
    a = np.linalg.norm(n, axis=1)
    bad = a <= 1e-14
    if bad.any():
        # arbitrary stable frame for collapsed faces
        e1 = e1.copy()
        e2 = e2.copy()
        n = n.copy()
        e1[bad] = np.array([1.0, 0.0, 0.0])
        e2[bad] = np.array([0.0, 1.0, 0.0])
        n[bad] = np.array([0.0, 0.0, 1.0])
        a = np.where(bad, 1.0, a)
    scaled_n = n / a[:, None] * np.sqrt(a)[:, None]
    return np.stack([e1, e2, scaled_n], axis=2)


def _uv_barycentric(p: np.ndarray, tri: np.ndarray):
    """2D barycentric coordinates of p in tri, elementwise over leading axes."""
    v0, v1, v2 = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    a = v1 - v0
    b = v2 - v0
    denom = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    ok = np.abs(denom) > 1e-15
    denom_s = np.where(ok, denom, 1.0)
    r = p - v0
    l1 = (r[..., 0] * b[..., 1] - r[..., 1] * b[..., 0]) / denom_s
    l2 = (a[..., 0] * r[..., 1] - a[..., 1] * r[..., 0]) / denom_s
    l0 = 1.0 - l1 - l2
    return np.stack([l0, l1, l2], axis=-1), ok


def _clamped_barycentric_3d(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Least-squares barycentric coordinates of 3D points, clamped convex."""
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    r = points - tri[:, 0]
    a11 = np.einsum("ij,ij->i", e1, e1)
    a12 = np.einsum("ij,ij->i", e1, e2)
    a22 = np.einsum("ij,ij->i", e2, e2)
    b1 = np.einsum("ij,ij->i", e1, r)
    b2 = np.einsum("ij,ij->i", e2, r)
    det = a11 * a22 - a12 * a12
    ok = det > 1e-20
    det_s = np.where(ok, det, 1.0)
    l1 = np.where(ok, (a22 * b1 - a12 * b2) / det_s, 0.0)
    l2 = np.where(ok, (a11 * b2 - a12 * b1) / det_s, 0.0)
    bary = np.stack([1.0 - l1 - l2, l1, l2], axis=1)
    bary = np.clip(bary, 0.0, None)
    s = bary.sum(axis=1, keepdims=True)
    s[s == 0] = 1.0
    return bary / s


def _charts(mesh: Mesh) -> np.ndarray:
    """Connected-component label per vertex."""
    if mesh.n_faces == 0:
        return np.zeros(mesh.n_vertices, dtype=np.int64)
    i = np.concatenate([mesh.faces[:, 0], mesh.faces[:, 1], mesh.faces[:, 2]])
    j = np.concatenate([mesh.faces[:, 1], mesh.faces[:, 2], mesh.faces[:, 0]])
    adj = coo_matrix((np.ones(len(i)), (i, j)),
                     shape=(mesh.n_vertices, mesh.n_vertices))
    _, labels = connected_components(adj, directed=False)
    return labels.astype(np.int64)


def downsample(mesh: Mesh, target_count: int) -> SamplingMap:
    """Cluster vertices on a per-chart UV grid and re-triangulate.

    Charts whose grid would produce fewer than 3 clusters are kept at full
    resolution.  Raises when the mesh carries no UVs.
    """
    if mesh.uvs is None:
        raise HierarchyError("cannot build a proxy without UVs")
    if target_count < 3:
        raise HierarchyError("proxy target must be at least 3 vertices")

    labels = _charts(mesh)
    n_charts = int(labels.max()) + 1 if len(labels) else 0
    cluster_of = np.full(mesh.n_vertices, -1, dtype=np.int64)
    next_id = 0
    for chart in range(n_charts):
        sel = np.flatnonzero(labels == chart)
        share = max(3, int(round(target_count * len(sel) / mesh.n_vertices)))
        uv = mesh.uvs[sel]
        lo = uv.min(axis=0)
        ext = uv.max(axis=0) - lo
        ext = np.maximum(ext, 1e-12)
        aspect = ext[0] / ext[1]
        nu = max(1, int(round(np.sqrt(share * aspect))))
        nv = max(1, int(round(share / nu)))
        iu = np.minimum((uv[:, 0] - lo[0]) / ext[0] * nu, nu - 1e-9).astype(np.int64)
        iv = np.minimum((uv[:, 1] - lo[1]) / ext[1] * nv, nv - 1e-9).astype(np.int64)
        cid = iu * nv + iv
        uniq, local = np.unique(cid, return_inverse=True)
        if len(uniq) < 3 or len(sel) <= share:
            # full resolution for this chart
            cluster_of[sel] = next_id + np.arange(len(sel))
            next_id += len(sel)
        else:
            cluster_of[sel] = next_id + local
            next_id += len(uniq)

    counts = np.bincount(cluster_of, minlength=next_id).astype(np.float64)
    coarse_pos = np.zeros((next_id, 3))
    coarse_uv = np.zeros((next_id, 2))
    for c in range(3):
        coarse_pos[:, c] = np.bincount(cluster_of, weights=mesh.vertices[:, c],
                                       minlength=next_id) / counts
    for c in range(2):
        coarse_uv[:, c] = np.bincount(cluster_of, weights=mesh.uvs[:, c],
                                      minlength=next_id) / counts

    mapped = cluster_of[mesh.faces]
    distinct = (mapped[:, 0] != mapped[:, 1]) & (mapped[:, 1] != mapped[:, 2]) \
        & (mapped[:, 0] != mapped[:, 2])
    tri = mapped[distinct]
    key = np.sort(tri, axis=1)
    _, first = np.unique(key[:, 0] * next_id * next_id + key[:, 1] * next_id
                         + key[:, 2], return_index=True)
    coarse_faces = tri[np.sort(first)]
    if not len(coarse_faces):
        raise HierarchyError("proxy collapsed to no faces; raise the target count")

    coarse = Mesh(coarse_pos, coarse_faces, coarse_uv)
    anchor_face, anchor_bary = _anchor_fine_vertices(mesh, coarse)
    bases = _face_bases(coarse.vertices, coarse.faces)
    anchors = np.einsum("vj,vjk->vk", anchor_bary,
                        coarse.vertices[coarse.faces[anchor_face]])
    detail = np.linalg.solve(bases[anchor_face],
                             (mesh.vertices - anchors)[..., None])[..., 0]
    return SamplingMap(coarse, cluster_of, anchor_face, anchor_bary, detail)


def _anchor_fine_vertices(fine: Mesh, coarse: Mesh):
    """Choose a coarse face and barycentric coords per fine vertex.

    UV containment wins where the chart is clean; vertices that land in no
    candidate (seam bands, concave gaps) anchor to the closest coarse
    triangle in 3D with clamped coordinates.
    """
    from scipy.spatial import cKDTree

    fc = coarse.uvs[coarse.faces]                     # (F, 3, 2)
    spans = fc.max(axis=1) - fc.min(axis=1)
    chart_diag = float(np.linalg.norm(coarse.uvs.max(axis=0) - coarse.uvs.min(axis=0)))
    wrap = np.linalg.norm(spans, axis=1) > 0.5 * max(chart_diag, 1e-12)

    centroids = fc.mean(axis=1)
    tree = cKDTree(centroids)
    k = min(16, coarse.n_faces)
    _, cand = tree.query(fine.uvs, k=k)
    cand = np.atleast_2d(np.asarray(cand, dtype=np.int64))
    if cand.shape[0] != fine.n_vertices:
        cand = cand.reshape(fine.n_vertices, -1)

    bary, ok = _uv_barycentric(fine.uvs[:, None, :], fc[cand])
    usable = ok & ~wrap[cand] & (bary.min(axis=2) >= -1e-9)
    has = usable.any(axis=1)
    pick = np.argmax(usable, axis=1)
    rows = np.arange(fine.n_vertices)

    anchor_face = np.zeros(fine.n_vertices, dtype=np.int64)
    anchor_bary = np.zeros((fine.n_vertices, 3))
    anchor_face[has] = cand[rows[has], pick[has]]
    b = np.clip(bary[rows[has], pick[has]], 0.0, None)
    anchor_bary[has] = b / b.sum(axis=1, keepdims=True)

    miss = ~has
    if miss.any():
        idx3d = BodyIndex(coarse)
        pairs = idx3d.update_pairs(fine.vertices[miss], k=min(12, coarse.n_faces))
        anchor_face[miss] = pairs.face
        tri = coarse.vertices[coarse.faces[pairs.face]]
        anchor_bary[miss] = _clamped_barycentric_3d(pairs.point, tri)
        log.debug("anchored %d fine vertices through the 3D fallback",
                  int(miss.sum()))
    return anchor_face, anchor_bary


def upsample(sampling: SamplingMap, coarse_positions: np.ndarray) -> np.ndarray:
    """Fine positions from deformed coarse positions plus carried detail."""
    faces = sampling.coarse.faces
    anchors = np.einsum("vj,vjk->vk", sampling.anchor_bary,
                        coarse_positions[faces[sampling.anchor_face]])
    bases = _face_bases(coarse_positions, faces)[sampling.anchor_face]
    return anchors + np.einsum("vkj,vj->vk", bases, sampling.detail)


def mean_edge_length(mesh: Mesh) -> float:
    topo = build_edge_topology(mesh.faces, mesh.n_vertices)
    if not len(topo.edges):
        return 0.0
    d = mesh.vertices[topo.edges[:, 1]] - mesh.vertices[topo.edges[:, 0]]
    return float(np.mean(np.linalg.norm(d, axis=1)))


@dataclass
class LayerConnections:
    """Stitch pairs between one layer and the layer just inside it.

    Rest lengths come from source geometry once, at plan construction, and
    are never recomputed.
    """

    inner: np.ndarray        # (P,) vertex indices into the inner layer
    outer: np.ndarray        # (P,) vertex indices into the outer layer
    rest_length: np.ndarray  # (P,) source distances
    source_dir: np.ndarray   # (P, 3) unit inner->outer at source

    def __len__(self) -> int:
        return len(self.inner)

    def pairs(self, inner_positions: np.ndarray) -> ConnectPairs:
        """Loss-ready pairs anchored at the inner layer's current shape."""
        return ConnectPairs(
            vertex=self.outer.copy(),
            anchor=inner_positions[self.inner].copy(),
            rest_length=self.rest_length.copy(),
            source_dir=self.source_dir.copy(),
        )


def detect_connections(outer: Mesh, inner: Mesh,
                       threshold: float) -> LayerConnections | None:
    """Outer vertices paired with their nearest inner vertex when the
    source-pose distance is under the threshold."""
    nearest = nearest_vertex_indices(outer.vertices, inner.vertices)
    rel = outer.vertices - inner.vertices[nearest]
    dist = np.linalg.norm(rel, axis=1)
    keep = dist < threshold
    if not keep.any():
        return None
    d = dist[keep]
    dirs = np.where(d[:, None] > 1e-12, rel[keep] / np.maximum(d, 1e-12)[:, None],
                    np.array([0.0, 0.0, 1.0]))
    return LayerConnections(
        inner=nearest[keep].astype(np.int64),
        outer=np.flatnonzero(keep).astype(np.int64),
        rest_length=d,
        source_dir=dirs,
    )


@dataclass
class RefitResult:
    mesh: Mesh
    weights: VertexBoneWeights
    trace: list
    init_positions: np.ndarray
    state: RefitState
    sampling: SamplingMap | None = None


def _coarse_connect(pairs: ConnectPairs | None,
                    cluster_of: np.ndarray) -> ConnectPairs | None:
    """Map fine stitch pairs onto proxy vertices (duplicates are harmless,
    the loss sums over pairs)."""
    if pairs is None:
        return None
    return ConnectPairs(
        vertex=cluster_of[pairs.vertex],
        anchor=pairs.anchor.copy(),
        rest_length=pairs.rest_length.copy(),
        source_dir=pairs.source_dir.copy(),
    )


def run_coarse_to_fine(problem: RefitProblem, collision: Mesh | None = None,
                       connect: ConnectPairs | None = None) -> RefitResult:
    """Refine a coarse proxy first, then warm-start the full garment.

    The fine stage re-encodes the upsampled mesh against the target frames
    as its new baseline, so residuals restart at zero around the coarse
    solution.  Falls back to one single-resolution run when so configured
    or when the garment has no UVs.
    """
    cfg = problem.config
    fine = problem.source_garment
    single = cfg.mode == "single" or fine.uvs is None
    if cfg.mode != "single" and fine.uvs is None:
        log.warning("garment has no UVs; running single-resolution")

    trace: list = []
    sampling = None
    warm_positions = None
    if not single:
        sampling = downsample(fine, cfg.coarse_size(fine.n_vertices))
        coarse_problem = replace(problem, source_garment=sampling.coarse)
        cstate = build_state(sampling.coarse, coarse_problem, collision,
                             _coarse_connect(connect, sampling.cluster_of))
        cpos, ctrace = run(cstate, cfg.coarse_iterations, cfg.learning_rate)
        for rec in ctrace:
            rec["stage"] = "coarse"
        trace.extend(ctrace)
        warm_positions = upsample(sampling, cpos)

    state = build_state(fine, problem, collision, connect,
                        warm_start=warm_positions)
    if warm_positions is None:
        init_positions = state.initial_positions.copy()
    else:
        # report the raw transfer, not the warm start the fine stage sees
        raw = encode_garment(fine.vertices, state.source_frames, state.weights)
        init_positions = blend(state.target_frames, raw)
    iterations = cfg.iterations if single else cfg.fine_iterations
    lr = cfg.learning_rate if single else cfg.fine_learning_rate
    pos, ftrace = run(state, iterations, lr)
    for rec in ftrace:
        rec["stage"] = "single" if single else "fine"
    trace.extend(ftrace)

    out = fine.copy()
    out.vertices = pos
    return RefitResult(out, state.final_weights(), trace, init_positions,
                       state, sampling)


def combine_meshes(a: Mesh, b: Mesh) -> Mesh:
    verts = np.concatenate([a.vertices, b.vertices])
    faces = np.concatenate([a.faces, b.faces + a.n_vertices])
    return Mesh(verts, faces, None)


@dataclass
class LayerPlan:
    """Garment layers ordered innermost first, with fit labels and the
    stitch pairs tying each layer to the one inside it (entry i connects
    layers[i] to layers[i-1]; entry 0 is always None)."""

    layers: list[Mesh]
    labels: list[str]
    connections: list[LayerConnections | None]

    def __post_init__(self):
        if len(self.layers) != len(self.labels):
            raise HierarchyError("one fit label per layer required")
        if len(self.connections) != len(self.layers):
            raise HierarchyError("one connection record per layer required")
        if not self.layers:
            raise HierarchyError("no layers")
        if self.connections[0] is not None:
            raise HierarchyError("innermost layer cannot hold connections")
        for conn in self.connections:
            if conn is not None and np.any(conn.rest_length < 0.0):
                raise HierarchyError("negative source stitch distance")


def build_layer_plan(layers: list[Mesh], labels: list[str],
                     connect_factor: float = 1.5) -> LayerPlan:
    """Detect stitch pairs between adjacent layers at source pose; a pair
    forms where an outer vertex sits within connect_factor mean edge
    lengths of the inner layer."""
    connections: list[LayerConnections | None] = [None]
    for inner, outer in zip(layers, layers[1:]):
        threshold = connect_factor * 0.5 * (mean_edge_length(inner)
                                            + mean_edge_length(outer))
        connections.append(detect_connections(outer, inner, threshold))
    return LayerPlan(list(layers), list(labels), connections)


def run_multilayer(plan: LayerPlan, problem: RefitProblem) -> list[RefitResult]:
    """Refit layers inside out; each refined layer joins the collision set
    and anchors the stitch constraints of the next one."""
    collision = problem.target_avatar
    results: list[RefitResult] = []
    for i, (mesh, label) in enumerate(zip(plan.layers, plan.labels)):
        sub = replace(problem, source_garment=mesh, fit_region=label)
        conn = plan.connections[i]
        pairs = conn.pairs(results[-1].mesh.vertices) if conn is not None else None
        res = run_coarse_to_fine(sub, collision=collision, connect=pairs)
        results.append(res)
        collision = combine_meshes(collision, res.mesh)
    return results


def run_sequence(problems: list[RefitProblem]) -> list[dict]:
    """Refit every frame independently; failures are reported per frame."""
    out = []
    for f, prob in enumerate(problems):
        try:
            res = run_coarse_to_fine(prob)
            out.append({"frame": f, "result": res, "error": None})
        except Exception as exc:  # per-frame isolation
            log.error("frame %d failed: %s", f, exc)
            out.append({"frame": f, "result": None, "error": str(exc)})
    return out
