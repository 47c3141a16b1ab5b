"""Triangle meshes and the discrete differential quantities the shape losses need.

Vertex positions are float64 world coordinates, faces index counter-clockwise
as seen from outside.  Everything derived from connectivity alone (edge
tables, hinge stencils, boundary loops) is built once per mesh and reused for
every evaluation at new positions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

log = logging.getLogger("garmfit")


class MeshError(ValueError):
    """A mesh violated a structural precondition (degenerate or non-manifold)."""


@dataclass
class Mesh:
    """Indexed triangle mesh with optional per-vertex UVs."""

    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be (V, 3)")
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.faces.size == 0:
            self.faces = self.faces.reshape(0, 3)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError("faces must be (F, 3)")
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise MeshError("face indices out of range")
        if self.uvs is not None:
            self.uvs = np.ascontiguousarray(self.uvs, dtype=np.float64)
            if self.uvs.shape != (len(self.vertices), 2):
                raise MeshError("uvs must be (V, 2), one per vertex")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "Mesh":
        return Mesh(self.vertices.copy(), self.faces.copy(),
                    None if self.uvs is None else self.uvs.copy())

    def bbox_diagonal(self) -> float:
        if not len(self.vertices):
            return 0.0
        ext = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(ext))


@dataclass
class EdgeTopology:
    """Undirected edge table.

    ``edges[e] = (lo, hi)`` with lo < hi.  Side 0 of an edge is the face whose
    winding contains the directed edge lo->hi, side 1 the face containing
    hi->lo.  Open sides hold -1.
    """

    edges: np.ndarray       # (E, 2) int
    edge_face: np.ndarray   # (E, 2) int
    opposite: np.ndarray    # (E, 2) int, vertex opposite the edge per side
    interior: np.ndarray    # (E,) bool
    nonmanifold: int        # edges with > 2 incident faces or repeated winding


def build_edge_topology(faces: np.ndarray, n_vertices: int | None = None) -> EdgeTopology:
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size == 0:
        z = np.zeros((0, 2), dtype=np.int64)
        return EdgeTopology(z, z.copy(), z.copy(), np.zeros(0, bool), 0)
    if n_vertices is None:
        n_vertices = int(faces.max()) + 1

    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    opp = np.concatenate([faces[:, 2], faces[:, 0], faces[:, 1]])
    fid = np.tile(np.arange(len(faces), dtype=np.int64), 3)

    lo = np.minimum(directed[:, 0], directed[:, 1])
    hi = np.maximum(directed[:, 0], directed[:, 1])
    if np.any(lo == hi):
        bad = fid[lo == hi][0]
        raise MeshError(f"face {bad} repeats a vertex")
    side = (directed[:, 0] != lo).astype(np.int64)  # 1 when winding runs hi->lo

    key = lo * np.int64(n_vertices) + hi
    uniq, count = np.unique(key, return_counts=True)

    E = len(uniq)
    edges = np.stack([uniq // n_vertices, uniq % n_vertices], axis=1)
    edge_face = np.full((E, 2), -1, dtype=np.int64)
    opposite = np.full((E, 2), -1, dtype=np.int64)

    eid = np.searchsorted(uniq, key)
    # first occurrence of each (edge, side) slot wins; a repeated slot means
    # two faces share the edge with the same winding, which is non-manifold
    slot = eid * 2 + side
    uslot, first, scount = np.unique(slot, return_index=True, return_counts=True)
    edge_face[uslot // 2, uslot % 2] = fid[first]
    opposite[uslot // 2, uslot % 2] = opp[first]
    dup = np.unique(uslot[scount > 1] // 2)
    nonmanifold = int(np.count_nonzero(count > 2)) + int(np.count_nonzero(count[dup] <= 2))
    interior = (edge_face >= 0).all(axis=1)
    return EdgeTopology(edges, edge_face, opposite, interior, nonmanifold)


def boundary_loops(faces: np.ndarray, n_vertices: int) -> list[np.ndarray]:
    """Ordered boundary loops, traversed in winding direction.

    Each loop is an int array of vertex indices, starting at the smallest
    index it contains.  Loops are sorted by that starting index.
    """
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size == 0:
        return []
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    key = directed[:, 0] * np.int64(n_vertices) + directed[:, 1]
    rev = directed[:, 1] * np.int64(n_vertices) + directed[:, 0]
    key_sorted = np.sort(key)
    has_reverse = key_sorted[np.searchsorted(key_sorted, rev).clip(max=len(key_sorted) - 1)] == rev
    boundary = directed[~has_reverse]
    if not len(boundary):
        return []

    succ = np.full(n_vertices, -1, dtype=np.int64)
    if len(np.unique(boundary[:, 0])) != len(boundary):
        raise MeshError("non-manifold boundary vertex (two outgoing boundary edges)")
    succ[boundary[:, 0]] = boundary[:, 1]

    loops = []
    remaining = set(boundary[:, 0].tolist())
    while remaining:
        start = min(remaining)
        loop = [start]
        remaining.discard(start)
        v = succ[start]
        while v != start:
            if v < 0 or v not in remaining and v != start:
                raise MeshError("boundary does not close into loops")
            loop.append(v)
            remaining.discard(v)
            v = succ[v]
        loops.append(np.array(loop, dtype=np.int64))
    loops.sort(key=lambda a: int(a[0]))
    return loops


def face_areas_normals(positions: np.ndarray, faces: np.ndarray):
    """Per-face area and unit normal.  Zero-area faces get a zero normal."""
    p0 = positions[faces[:, 0]]
    cross = np.cross(positions[faces[:, 1]] - p0, positions[faces[:, 2]] - p0)
    double = np.linalg.norm(cross, axis=1)
    areas = 0.5 * double
    normals = np.zeros_like(cross)
    ok = double > 0
    normals[ok] = cross[ok] / double[ok, None]
    return areas, normals


def _degenerate_faces(mesh: Mesh) -> np.ndarray:
    areas, _ = face_areas_normals(mesh.vertices, mesh.faces)
    scale = mesh.bbox_diagonal() or 1.0
    return np.flatnonzero(areas <= 1e-14 * scale * scale)


def compute_cotangent_weights(mesh: Mesh, topo: EdgeTopology | None = None) -> np.ndarray:
    """Clamped cotangent weight per undirected edge.

    c_ij = 1/2 * sum of cot(opposite angle) over the incident faces, one term
    for boundary edges, then clamped below at zero.  Raises on degenerate
    faces, which would make the angles meaningless.
    """
    bad = _degenerate_faces(mesh)
    if len(bad):
        shown = ", ".join(str(int(b)) for b in bad[:10])
        more = "" if len(bad) <= 10 else f" (+{len(bad) - 10} more)"
        raise MeshError(f"degenerate faces with zero area: {shown}{more}")
    if topo is None:
        topo = build_edge_topology(mesh.faces, mesh.n_vertices)

    pos = mesh.vertices
    total = np.zeros(len(topo.edges))
    for s in (0, 1):
        present = topo.opposite[:, s] >= 0
        k = topo.opposite[present, s]
        i = topo.edges[present, 0]
        j = topo.edges[present, 1]
        u = pos[i] - pos[k]
        v = pos[j] - pos[k]
        cross = np.linalg.norm(np.cross(u, v), axis=1)
        cot = np.einsum("ij,ij->i", u, v) / cross
        total[present] += cot
    return np.maximum(0.5 * total, 0.0)


def build_laplacian_matrix(n_vertices: int, edges: np.ndarray, cot: np.ndarray) -> sparse.csr_matrix:
    """Sparse operator with (L @ P)_i = sum_j c_ij (p_j - p_i)."""
    i, j = edges[:, 0], edges[:, 1]
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([j, i, i, j])
    vals = np.concatenate([cot, cot, -cot, -cot])
    L = sparse.coo_matrix((vals, (rows, cols)), shape=(n_vertices, n_vertices))
    return L.tocsr()


def laplacian_coordinates(positions: np.ndarray, L: sparse.csr_matrix) -> np.ndarray:
    return L @ positions


def normalize_laplacians(deltas: np.ndarray) -> np.ndarray:
    """Scale the field so the squared norms sum to one.

    An all-zero field is returned unchanged (nothing to normalize); callers
    treat that as a skip.
    """
    s = float(np.sqrt(np.sum(deltas * deltas)))
    if s == 0.0:
        log.warning("laplacian field is identically zero, normalization skipped")
        return deltas.copy()
    return deltas / s


def hinge_stencil(topo: EdgeTopology) -> np.ndarray:
    """(M, 4) int array (vi, vj, wing0, wing1) per interior edge.

    vi < vj; wing0 lies in the face whose winding runs vi->vj.
    """
    sel = topo.interior
    return np.stack([topo.edges[sel, 0], topo.edges[sel, 1],
                     topo.opposite[sel, 0], topo.opposite[sel, 1]], axis=1)


def hinge_angles(positions: np.ndarray, hinge: np.ndarray):
    """Signed dihedral angle per hinge, and a validity mask.

    Flat is 0, a convex ridge (wings folded away from the normals) is
    positive, mirroring flips the sign.  Hinges whose faces or edge collapse
    at the given positions are masked out.
    """
    xi = positions[hinge[:, 0]]
    xj = positions[hinge[:, 1]]
    xa = positions[hinge[:, 2]]
    xb = positions[hinge[:, 3]]
    e = xj - xi
    na = np.cross(e, xa - xi)
    nb = np.cross(xi - xj, xb - xj)
    elen = np.linalg.norm(e, axis=1)
    nalen = np.linalg.norm(na, axis=1)
    nblen = np.linalg.norm(nb, axis=1)
    valid = (elen > 1e-12) & (nalen > 1e-12) & (nblen > 1e-12)
    # guard the invalid lanes so the arithmetic stays finite
    elen_s = np.where(valid, elen, 1.0)
    nalen_s = np.where(valid, nalen, 1.0)
    nblen_s = np.where(valid, nblen, 1.0)
    nah = na / nalen_s[:, None]
    nbh = nb / nblen_s[:, None]
    sin = np.einsum("ij,ij->i", np.cross(nah, nbh), e / elen_s[:, None])
    cos = np.einsum("ij,ij->i", nah, nbh)
    theta = np.arctan2(sin, cos)
    return np.where(valid, theta, 0.0), valid


def hinge_angle_gradients(positions: np.ndarray, hinge: np.ndarray):
    """d(theta)/d(vertex) for the 4 stencil vertices of every hinge.

    Returns (theta, grads, valid) with grads shaped (M, 4, 3) ordered
    (vi, vj, wing0, wing1).  Invalid hinges get zero gradients.
    """
    xi = positions[hinge[:, 0]]
    xj = positions[hinge[:, 1]]
    xa = positions[hinge[:, 2]]
    xb = positions[hinge[:, 3]]
    e = xj - xi
    na = np.cross(e, xa - xi)
    nb = np.cross(xi - xj, xb - xj)
    elen = np.linalg.norm(e, axis=1)
    na2 = np.einsum("ij,ij->i", na, na)
    nb2 = np.einsum("ij,ij->i", nb, nb)
    valid = (elen > 1e-12) & (na2 > 1e-24) & (nb2 > 1e-24)
    elen_s = np.where(valid, elen, 1.0)
    na2_s = np.where(valid, na2, 1.0)
    nb2_s = np.where(valid, nb2, 1.0)

    nah = na / np.sqrt(na2_s)[:, None]
    nbh = nb / np.sqrt(nb2_s)[:, None]
    eh = e / elen_s[:, None]
    sin = np.einsum("ij,ij->i", np.cross(nah, nbh), eh)
    cos = np.einsum("ij,ij->i", nah, nbh)
    theta = np.arctan2(sin, cos)

    ga = na * (-elen_s / na2_s)[:, None]
    gb = nb * (-elen_s / nb2_s)[:, None]
    proj_ja = np.einsum("ij,ij->i", xj - xa, eh)
    proj_jb = np.einsum("ij,ij->i", xj - xb, eh)
    proj_ia = np.einsum("ij,ij->i", xi - xa, eh)
    proj_ib = np.einsum("ij,ij->i", xi - xb, eh)
    gi = na * (proj_ja / na2_s)[:, None] + nb * (proj_jb / nb2_s)[:, None]
    gj = -na * (proj_ia / na2_s)[:, None] - nb * (proj_ib / nb2_s)[:, None]

    grads = np.stack([gi, gj, ga, gb], axis=1)
    grads[~valid] = 0.0
    return np.where(valid, theta, 0.0), grads, valid


def dihedral_angles(mesh: Mesh, topo: EdgeTopology | None = None):
    """Signed dihedral per interior edge plus the hinge stencil used.

    Rejects non-manifold connectivity; degenerate faces are rejected too
    since their normals carry no angle.
    """
    if topo is None:
        topo = build_edge_topology(mesh.faces, mesh.n_vertices)
    if topo.nonmanifold:
        raise MeshError(f"{topo.nonmanifold} non-manifold edges, dihedrals undefined")
    bad = _degenerate_faces(mesh)
    if len(bad):
        raise MeshError(f"degenerate faces {bad[:10].tolist()} have no dihedral")
    hinge = hinge_stencil(topo)
    theta, valid = hinge_angles(mesh.vertices, hinge)
    if not valid.all():
        raise MeshError("degenerate hinge encountered")
    return theta, hinge


def boundary_corners(loops: list[np.ndarray]) -> np.ndarray:
    """(C, 3) consecutive vertex triples (v_i, v_i+1, v_i+2) around every loop."""
    out = []
    for loop in loops:
        m = len(loop)
        if m < 3:
            continue
        out.append(np.stack([loop, np.roll(loop, -1), np.roll(loop, -2)], axis=1))
    if not out:
        return np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(out)


def corner_cosines(positions: np.ndarray, corners: np.ndarray):
    """cos of the turn between consecutive boundary edges, with validity mask."""
    u = positions[corners[:, 1]] - positions[corners[:, 0]]
    w = positions[corners[:, 2]] - positions[corners[:, 1]]
    lu = np.linalg.norm(u, axis=1)
    lw = np.linalg.norm(w, axis=1)
    valid = (lu > 1e-12) & (lw > 1e-12)
    lu_s = np.where(valid, lu, 1.0)
    lw_s = np.where(valid, lw, 1.0)
    c = np.einsum("ij,ij->i", u, w) / (lu_s * lw_s)
    return np.where(valid, c, 0.0), valid


def corner_cosine_gradients(positions: np.ndarray, corners: np.ndarray):
    """(cos, grads, valid); grads is (C, 3, 3) over (v_i, v_i+1, v_i+2)."""
    u = positions[corners[:, 1]] - positions[corners[:, 0]]
    w = positions[corners[:, 2]] - positions[corners[:, 1]]
    lu = np.linalg.norm(u, axis=1)
    lw = np.linalg.norm(w, axis=1)
    valid = (lu > 1e-12) & (lw > 1e-12)
    lu_s = np.where(valid, lu, 1.0)[:, None]
    lw_s = np.where(valid, lw, 1.0)[:, None]
    uh = u / lu_s
    wh = w / lw_s
    c = np.einsum("ij,ij->i", uh, wh)
    dc_du = (wh - c[:, None] * uh) / lu_s
    dc_dw = (uh - c[:, None] * wh) / lw_s
    grads = np.stack([-dc_du, dc_du - dc_dw, dc_dw], axis=1)
    grads[~valid] = 0.0
    return np.where(valid, c, 0.0), grads, valid


def boundary_curvature_cosines(mesh: Mesh, loops: list[np.ndarray] | None = None):
    """Per-corner edge-turn cosines; the oracle example is a regular n-gon
    boundary giving cos(2*pi/n) everywhere."""
    if loops is None:
        loops = boundary_loops(mesh.faces, mesh.n_vertices)
    corners = boundary_corners(loops)
    cos, valid = corner_cosines(mesh.vertices, corners)
    if not valid.all():
        raise MeshError("zero-length boundary segment")
    return cos, corners


@dataclass
class DifferentialCache:
    """Source-side differential state reused by every target evaluation."""

    topology: EdgeTopology
    cot_weights: np.ndarray          # (E,) per undirected edge
    laplacian: sparse.csr_matrix
    vertex_laplacians: np.ndarray    # (V, 3) at the cached positions
    tilde_laplacians: np.ndarray     # normalized field
    laplacian_zero: bool
    hinge: np.ndarray                # (M, 4)
    dihedrals: np.ndarray            # (M,)
    hinge_weights: np.ndarray        # (M,) source edge length / total interior length
    corners: np.ndarray              # (C, 3)
    corner_cosines: np.ndarray       # (C,)
    corner_weights: np.ndarray       # (C,) source segment length / total boundary length
    face_areas: np.ndarray
    face_normals: np.ndarray
    boundary: list[np.ndarray]


def build_differential_cache(mesh: Mesh) -> DifferentialCache:
    topo = build_edge_topology(mesh.faces, mesh.n_vertices)
    if topo.nonmanifold:
        raise MeshError(f"{topo.nonmanifold} non-manifold edges")
    cot = compute_cotangent_weights(mesh, topo)
    L = build_laplacian_matrix(mesh.n_vertices, topo.edges, cot)
    deltas = laplacian_coordinates(mesh.vertices, L)
    zero = not np.any(deltas)
    tilde = normalize_laplacians(deltas)

    hinge = hinge_stencil(topo)
    theta, valid = hinge_angles(mesh.vertices, hinge)
    if not valid.all():
        raise MeshError("degenerate hinge in source mesh")
    hl = np.linalg.norm(mesh.vertices[hinge[:, 1]] - mesh.vertices[hinge[:, 0]], axis=1)
    hw = hl / hl.sum() if len(hl) and hl.sum() > 0 else np.zeros_like(hl)

    loops = boundary_loops(mesh.faces, mesh.n_vertices)
    corners = boundary_corners(loops)
    ccos, cvalid = corner_cosines(mesh.vertices, corners)
    if not cvalid.all():
        raise MeshError("zero-length boundary segment in source mesh")
    cl = np.linalg.norm(mesh.vertices[corners[:, 1]] - mesh.vertices[corners[:, 0]], axis=1) \
        if len(corners) else np.zeros(0)
    cw = cl / cl.sum() if len(cl) and cl.sum() > 0 else np.zeros_like(cl)

    areas, normals = face_areas_normals(mesh.vertices, mesh.faces)
    return DifferentialCache(
        topology=topo, cot_weights=cot, laplacian=L,
        vertex_laplacians=deltas, tilde_laplacians=tilde, laplacian_zero=zero,
        hinge=hinge, dihedrals=theta, hinge_weights=hw,
        corners=corners, corner_cosines=ccos, corner_weights=cw,
        face_areas=areas, face_normals=normals, boundary=loops,
    )
