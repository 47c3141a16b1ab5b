"""Scene files: OBJ meshes, skeleton/weights text, manifests, traces, reports.

All writers are atomic (temp file + rename) and deterministic; floats are
printed with 9 significant digits so unit-scale round trips stay under 1e-6.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh, build_edge_topology
from .skeleton import Bone, Skeleton, VertexBoneWeights


class SceneIOError(Exception):
    pass


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- OBJ

def save_obj(path: str, mesh: Mesh) -> None:
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    has_uv = mesh.uvs is not None
    if has_uv:
        for t in mesh.uvs:
            lines.append(f"vt {_fmt(t[0])} {_fmt(t[1])}")
        for f in mesh.faces:
            lines.append(f"f {f[0]+1}/{f[0]+1} {f[1]+1}/{f[1]+1} {f[2]+1}/{f[2]+1}")
    else:
        for f in mesh.faces:
            lines.append(f"f {f[0]+1} {f[1]+1} {f[2]+1}")
    _atomic_write(path, "\n".join(lines) + "\n")


def load_obj(path: str) -> Mesh:
    """Wavefront subset: v, vt, f (v, v/vt, v//vn, v/vt/vn); polygons are
    fan-triangulated.  UVs are kept only when every face corner maps vertex
    i to vt i, which is how this package writes them."""
    if not os.path.exists(path):
        raise SceneIOError(f"mesh file not found: {path}")
    verts: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[list[int]] = []
    uv_aligned = True
    with open(path) as f:
        for ln, raw in enumerate(f, start=1):
            s = raw.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            try:
                if parts[0] == "v":
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                elif parts[0] == "vt":
                    uvs.append([float(parts[1]), float(parts[2])])
                elif parts[0] == "f":
                    corners = []
                    for p in parts[1:]:
                        fields = p.split("/")
                        vi = int(fields[0])
                        vi = vi - 1 if vi > 0 else len(verts) + vi
                        ti = None
                        if len(fields) > 1 and fields[1]:
                            ti = int(fields[1])
                            ti = ti - 1 if ti > 0 else len(uvs) + ti
                        corners.append((vi, ti))
                        if ti is not None and ti != vi:
                            uv_aligned = False
                    for k in range(1, len(corners) - 1):
                        faces.append([corners[0][0], corners[k][0], corners[k + 1][0]])
            except (ValueError, IndexError) as e:
                raise SceneIOError(f"{path}:{ln}: bad OBJ record {s!r}") from e
    if not verts or not faces:
        raise SceneIOError(f"{path}: no geometry found")
    uv_arr = None
    if uvs and uv_aligned and len(uvs) == len(verts):
        uv_arr = np.asarray(uvs, dtype=np.float64)
    return Mesh(np.asarray(verts, dtype=np.float64),
                np.asarray(faces, dtype=np.int64), uv_arr)


# ---------------------------------------------------------------- skeleton

def save_skeleton(path: str, skeleton: Skeleton) -> None:
    r = skeleton.crotch_ref
    lines = [f"crotch_ref {_fmt(r[0])} {_fmt(r[1])} {_fmt(r[2])}"]
    for b in skeleton.bones:
        parent = "-" if b.parent is None else skeleton.bones[b.parent].name
        h, d = b.head, b.direction
        lines.append(
            f"bone {b.name} {parent} "
            f"{_fmt(h[0])} {_fmt(h[1])} {_fmt(h[2])} "
            f"{_fmt(d[0])} {_fmt(d[1])} {_fmt(d[2])}")
    _atomic_write(path, "\n".join(lines) + "\n")


def load_skeleton(path: str) -> Skeleton:
    if not os.path.exists(path):
        raise SceneIOError(f"skeleton file not found: {path}")
    crotch_ref = None
    bones: list[Bone] = []
    index: dict[str, int] = {}
    with open(path) as f:
        for ln, raw in enumerate(f, start=1):
            s = raw.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            try:
                if parts[0] == "crotch_ref":
                    crotch_ref = np.array([float(x) for x in parts[1:4]])
                elif parts[0] == "bone":
                    name, parent = parts[1], parts[2]
                    nums = [float(x) for x in parts[3:9]]
                    if parent == "-":
                        pidx = None
                    elif parent in index:
                        pidx = index[parent]
                    else:
                        raise SceneIOError(
                            f"{path}:{ln}: parent bone {parent!r} not defined "
                            f"before {name!r}")
                    bones.append(Bone(name, np.array(nums[:3]),
                                      np.array(nums[3:]), pidx))
                    index[name] = len(bones) - 1
                else:
                    raise SceneIOError(f"{path}:{ln}: unknown record {parts[0]!r}")
            except SceneIOError:
                raise
            except (ValueError, IndexError) as e:
                raise SceneIOError(f"{path}:{ln}: bad skeleton record {s!r}") from e
    if crotch_ref is None:
        raise SceneIOError(f"{path}: missing crotch_ref record")
    if not bones:
        raise SceneIOError(f"{path}: no bones")
    return Skeleton(bones, crotch_ref)


# ---------------------------------------------------------------- weights

def save_weights(path: str, weights: VertexBoneWeights,
                 skeleton: Skeleton) -> None:
    names = skeleton.names
    lines = [f"n_vertices {weights.n_vertices}"]
    order = np.argsort(weights.vertex, kind="stable")
    v = weights.vertex[order]
    b = weights.bone[order]
    w = weights.weight[order]
    starts = np.searchsorted(v, np.arange(weights.n_vertices))
    ends = np.searchsorted(v, np.arange(weights.n_vertices), side="right")
    for i in range(weights.n_vertices):
        entries = " ".join(f"{names[b[k]]}={_fmt(w[k])}"
                           for k in range(starts[i], ends[i]))
        lines.append(f"v {i} {entries}".rstrip())
    _atomic_write(path, "\n".join(lines) + "\n")


def load_weights(path: str, skeleton: Skeleton) -> VertexBoneWeights:
    if not os.path.exists(path):
        raise SceneIOError(f"weights file not found: {path}")
    name_to_idx = {n: i for i, n in enumerate(skeleton.names)}
    n_vertices = None
    vs: list[int] = []
    bs: list[int] = []
    ws: list[float] = []
    with open(path) as f:
        for ln, raw in enumerate(f, start=1):
            s = raw.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            try:
                if parts[0] == "n_vertices":
                    n_vertices = int(parts[1])
                elif parts[0] == "v":
                    vi = int(parts[1])
                    for entry in parts[2:]:
                        name, sep, val = entry.partition("=")
                        if not sep:
                            raise SceneIOError(
                                f"{path}:{ln}: bad weight entry {entry!r}")
                        if name not in name_to_idx:
                            raise SceneIOError(
                                f"{path}:{ln}: unknown bone {name!r}")
                        vs.append(vi)
                        bs.append(name_to_idx[name])
                        ws.append(float(val))
                else:
                    raise SceneIOError(f"{path}:{ln}: unknown record {parts[0]!r}")
            except SceneIOError:
                raise
            except (ValueError, IndexError) as e:
                raise SceneIOError(f"{path}:{ln}: bad weights record {s!r}") from e
    if n_vertices is None:
        raise SceneIOError(f"{path}: missing n_vertices record")
    return VertexBoneWeights(np.asarray(vs, dtype=np.int64),
                             np.asarray(bs, dtype=np.int64),
                             np.asarray(ws, dtype=np.float64), n_vertices)


# ---------------------------------------------------------------- traces / reports

def save_trace(path: str, trace: list[dict]) -> None:
    _atomic_write(path, "".join(
        json.dumps(rec, sort_keys=True) + "\n" for rec in trace))


def load_trace(path: str) -> list[dict]:
    if not os.path.exists(path):
        raise SceneIOError(f"trace file not found: {path}")
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def save_json(path: str, payload: dict) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_json(path: str) -> dict:
    if not os.path.exists(path):
        raise SceneIOError(f"file not found: {path}")
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------- scene bundles

_MANIFEST = "scene.json"


@dataclass
class SceneBundle:
    """Everything a refit run needs, as parsed objects."""

    source_garments: list[Mesh]
    fit_regions: list[str]
    source_avatar: Mesh
    target_avatar: Mesh
    source_skeleton: Skeleton
    target_skeleton: Skeleton
    source_skinning: VertexBoneWeights
    target_skinning: VertexBoneWeights | None = None
    params: object = None
    capsules: dict | None = field(default=None, repr=False)

    def validate(self) -> None:
        if self.source_skeleton.names != self.target_skeleton.names:
            raise SceneIOError(
                "source/target skeleton bone names disagree: "
                f"{self.source_skeleton.names} vs {self.target_skeleton.names}")
        if self.source_skinning.n_vertices != self.source_avatar.n_vertices:
            raise SceneIOError(
                f"source skinning covers {self.source_skinning.n_vertices} "
                f"vertices, avatar has {self.source_avatar.n_vertices}")
        if (self.target_skinning is not None
                and self.target_skinning.n_vertices != self.target_avatar.n_vertices):
            raise SceneIOError(
                f"target skinning covers {self.target_skinning.n_vertices} "
                f"vertices, avatar has {self.target_avatar.n_vertices}")
        for gi, g in enumerate(self.source_garments):
            topo = build_edge_topology(g.faces)
            if topo.nonmanifold:
                raise SceneIOError(
                    f"garment {gi} has {topo.nonmanifold} "
                    f"non-manifold edges")
        if len(self.fit_regions) != len(self.source_garments):
            raise SceneIOError("one fit-region label per garment required")


def save_scene(bundle: SceneBundle, out_dir: str) -> str:
    """Write the bundle to a directory; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    garment_files = []
    for i, g in enumerate(bundle.source_garments):
        name = f"garment_{i:02d}.obj"
        save_obj(os.path.join(out_dir, name), g)
        garment_files.append(name)
    save_obj(os.path.join(out_dir, "source_avatar.obj"), bundle.source_avatar)
    save_obj(os.path.join(out_dir, "target_avatar.obj"), bundle.target_avatar)
    save_skeleton(os.path.join(out_dir, "source.skel"), bundle.source_skeleton)
    save_skeleton(os.path.join(out_dir, "target.skel"), bundle.target_skeleton)
    save_weights(os.path.join(out_dir, "source.weights"),
                 bundle.source_skinning, bundle.source_skeleton)
    manifest = {
        "format": "garmfit-scene/1",
        "garments": garment_files,
        "fit_regions": list(bundle.fit_regions),
        "source_avatar": "source_avatar.obj",
        "target_avatar": "target_avatar.obj",
        "source_skeleton": "source.skel",
        "target_skeleton": "target.skel",
        "source_weights": "source.weights",
    }
    if bundle.target_skinning is not None:
        save_weights(os.path.join(out_dir, "target.weights"),
                     bundle.target_skinning, bundle.target_skeleton)
        manifest["target_weights"] = "target.weights"
    if bundle.params is not None:
        manifest["generator"] = bundle.params.to_dict()
    if bundle.capsules is not None:
        manifest["capsules"] = bundle.capsules
    path = os.path.join(out_dir, _MANIFEST)
    save_json(path, manifest)
    return path


def load_scene(scene_dir: str) -> SceneBundle:
    """Parse and cross-validate a scene directory."""
    manifest_path = os.path.join(scene_dir, _MANIFEST)
    if not os.path.exists(manifest_path):
        raise SceneIOError(f"scene manifest not found: {manifest_path}")
    m = load_json(manifest_path)

    def p(key_or_name):
        return os.path.join(scene_dir, key_or_name)

    src_skel = load_skeleton(p(m["source_skeleton"]))
    tgt_skel = load_skeleton(p(m["target_skeleton"]))
    bundle = SceneBundle(
        source_garments=[load_obj(p(g)) for g in m["garments"]],
        fit_regions=list(m.get("fit_regions", ["all"] * len(m["garments"]))),
        source_avatar=load_obj(p(m["source_avatar"])),
        target_avatar=load_obj(p(m["target_avatar"])),
        source_skeleton=src_skel,
        target_skeleton=tgt_skel,
        source_skinning=load_weights(p(m["source_weights"]), src_skel),
        target_skinning=(load_weights(p(m["target_weights"]), tgt_skel)
                         if "target_weights" in m else None),
        capsules=m.get("capsules"),
    )
    if "generator" in m:
        from .synth import SceneParams
        bundle.params = SceneParams.from_dict(m["generator"])
    bundle.validate()
    return bundle


def save_result(out_dir: str, mesh: Mesh, weights, skeleton: Skeleton,
                trace: list[dict], report: dict,
                prefix: str = "refit") -> dict:
    """Write the refit outputs; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "mesh": os.path.join(out_dir, f"{prefix}.obj"),
        "weights": os.path.join(out_dir, f"{prefix}.weights"),
        "trace": os.path.join(out_dir, f"{prefix}_trace.jsonl"),
        "report": os.path.join(out_dir, f"{prefix}_report.json"),
    }
    save_obj(paths["mesh"], mesh)
    save_weights(paths["weights"], weights, skeleton)
    save_trace(paths["trace"], trace)
    report = dict(report)
    report["final"] = trace[-1] if trace else None
    save_json(paths["report"], report)
    return paths
