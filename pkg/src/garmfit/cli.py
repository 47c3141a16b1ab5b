"""Command-line entry points.

Subcommands: gen-scene, refit, refit-multilayer, refit-sequence,
bench-conditioning, verify.  Failures print one machine-readable JSON
record to stderr and exit 1; argparse usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile

import numpy as np

from .config import RefitConfig
from .contact import BodyIndex, penetration_fractions, tightness_gap
from .mesh import Mesh, build_differential_cache, build_edge_topology
from .multires import (build_layer_plan, combine_meshes, downsample,
                       run_coarse_to_fine, run_multilayer, run_sequence,
                       upsample)
from .optim import (benchmark_global_offsets, build_state,
                    displacement_magnitudes, dominant_bones, run,
                    spread_statistic)
from .sceneio import (SceneBundle, SceneIOError, load_obj, load_scene,
                      load_skeleton, load_weights, save_json, save_obj,
                      save_result, save_scene, save_skeleton, save_trace,
                      save_weights)
from .skeleton import blend, build_frames, encode_garment, transform_skeleton
from .synth import (generate_scene, sequence_scene_params,
                    standard_scene_params, two_layer_scene_params)
from .transfer import RefitProblem, inherit_weights

log = logging.getLogger("garmfit")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("schedule overrides")
    g.add_argument("--config", help="JSON config file; flags below override it")
    g.add_argument("--iterations", type=int)
    g.add_argument("--coarse-iterations", type=int)
    g.add_argument("--fine-iterations", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--fine-learning-rate", type=float)
    g.add_argument("--pair-update-every", type=int)
    g.add_argument("--contact-knn", type=int)
    g.add_argument("--margin-scale", type=float)
    g.add_argument("--coarse-target", type=int)
    g.add_argument("--mode", choices=["single", "coarse-to-fine"])
    g.add_argument("--log-every", type=int)
    g.add_argument("--connect-factor", type=float)
    g.add_argument("--threads", type=int)
    g.add_argument("--non-deterministic", action="store_true",
                   help="record real wall times in traces")


_OVERRIDES = ("iterations", "coarse_iterations", "fine_iterations",
              "learning_rate", "fine_learning_rate", "pair_update_every",
              "contact_knn", "margin_scale", "coarse_target", "mode",
              "log_every", "connect_factor", "threads")


def _config_from_args(args) -> RefitConfig:
    cfg = RefitConfig.load(args.config) if args.config else RefitConfig()
    for name in _OVERRIDES:
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    if getattr(args, "non_deterministic", False):
        cfg.deterministic = False
    return cfg


def _limit_threads(cfg: RefitConfig):
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=cfg.threads or 1)
    except ImportError:
        return None


def _problem(bundle: SceneBundle, cfg: RefitConfig, garment_index: int,
             fit_region: str | None) -> RefitProblem:
    if not 0 <= garment_index < len(bundle.source_garments):
        raise SceneIOError(
            f"garment index {garment_index} out of range "
            f"(scene has {len(bundle.source_garments)})")
    return RefitProblem(
        source_garment=bundle.source_garments[garment_index],
        source_avatar=bundle.source_avatar,
        target_avatar=bundle.target_avatar,
        source_skeleton=bundle.source_skeleton,
        target_skeleton=bundle.target_skeleton,
        source_skinning=bundle.source_skinning,
        fit_region=fit_region or bundle.fit_regions[garment_index],
        config=cfg,
    )


def _refit_report(result, problem: RefitProblem, collision: Mesh | None = None) -> dict:
    state = result.state
    body = state.body if collision is None else BodyIndex(collision)
    pen = penetration_fractions(result.mesh.vertices, body, state.margin,
                                problem.config.contact_knn)
    fit = {
        "region": state.region.label,
        "region_vertices": int(len(state.region)),
        "gap_initial": tightness_gap(result.init_positions, state.body,
                                     state.source_distances, state.region.mask,
                                     problem.config.contact_knn),
        "gap_final": tightness_gap(result.mesh.vertices, state.body,
                                   state.source_distances, state.region.mask,
                                   problem.config.contact_knn),
    }
    return {
        "n_vertices": int(result.mesh.n_vertices),
        "n_faces": int(result.mesh.n_faces),
        "mode": problem.config.mode,
        "margin": float(state.margin),
        "penetration": pen,
        "fit_style": fit,
    }


def cmd_gen_scene(args) -> int:
    if args.preset == "sequence":
        frames = sequence_scene_params(args.seed, args.frames)
        paths = []
        for f, params in enumerate(frames):
            if args.resolution:
                params.avatar_resolution = args.resolution
            bundle = generate_scene(params)
            d = os.path.join(args.out, f"frame_{f:02d}")
            save_scene(bundle, d)
            paths.append(d)
        save_json(os.path.join(args.out, "sequence.json"),
                  {"frames": [os.path.basename(p) for p in paths]})
        print(f"wrote {len(paths)} frame scenes under {args.out}")
        return 0
    if args.preset == "standard":
        params = standard_scene_params(args.seed)
    elif args.preset == "two-layer":
        params = two_layer_scene_params(args.seed)
    else:
        raise SceneIOError(f"unknown preset {args.preset!r}")
    if args.resolution:
        params.avatar_resolution = args.resolution
    bundle = generate_scene(params)
    manifest = save_scene(bundle, args.out)
    print(f"wrote scene manifest {manifest}")
    return 0


def cmd_refit(args) -> int:
    cfg = _config_from_args(args)
    bundle = load_scene(args.scene)
    problem = _problem(bundle, cfg, args.garment, args.fit_region)
    with _limit_threads(cfg) or _null_ctx():
        result = run_coarse_to_fine(problem)
    report = _refit_report(result, problem)
    paths = save_result(args.out, result.mesh, result.weights,
                        problem.target_skeleton, result.trace, report)
    if args.dump_stages:
        init = problem.source_garment.copy()
        init.vertices = result.init_positions
        save_obj(os.path.join(args.out, "stage_init.obj"), init)
        if result.sampling is not None:
            save_obj(os.path.join(args.out, "stage_coarse.obj"),
                     result.sampling.coarse)
    print(f"refit complete: {paths['mesh']}")
    print(f"  penetration below -margin: "
          f"{report['penetration']['below_margin']:.4%}")
    return 0


def cmd_refit_multilayer(args) -> int:
    cfg = _config_from_args(args)
    bundle = load_scene(args.scene)
    if len(bundle.source_garments) < 2:
        raise SceneIOError("multilayer refit needs a scene with >= 2 garments")
    plan = build_layer_plan(bundle.source_garments, bundle.fit_regions,
                            cfg.connect_factor)
    problem = _problem(bundle, cfg, 0, None)
    with _limit_threads(cfg) or _null_ctx():
        results = run_multilayer(plan, problem)

    collision = bundle.target_avatar
    summary = {"layers": []}
    for i, res in enumerate(results):
        sub = _problem(bundle, cfg, i, None)
        rep = _refit_report(res, sub, collision)
        conn = plan.connections[i]
        if conn is not None:
            inner_pos = results[i - 1].mesh.vertices
            lt = np.linalg.norm(res.mesh.vertices[conn.outer]
                                - inner_pos[conn.inner], axis=1)
            mean_ls = float(conn.rest_length.mean())
            rep["connections"] = {
                "count": int(len(conn)),
                "mean_source_length": mean_ls,
                "max_abs_error": float(np.max(np.abs(lt - conn.rest_length))),
                "max_abs_error_over_mean_source": float(
                    np.max(np.abs(lt - conn.rest_length)) / max(mean_ls, 1e-30)),
            }
        save_result(args.out, res.mesh, res.weights, problem.target_skeleton,
                    res.trace, rep, prefix=f"layer_{i:02d}")
        summary["layers"].append(rep)
        collision = combine_meshes(collision, res.mesh)
    save_json(os.path.join(args.out, "multilayer_report.json"), summary)
    print(f"refit {len(results)} layers into {args.out}")
    return 0


def cmd_refit_sequence(args) -> int:
    cfg = _config_from_args(args)
    scene_dirs = list(args.scenes)
    if len(scene_dirs) == 1:
        seq = os.path.join(scene_dirs[0], "sequence.json")
        if os.path.exists(seq):
            with open(seq) as f:
                frames = json.load(f)["frames"]
            scene_dirs = [os.path.join(scene_dirs[0], fr) for fr in frames]
    problems = []
    for d in scene_dirs:
        bundle = load_scene(d)
        problems.append(_problem(bundle, cfg, args.garment, args.fit_region))
    with _limit_threads(cfg) or _null_ctx():
        outputs = run_sequence(problems)
    statuses = []
    for rec in outputs:
        f = rec["frame"]
        if rec["error"] is not None:
            statuses.append({"frame": f, "error": rec["error"]})
            continue
        res = rec["result"]
        rep = _refit_report(res, problems[f])
        save_result(args.out, res.mesh, res.weights,
                    problems[f].target_skeleton, res.trace, rep,
                    prefix=f"frame_{f:02d}")
        statuses.append({"frame": f, "error": None,
                         "penetration": rep["penetration"]})
    save_json(os.path.join(args.out, "sequence_report.json"),
              {"frames": statuses})
    failed = [s for s in statuses if s.get("error")]
    print(f"refit {len(statuses) - len(failed)}/{len(statuses)} frames")
    return 1 if failed else 0


def cmd_bench_conditioning(args) -> int:
    cfg = _config_from_args(args)
    cfg.mode = "single"
    bundle = load_scene(args.scene)
    problem = _problem(bundle, cfg, args.garment, args.fit_region)
    iters = args.iterations if args.iterations else cfg.iterations

    with _limit_threads(cfg) or _null_ctx():
        local_state = build_state(problem.source_garment, problem)
        local_pos, local_trace = run(local_state, iters, cfg.learning_rate)
        r_local = displacement_magnitudes(local_state.initial_positions,
                                          local_pos)

        global_state = build_state(problem.source_garment, problem)
        _, offsets, global_trace = benchmark_global_offsets(global_state, iters)
        r_global = np.linalg.norm(offsets, axis=1)

    # per-bone medians so the histogram can be split by subproblem
    dom = dominant_bones(local_state.coords)
    names = problem.target_skeleton.names
    by_bone = {}
    for b in np.unique(dom):
        sel = dom == b
        by_bone[names[b]] = {"count": int(sel.sum()),
                             "median": float(np.median(r_local[sel]))}
    stats = {
        "iterations": iters,
        "bone_local": spread_statistic(r_local),
        "global_offsets": spread_statistic(r_global),
        "bone_local_by_dominant_bone": by_bone,
    }
    stats["iqr_ratio_smaller"] = bool(
        stats["bone_local"]["iqr_ratio"] < stats["global_offsets"]["iqr_ratio"])
    os.makedirs(args.out, exist_ok=True)
    save_trace(os.path.join(args.out, "trace_bone_local.jsonl"), local_trace)
    save_trace(os.path.join(args.out, "trace_global.jsonl"), global_trace)
    save_json(os.path.join(args.out, "conditioning.json"), stats)
    print(f"bone-local IQR(r/median): {stats['bone_local']['iqr_ratio']:.4f}")
    print(f"global    IQR(r/median): {stats['global_offsets']['iqr_ratio']:.4f}")
    print("bone-local tighter" if stats["iqr_ratio_smaller"]
          else "bone-local NOT tighter")
    return 0


class _null_ctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _check(results: list, name: str, ok: bool, detail: str = "") -> None:
    results.append((name, bool(ok), detail))


def _verify_scene(bundle: SceneBundle) -> list:
    """Fast invariant suite over one parsed scene."""
    rng = np.random.default_rng(0)
    checks: list = []
    garment = bundle.source_garments[0]
    diag = garment.bbox_diagonal()

    with tempfile.TemporaryDirectory() as td:
        p = os.path.join(td, "g.obj")
        save_obj(p, garment)
        back = load_obj(p)
        err = float(np.abs(back.vertices - garment.vertices).max())
        _check(checks, "obj round trip", err < 1e-6 * max(diag, 1.0),
               f"max abs {err:.2e}")

        p = os.path.join(td, "s.skel")
        save_skeleton(p, bundle.source_skeleton)
        skel2 = load_skeleton(p)
        serr = max(float(np.abs(b1.head - b2.head).max())
                   for b1, b2 in zip(bundle.source_skeleton.bones, skel2.bones))
        _check(checks, "skeleton round trip", serr < 1e-6, f"max abs {serr:.2e}")

        p = os.path.join(td, "w.weights")
        save_weights(p, bundle.source_skinning, bundle.source_skeleton)
        w2 = load_weights(p, bundle.source_skeleton)
        werr = float(np.abs(w2.weight - bundle.source_skinning.weight).max())
        _check(checks, "weights round trip", werr < 1e-6, f"max abs {werr:.2e}")

    for tag, skel in (("source", bundle.source_skeleton),
                      ("target", bundle.target_skeleton)):
        frames = build_frames(skel)
        R = frames.axes
        orth = float(np.abs(np.einsum("bij,bkj->bik", R, R)
                            - np.eye(3)).max())
        det = float(np.abs(np.linalg.det(R) - 1.0).max())
        _check(checks, f"{tag} frames orthonormal",
               orth < 1e-9 and det < 1e-9, f"orth {orth:.2e} det {det:.2e}")

    weights = inherit_weights(garment.vertices, bundle.source_avatar.vertices,
                              bundle.source_skinning)
    frames = build_frames(bundle.source_skeleton)
    coords = encode_garment(garment.vertices, frames, weights)
    recon = blend(frames, coords)
    rerr = float(np.abs(recon - garment.vertices).max()) / max(diag, 1e-30)
    _check(checks, "map/reconstruct round trip", rerr < 1e-9, f"rel {rerr:.2e}")

    axis = rng.normal(size=3)
    theta = 1.1
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]]) / np.linalg.norm(axis)
    R = np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)
    t = np.array([0.3, -1.2, 2.0])
    for tag, s in (("rigid", 1.0), ("scaled", 1.7)):
        moved = transform_skeleton(bundle.source_skeleton, R, t, s)
        out = blend(build_frames(moved), coords)
        want = s * (garment.vertices @ R.T) + t
        eerr = float(np.abs(out - want).max()) / max(s * diag, 1e-30)
        _check(checks, f"{tag} equivariance", eerr < 1e-9, f"rel {eerr:.2e}")

    cache = build_differential_cache(garment)
    from .losses import laplacian_term
    vals = []
    for s in (0.25, 1.0, 4.0):
        v, _ = laplacian_term(cache.laplacian, cache.tilde_laplacians,
                              s * garment.vertices, cache.laplacian_zero)
        vals.append(v)
    _check(checks, "laplacian scale invariance", max(vals) < 1e-12,
           f"max {max(vals):.2e}")

    if garment.uvs is not None:
        sampling = downsample(garment, max(3, garment.n_vertices // 8))
        up = upsample(sampling, sampling.coarse.vertices)
        uerr = float(np.abs(up - garment.vertices).max())
        _check(checks, "proxy round trip", uerr < 1e-6, f"max abs {uerr:.2e}")

    topo = build_edge_topology(garment.faces, garment.n_vertices)
    _check(checks, "manifold garment", topo.nonmanifold == 0,
           f"{topo.nonmanifold} bad edges")
    return checks


def cmd_verify(args) -> int:
    bundle = load_scene(args.scene)
    checks = _verify_scene(bundle)
    width = max(len(name) for name, _, _ in checks)
    failed = 0
    for name, ok, detail in checks:
        mark = "PASS" if ok else "FAIL"
        failed += not ok
        print(f"{mark}  {name:<{width}}  {detail}")
    if failed:
        raise SceneIOError(f"{failed} invariant check(s) failed")
    print(f"all {len(checks)} invariant checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="garmfit",
        description="Skeleton-relative garment refitting toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="write a synthetic scene directory")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.add_argument("--preset", default="standard",
                   choices=["standard", "two-layer", "sequence"])
    g.add_argument("--resolution", type=int,
                   help="avatar marching-cubes resolution")
    g.add_argument("--frames", type=int, default=3,
                   help="frame count for the sequence preset")
    g.set_defaults(func=cmd_gen_scene)

    r = sub.add_parser("refit", help="refit one garment to the target avatar")
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--garment", type=int, default=0)
    r.add_argument("--fit-region",
                   help="waist | upper_trunk | upper_trunk_and_waist | all")
    r.add_argument("--dump-stages", action="store_true",
                   help="write initialization and proxy meshes")
    _add_config_flags(r)
    r.set_defaults(func=cmd_refit)

    m = sub.add_parser("refit-multilayer",
                       help="refit all scene garments innermost first")
    m.add_argument("--scene", required=True)
    m.add_argument("--out", required=True)
    _add_config_flags(m)
    m.set_defaults(func=cmd_refit_multilayer)

    s = sub.add_parser("refit-sequence", help="refit per-frame scenes")
    s.add_argument("--scenes", nargs="+", required=True,
                   help="frame scene dirs, or one dir with sequence.json")
    s.add_argument("--out", required=True)
    s.add_argument("--garment", type=int, default=0)
    s.add_argument("--fit-region")
    _add_config_flags(s)
    s.set_defaults(func=cmd_refit_sequence)

    b = sub.add_parser("bench-conditioning",
                       help="bone-local residuals vs global vertex offsets")
    b.add_argument("--scene", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--garment", type=int, default=0)
    b.add_argument("--fit-region")
    _add_config_flags(b)
    b.set_defaults(func=cmd_bench_conditioning)

    v = sub.add_parser("verify", help="run the invariant suite on a scene")
    v.add_argument("--scene", required=True)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        raise
    except Exception as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
