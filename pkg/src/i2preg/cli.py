"""Command-line front end.

Exit codes: 0 success, 2 bad input, 3 a pipeline stage failed, 4 no pose could be estimated.
Errors are written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cross_filter, losses
from .bundle import FeatureBundle, save_bundle
from .config import PipelineConfig, config_text, load_config
from .errors import BundleError, PoseEstimationError, RegistrationError
from .geometry import RigidTransform
from .matching import correspondences_text, marginal_violation, sinkhorn
from .metrics import MetricThresholds, PairEvaluation, evaluation_rows_text
from .pipeline import (
    StageError,
    enhance,
    inputs_from_bundle,
    inputs_from_scene,
    load_inputs,
    match_coarse,
    run_pipeline,
)
from .pose import pose_rmse, pose_summary_text, pose_text
from .synth import NoiseSpec, duplicate_structure_scene, generate_scene, scene_to_bundle

EXIT_OK, EXIT_INPUT, EXIT_STAGE, EXIT_POSE = 0, 2, 3, 4


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--sinkhorn-iters", type=int)
    p.add_argument("--cmcf-iters", type=int)
    p.add_argument("--mode", choices=("ot", "topk"))
    p.add_argument("--k", type=int)
    p.add_argument("--out", help="output file or directory")
    return p


def _source() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--input", help="feature bundle directory")
    p.add_argument("--synth-seed", type=int, help="generate a synthetic scene instead of reading a bundle")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--gain-jitter", type=float, default=0.0)
    p.add_argument("--outlier-fraction", type=float, default=0.0)
    p.add_argument("--copies", type=int, default=1, help="repeated structure blocks in synthetic scenes")
    return p


def _config(args) -> PipelineConfig:
    return load_config(args.config, seed=args.seed, epsilon=args.epsilon, sinkhorn_iters=args.sinkhorn_iters,
                       cmcf_iters=args.cmcf_iters, mode=args.mode, k=args.k)


def _noise(args) -> NoiseSpec:
    return NoiseSpec(args.noise_sigma, args.gain_jitter, args.outlier_fraction)


def _scene(args, seed: int):
    if args.copies > 1:
        return duplicate_structure_scene(seed, args.copies, noise=_noise(args))
    return generate_scene(seed, noise=_noise(args))


def _inputs(args):
    if args.input:
        return load_inputs(args.input)
    if args.synth_seed is not None:
        return inputs_from_scene(_scene(args, args.synth_seed))
    raise RegistrationError("give --input BUNDLE or --synth-seed N")


def _emit(text: str, out: str | None, name: str) -> None:
    """Write to <out>/<name> if out is a directory path, else stdout."""
    if out:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / name).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _bundle_with(inp, grid, points) -> FeatureBundle:
    return FeatureBundle(
        grids={"coarse": grid, "fine": inp.fine_grid},
        points={"coarse": points, "fine": inp.fine_points},
        intrinsics=inp.intrinsics, pose=inp.truth,
        arrays={k: v for k, v in (("depth", inp.depth),
                                  ("point_patch", inp.geometry.point_patch.astype(np.float64))) if v is not None},
        meta={"cell_size": inp.geometry.cell_size, "grid_shape": list(inp.geometry.grid_shape)},
    )


def cmd_synth(args) -> int:
    seed = 0 if args.seed is None else args.seed
    scene = _scene(args, seed)
    if not args.out:
        raise RegistrationError("synth needs --out DIR")
    save_bundle(args.out, scene_to_bundle(scene), dtype=args.dtype)
    info = {"seed": seed, "points": int(scene.fine_points.count), "valid_pixels": int((scene.depth > 0).sum()),
            "patches": int(scene.coarse_points.count), "outliers": int(len(scene.outlier_index)),
            "copies": args.copies}
    sys.stdout.write(json.dumps(info, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_enhance(args) -> int:
    cfg = _config(args)
    inp = _inputs(args)
    try:
        grid, pts = enhance(inp.coarse_grid, inp.coarse_points, cfg)
    except (RegistrationError, ValueError) as exc:
        raise StageError("enhance", exc) from exc
    if args.out:
        save_bundle(args.out, _bundle_with(inp, grid, pts))
    sys.stdout.write(json.dumps({"grid": list(grid.values.shape), "points": list(pts.descriptors.shape)},
                                sort_keys=True) + "\n")
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = _config(args)
    inp = _inputs(args)
    try:
        res = cross_filter.cmcf_apply([inp.coarse_grid.flat()], [inp.coarse_points.descriptors],
                                      cfg.cmcf_iters, cfg.fuse_weight)
    except (RegistrationError, ValueError) as exc:
        raise StageError("filter", exc) from exc
    if args.out:
        grid = inp.coarse_grid.with_values(res.image[0].reshape(inp.coarse_grid.values.shape))
        save_bundle(args.out, _bundle_with(inp, grid, inp.coarse_points.with_descriptors(res.points[0])))
        (Path(args.out) / "diagnostics.json").write_text(res.diagnostics_text(), encoding="utf-8")
    sys.stdout.write(res.diagnostics_text())
    return EXIT_OK


def cmd_match(args) -> int:
    cfg = _config(args)
    inp = _inputs(args)
    try:
        coarse, _, _ = match_coarse(inp.coarse_grid, inp.coarse_points, cfg)
    except (RegistrationError, ValueError) as exc:
        raise StageError("match", exc) from exc
    lines = ["# image_patch point_patch confidence"]
    lines += [f"{i} {j} {c:.9g}" for i, j, c in zip(coarse.image_index, coarse.point_index, coarse.confidence)]
    _emit("\n".join(lines) + "\n", args.out, "coarse.txt")
    return EXIT_OK


def _report(result, cfg) -> str:
    doc = {"name": result.name, "coarse_pairs": len(result.coarse), "fine_pairs": len(result.fine),
           "many_to_one": result.many_to_one, "pose": [float(v) for v in result.transform.as_vector()],
           "ransac": result.ransac.summary()}
    if result.evaluation is not None:
        e = result.evaluation
        doc["metrics"] = {"inlier_ratio": e.inlier_ratio, "rmse": e.rmse, "registered": e.registered,
                          "patch_inlier_ratio": e.patch_inlier_ratio, "missing_depth": e.missing_depth}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def cmd_register(args) -> int:
    cfg = _config(args)
    inp = _inputs(args)
    result = run_pipeline(inp, cfg)
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "pose.txt").write_text(pose_text(result.transform), encoding="utf-8")
        (d / "ransac.json").write_text(pose_summary_text(result.ransac), encoding="utf-8")
        (d / "correspondences.txt").write_text(
            correspondences_text(result.fine, inp.fine_points.positions), encoding="utf-8")
    _emit(_report(result, cfg), args.out, "report.json")
    return EXIT_OK


def _scene_rows(args, cfg, seeds):
    rows = []
    for s in seeds:
        inp = inputs_from_scene(_scene(args, s))
        try:
            res = run_pipeline(inp, cfg)
            rows.append((inp.name, res.evaluation, res.many_to_one))
        except StageError:
            rows.append((inp.name, PairEvaluation(0.0, float("inf"), False, 0.0), 0))
    return rows


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.pose:
        inp = _inputs(args)
        if inp.truth is None:
            raise RegistrationError("input has no ground-truth pose")
        est = RigidTransform.from_vector(np.loadtxt(args.pose).reshape(-1))
        rmse = pose_rmse(est, inp.truth, inp.fine_points.positions)
        doc = {"rmse": rmse, "registered": bool(rmse < cfg.tau3),
               "rotation_error_deg": est.rotation_error_deg(inp.truth),
               "translation_error": est.translation_error(inp.truth)}
        _emit(json.dumps(doc, indent=2, sort_keys=True) + "\n", args.out, "eval.json")
        return EXIT_OK
    base = 0 if args.seed is None else args.seed
    rows = _scene_rows(args, cfg, range(base, base + args.scenes))
    th = MetricThresholds(cfg.tau1, cfg.tau2, cfg.tau3)
    _emit(evaluation_rows_text([(n, e) for n, e, _ in rows], th), args.out, "metrics.txt")
    return EXIT_OK


def gradcheck_report(instances: int, seed: int = 0) -> dict:
    """Worst relative error over seeded circle-loss and filter-loss instances."""
    worst_c, worst_f = 0.0, 0.0
    p = losses.CircleLossParams()
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        n_pos, n_neg = rng.integers(1, 6, 2)
        pos = rng.uniform(0.0, 1.0, n_pos)
        neg = rng.uniform(0.6, 1.8, n_neg)
        x0 = np.concatenate([pos, neg])
        f = lambda x: losses.circle_loss(x[:n_pos], x[n_pos:], p)
        g = lambda x: np.concatenate(losses.circle_loss_grad(x[:n_pos], x[n_pos:], p))
        worst_c = max(worst_c, losses.finite_diff_gradcheck(f, g, x0, 1e-6).max_error)

        C = int(rng.integers(3, 7))
        vi = rng.normal(size=(2, C, C))
        vp = rng.normal(size=(2, C, C))
        mask = np.triu(rng.random((2, C, C)) < 0.4, 1).astype(float)
        n = vi.size
        fl = lambda x: cross_filter.filter_loss(x[:n].reshape(vi.shape), x[n:].reshape(vp.shape), mask)
        gl = lambda x: np.concatenate([a.reshape(-1) for a in cross_filter.filter_loss_grad(
            x[:n].reshape(vi.shape), x[n:].reshape(vp.shape), mask)])
        worst_f = max(worst_f, losses.finite_diff_gradcheck(fl, gl, np.concatenate([vi.ravel(), vp.ravel()]),
                                                            1e-6).max_error)
    return {"instances": instances, "circle_loss_max_error": worst_c, "filter_loss_max_error": worst_f}


def cmd_gradcheck(args) -> int:
    rep = gradcheck_report(args.instances, 0 if args.seed is None else args.seed)
    _emit(json.dumps(rep, indent=2, sort_keys=True) + "\n", args.out, "gradcheck.json")
    return EXIT_OK


def cosine_cost(m: int, n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """1 - cosine similarity between random unit descriptors."""
    x = rng.standard_normal((m, dim))
    y = rng.standard_normal((n, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    return 1.0 - x @ y.T


def bench_sinkhorn(sizes, epsilons, iters, instances: int = 5, seed: int = 0, dim: int = 64) -> list[dict]:
    """Worst marginal violation and mean plan cost after each iteration count in the grid."""
    from scipy.optimize import linear_sum_assignment

    grid = sorted(set(iters))
    rows = []
    for n in sizes:
        for eps in epsilons:
            viol = np.zeros(len(grid))
            cost = np.zeros(len(grid))
            gap = 0.0
            for i in range(instances):
                C = cosine_cost(n, n, dim, np.random.default_rng([seed, n, i]))
                ref = sinkhorn(C, eps, max(grid), tol=1e-6, record_history=True)
                hist = list(ref.history)
                for x, it in enumerate(grid):
                    k = min(it, len(hist) - 1)  # converged runs keep their final state
                    plan = sinkhorn(C, eps, k, tol=1e-6).values
                    viol[x] = max(viol[x], hist[k])
                    cost[x] += float((plan * C).sum()) / instances
                r, c = linear_sum_assignment(C)
                opt = C[r, c].sum() / n
                conv = sinkhorn(C, eps, 100, tol=1e-6, polish=True)
                gap = max(gap, (conv.cost(C) - opt) / opt)
            rows.append({"size": n, "epsilon": eps, "iters": grid, "violation": viol.tolist(),
                         "cost": cost.tolist(), "converged_gap": gap})
    return rows


def bench_text(rows) -> str:
    lines = []
    for r in rows:
        lines.append(f"size={r['size']} epsilon={r['epsilon']:g} converged_gap_vs_assignment={r['converged_gap']:.6f}")
        lines.append(f"{'iters':>8}{'violation':>14}{'cost':>14}")
        for it, v, c in zip(r["iters"], r["violation"], r["cost"]):
            lines.append(f"{it:8d}{v:14.6e}{c:14.8f}")
    return "\n".join(lines) + "\n"


def cmd_bench_sinkhorn(args) -> int:
    eps = _floats(args.epsilons) if args.epsilon is None else [args.epsilon]
    rows = bench_sinkhorn(_ints(args.sizes), eps, _ints(args.iters), args.instances,
                          0 if args.seed is None else args.seed)
    _emit(bench_text(rows), args.out, "bench_sinkhorn.txt")
    return EXIT_OK


ABLATIONS = {
    "none": dict(use_ime=False, use_cmcf=False, mode="topk"),
    "ime": dict(use_ime=True, use_cmcf=False, mode="topk"),
    "cmcf": dict(use_ime=False, use_cmcf=True, mode="topk"),
    "caa": dict(use_ime=True, use_cmcf=True, mode="topk"),
    "gos": dict(use_ime=False, use_cmcf=False, mode="ot"),
    "all": dict(use_ime=True, use_cmcf=True, mode="ot"),
}


def ablation_rows(args, cfg, names, seeds):
    table = []
    for name in names:
        if name not in ABLATIONS:
            raise RegistrationError(f"unknown configuration {name!r}; choose from {sorted(ABLATIONS)}")
        c = cfg.replace(**ABLATIONS[name])
        rows = _scene_rows(args, c, seeds)
        ev = [e for _, e, _ in rows]
        table.append({
            "config": name,
            "PIR": 100 * float(np.mean([e.patch_inlier_ratio for e in ev])),
            "IR": 100 * float(np.mean([e.inlier_ratio for e in ev])),
            "FMR": 100 * float(np.mean([e.inlier_ratio > cfg.tau2 for e in ev])),
            "RR": 100 * float(np.mean([e.registered for e in ev])),
            "many_to_one": int(sum(m for _, _, m in rows)),
        })
    return table


def ablation_text(table) -> str:
    lines = [f"{'config':<8}{'IME':>5}{'CMCF':>6}{'GOS':>5}{'PIR':>8}{'IR':>8}{'FMR':>8}{'RR':>8}{'M2O':>6}"]
    for r in table:
        a = ABLATIONS[r["config"]]
        flag = lambda b: "x" if b else "-"
        lines.append(f"{r['config']:<8}{flag(a['use_ime']):>5}{flag(a['use_cmcf']):>6}{flag(a['mode'] == 'ot'):>5}"
                     f"{r['PIR']:8.1f}{r['IR']:8.1f}{r['FMR']:8.1f}{r['RR']:8.1f}{r['many_to_one']:6d}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = _config(args)
    names = [s.strip() for s in args.configs.split(",") if s.strip()]
    if len(names) < 2:
        raise RegistrationError("ablation needs at least two configurations")
    base = 0 if args.seed is None else args.seed
    table = ablation_rows(args, cfg, names, range(base, base + args.scenes))
    _emit(ablation_text(table), args.out, "ablation.txt")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="i2preg", description="Image to point cloud registration")
    sub = parser.add_subparsers(dest="command", required=True)
    common, source = _common(), _source()

    p = sub.add_parser("synth", parents=[common, source], help="write a synthetic scene bundle")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.set_defaults(func=cmd_synth)
    for name, fn, text in (("enhance", cmd_enhance, "apply ICE/PCE to coarse features"),
                           ("filter", cmd_filter, "apply cross-modal channel filtering"),
                           ("match", cmd_match, "coarse correspondence selection"),
                           ("register", cmd_register, "full registration pipeline")):
        sub.add_parser(name, parents=[common, source], help=text).set_defaults(func=fn)

    p = sub.add_parser("eval", parents=[common, source], help="metrics over a seeded scene set, or for one pose")
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--pose", help="pose file (12 reals) to score against the input's ground truth")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--instances", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-sinkhorn", parents=[common], help="marginal violation and cost versus iterations")
    p.add_argument("--sizes", default="8,100")
    p.add_argument("--epsilons", default="0.01,0.05")
    p.add_argument("--iters", default="0,1,2,5,10,20,50,100")
    p.add_argument("--instances", type=int, default=5)
    p.set_defaults(func=cmd_bench_sinkhorn)

    p = sub.add_parser("ablate", parents=[common, source], help="module ablation over a seeded scene set")
    p.add_argument("--configs", default="none,caa,gos,all")
    p.add_argument("--scenes", type=int, default=10)
    p.set_defaults(func=cmd_ablate)
    return parser


def _fail(code: int, exc: BaseException, stage: str | None = None) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    doc = {"error": type(cause).__name__, "message": str(cause), "exit_code": code}
    if stage:
        doc["stage"] = stage
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        code = EXIT_POSE if exc.stage == "pose" else EXIT_STAGE
        return _fail(code, exc, exc.stage)
    except PoseEstimationError as exc:
        return _fail(EXIT_POSE, exc, "pose")
    except (RegistrationError, BundleError, ValueError, OSError) as exc:
        return _fail(EXIT_INPUT, exc)


if __name__ == "__main__":
    sys.exit(main())
