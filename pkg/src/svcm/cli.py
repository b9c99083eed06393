"""Command-line interface.

Subcommands: ``fit`` (full pipeline from a JSON config), ``simulate``
(replicated phantom study with summary tables and figures), ``test``
(voxel-wise test on stored coefficient/SD volumes), ``predict``
(fixed-effect prediction volumes for new covariate rows), and ``convert``
(Vol1 <-> .npy).  ``SVCM_THREADS`` caps worker processes where parallelism
applies.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, volio
from .config import ConfigError, load_config
from .design import load_covariates
from .grid import Mask
from .infer import Hypothesis, WaldMap, detect_clusters
from .leastsq import VARIANCE_FLOOR
from .mass import ScaleSchedule, chi2_survival
from .pipeline import run_pipeline
from .simulate import (
    PhantomSpec,
    StudyRequest,
    build_truth,
    generate,
    resolve_threads,
    run_study,
    run_table1,
    run_table2,
)

_VOL1_HEADER_DOC = (
    "Vol1 header (44 bytes, little-endian): magic 'VOL1'; version u16 = 1; "
    "dtype u16 (0 = f32, 1 = u8); dims 3 x u32 (nx, ny, nz); spacing 3 x f64 "
    "(sx, sy, sz); then nx*ny*nz payload values in x-fastest order."
)


def _cmd_fit(args) -> int:
    cfg = load_config(args.config)
    log = (lambda *a, **k: None) if args.quiet else print
    result = run_pipeline(cfg, log=log)
    log(f"wrote {len(result.outputs)} artifacts to {result.out_dir}")
    return 0


def _parse_int_list(text: str, what: str):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip() != "")
    except ValueError:
        raise ValueError(f"{what} must be a comma-separated integer list, got {text!r}")


def _parse_float_list(text: str, what: str):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip() != "")
    except ValueError:
        raise ValueError(f"{what} must be a comma-separated number list, got {text!r}")


def _dump_replicate(out_dir, spec, seed, rep):
    """One replicate's volumes plus a ready-to-run fit config."""
    rep_dir = os.path.join(out_dir, f"replicate_{rep}")
    os.makedirs(rep_dir, exist_ok=True)
    data = generate(spec, seed, rep)
    grid, mask = data.stack.grid, data.stack.mask
    paths = []
    for i in range(spec.n):
        name = f"sub{i:03d}.vol"
        volio.write_volume(os.path.join(rep_dir, name), grid,
                           mask.scatter(data.stack.y[i]))
        paths.append(name)
    volio.write_csv(os.path.join(rep_dir, "covariates.csv"),
                    ("subject", "group", "age"),
                    [(f"sub{i:03d}",) + tuple(data.design.x[i, 1:])
                     for i in range(spec.n)])
    truth = build_truth(spec)
    for j, cname in enumerate(("intercept", "group", "age")):
        volio.write_volume(os.path.join(rep_dir, f"truth_beta_{cname}.vol"),
                           grid, mask.scatter(truth.beta[j]))
    cfg = {
        "covariates": "covariates.csv",
        "subjects": paths,
        "output": "fit",
        "hypotheses": [{"name": "group", "coef": "group"}],
        "record_scales": [0, 5, 10],
    }
    with open(os.path.join(rep_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2)
        fh.write("\n")
    return rep_dir


def _cmd_simulate(args) -> int:
    spec = PhantomSpec(
        dims=tuple(args.dims), spacing=tuple(args.spacing), n=args.subjects,
        noise=args.noise, noise_scale=args.noise_scale,
        standardize=not args.no_standardize,
    )
    schedule = ScaleSchedule.default(
        spec.n, c_h=args.c_h, n_scales=args.n_scales,
        cs_convention=args.cs_convention, kst=args.kst,
        c_n=args.c_n, first_check=args.first_check,
    )
    scales = _parse_int_list(args.scales, "--scales")
    req = StudyRequest(
        spec=spec, schedule=schedule, reps=args.reps, seed=args.seed,
        scales=scales, coef=args.coef, alpha=args.alpha,
        with_baselines=not args.no_baselines,
    )
    threads = resolve_threads(args.threads)
    print(f"running {args.reps} replicates on {spec.dims[0]}x{spec.dims[1]}x"
          f"{spec.dims[2]}, n={spec.n}, noise={spec.noise}, {threads} worker(s)")
    result = run_study(req, threads=threads)
    print(f"study finished in {result.elapsed:.1f}s")

    os.makedirs(args.out, exist_ok=True)
    rows1, _ = run_table1(result=result)
    volio.write_csv(os.path.join(args.out, "table1.csv"),
                    ("level", "scale", "bandwidth", "n_voxels", "bias", "rms", "sd", "re"),
                    [(r.level, r.scale, r.bandwidth, r.n_voxels, r.bias, r.rms, r.sd, r.re)
                     for r in rows1])
    levels = _parse_float_list(args.levels, "--levels")
    rows2, _ = run_table2(result=result, levels=levels, alpha=args.alpha)
    volio.write_csv(os.path.join(args.out, "table2.csv"),
                    ("level", "scale", "bandwidth", "n_voxels", "reject_rate"),
                    [(r.level, r.scale, r.bandwidth, r.n_voxels, r.reject_rate)
                     for r in rows2])

    volio.write_csv(os.path.join(args.out, "eigen.csv"),
                    ("component", "mean_abs_cosine", "mean_value"),
                    [(l + 1, float(result.cos[:, l].mean()), float(result.lambdas[:, l].mean()))
                     for l in range(3)])

    if req.with_baselines:
        rows = []
        truth_roi = result.truth.roi[req.coef]
        for h in req.lce_bandwidths:
            bias, rms, sd = result.lce_bias(h), result.lce_mc_sd(h), result.lce_mean_sd(h)
            for idx, level in enumerate(result.truth.level_values):
                sel = truth_roi == idx
                if not sel.any():
                    continue
                rows.append(("lce", h, level, float(bias[sel].mean()),
                             float(rms[sel].mean()), float(sd[sel].mean()),
                             float(rms[sel].mean() / max(sd[sel].mean(), 1e-300))))
        bias, rms, sd = result.gks_bias(), result.gks_mc_sd(), result.gks_mean_sd()
        for idx, level in enumerate(result.truth.level_values):
            sel = truth_roi == idx
            if not sel.any():
                continue
            rows.append(("gks", req.gks_sigma, level, float(bias[sel].mean()),
                         float(rms[sel].mean()), float(sd[sel].mean()),
                         float(rms[sel].mean() / max(sd[sel].mean(), 1e-300))))
        volio.write_csv(os.path.join(args.out, "baselines.csv"),
                        ("method", "bandwidth", "level", "bias", "rms", "sd", "re"),
                        rows)

    hs, counts = np.unique(result.h_opt, return_counts=True)
    summary = [
        ("replicates", req.reps),
        ("seed", req.seed),
        ("subjects", spec.n),
        ("dims", f"{spec.dims[0]}x{spec.dims[1]}x{spec.dims[2]}"),
        ("noise", spec.noise),
        ("coefficient", req.coef),
        ("elapsed_seconds", result.elapsed),
        ("order_match_rate", float(result.order_ok.mean())),
    ] + [(f"h_opt={h:g}", int(c)) for h, c in zip(hs, counts)]
    volio.write_csv(os.path.join(args.out, "summary.csv"), ("key", "value"), summary)

    if args.dump_replicate is not None:
        rep_dir = _dump_replicate(args.out, spec, args.seed, args.dump_replicate)
        print(f"wrote replicate data to {rep_dir}")

    if not args.no_report:
        from .report import render_study_report
        for path in render_study_report(args.out, rows1, rows2, result):
            print(f"figure: {path}")
    print(f"tables written to {args.out}")
    return 0


def _load_manifest(fit_dir):
    path = os.path.join(fit_dir, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise ValueError(f"cannot read {path}: {exc}") from None
    if manifest.get("status") != "COMPLETED":
        raise ValueError(f"{path}: run status is {manifest.get('status')!r}, not COMPLETED")
    return manifest


def _cmd_test(args) -> int:
    manifest = _load_manifest(args.fit)
    names = manifest["coefficients"]
    if args.coef not in names:
        raise ValueError(f"no coefficient {args.coef!r} in this run (have {names})")
    j = names.index(args.coef)
    mask = volio.read_mask(os.path.join(args.fit, "mask.vol"))
    grid = mask.grid
    _, beta = volio.read_volume(os.path.join(args.fit, f"{args.label}_beta_{args.coef}.vol"))
    _, sd = volio.read_volume(os.path.join(args.fit, f"{args.label}_sd_{args.coef}.vol"))
    beta = mask.gather(beta)
    sd = mask.gather(sd)
    stats = beta**2 / np.maximum(sd**2, VARIANCE_FLOOR)
    pvalues = chi2_survival(1, stats)
    rows = np.zeros(len(names))
    rows[j] = 1.0
    wald = WaldMap(stats=stats, pvalues=pvalues,
                   hypothesis=Hypothesis(rows=rows, name=args.coef), label=args.label)
    clusters = detect_clusters(wald, mask, alpha=args.alpha,
                               min_size=args.min_cluster,
                               connectivity=args.connectivity)
    out_dir = args.out or args.fit
    os.makedirs(out_dir, exist_ok=True)
    prefix = f"test_{args.label}_{args.coef}"
    volio.write_volume(os.path.join(out_dir, f"{prefix}_wald.vol"), grid,
                       mask.scatter(stats))
    volio.write_volume(os.path.join(out_dir, f"{prefix}_pvalue.vol"), grid,
                       mask.scatter(pvalues, fill=1.0))
    crows = []
    for k, cl in enumerate(clusters):
        px, py, pz = grid.unravel(cl.peak)
        crows.append((k + 1, cl.size, px, py, pz, cl.peak_p))
    volio.write_csv(os.path.join(out_dir, f"{prefix}_clusters.csv"),
                    ("cluster", "size", "peak_x", "peak_y", "peak_z", "peak_p"),
                    crows)
    print(f"{int((pvalues < args.alpha).sum())} of {mask.n_active} voxels below "
          f"alpha={args.alpha:g}; {len(clusters)} clusters of >= {args.min_cluster}")
    return 0


def _cmd_predict(args) -> int:
    manifest = _load_manifest(args.fit)
    names = manifest["coefficients"]
    add_intercept = bool(names) and names[0] == "intercept"
    ids, design = load_covariates(args.covariates, add_intercept=add_intercept)
    if list(design.names) != list(names):
        raise ValueError(
            f"covariate columns {list(design.names)} do not match the fitted "
            f"coefficients {names}")
    grid = None
    betas = []
    for cname in names:
        g, values = volio.read_volume(
            os.path.join(args.fit, f"{args.label}_beta_{cname}.vol"))
        grid = grid or g
        betas.append(values)
    betas = np.stack(betas)
    os.makedirs(args.out, exist_ok=True)
    for i, sid in enumerate(ids):
        pred = design.x[i] @ betas
        volio.write_volume(os.path.join(args.out, f"pred_{sid}.vol"), grid, pred)
    print(f"wrote {len(ids)} prediction volumes to {args.out}")
    return 0


def _cmd_convert(args) -> int:
    src, dst = args.input, args.output
    if src.endswith(".vol") and dst.endswith(".npy"):
        grid, values = volio.read_volume(src)
        cube = values.reshape(grid.shape3)
        np.save(dst, cube)
        sidecar = dst[: -len(".npy")] + ".json"
        with open(sidecar, "w", encoding="utf-8") as fh:
            json.dump({"dims": list(grid.dims), "spacing": list(grid.spacing),
                       "order": "x-fastest", "array_axes": ["z", "y", "x"]},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {dst} and {sidecar}")
    elif src.endswith(".npy") and dst.endswith(".vol"):
        cube = np.load(src)
        if cube.ndim != 3:
            raise ValueError(f"{src}: expected a 3-D array, got shape {cube.shape}")
        nz, ny, nx = cube.shape
        from .grid import Grid3

        grid = Grid3(dims=(nx, ny, nz), spacing=tuple(args.spacing))
        volio.write_volume(dst, grid, np.asarray(cube, dtype=np.float64).reshape(-1))
        print(f"wrote {dst}")
    else:
        raise ValueError("convert supports .vol -> .npy and .npy -> .vol")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svcm",
        description="Spatially varying coefficient maps: estimation, "
                    "multiscale smoothing, and voxel-wise inference.",
    )
    parser.add_argument("--version", action="version", version=f"svcm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="run the full pipeline from a JSON config")
    p_fit.add_argument("config", help="path to the run configuration")
    p_fit.add_argument("--quiet", action="store_true", help="suppress progress output")
    p_fit.set_defaults(func=_cmd_fit)

    p_sim = sub.add_parser("simulate", help="replicated phantom study")
    p_sim.add_argument("--out", required=True, help="output directory for tables/figures")
    p_sim.add_argument("--reps", type=int, default=50)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--subjects", type=int, default=60)
    p_sim.add_argument("--dims", type=int, nargs=3, default=(64, 64, 8),
                       metavar=("NX", "NY", "NZ"))
    p_sim.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0),
                       metavar=("SX", "SY", "SZ"))
    p_sim.add_argument("--noise", choices=("gaussian", "chisq3"), default="gaussian")
    p_sim.add_argument("--noise-scale", type=float, default=1.0)
    p_sim.add_argument("--no-standardize", action="store_true",
                       help="use raw 0/1 and [1,2] covariates instead of standardized")
    p_sim.add_argument("--scales", default="0,5,10",
                       help="comma-separated scales to record (0 = raw)")
    p_sim.add_argument("--coef", type=int, default=1,
                       help="coefficient index the tables report on")
    p_sim.add_argument("--levels", default="0,0.2,0.4",
                       help="activation levels for the power table")
    p_sim.add_argument("--alpha", type=float, default=0.05)
    p_sim.add_argument("--n-scales", type=int, default=10)
    p_sim.add_argument("--c-h", type=float, default=1.1)
    p_sim.add_argument("--kst", choices=("exp", "front"), default="exp")
    p_sim.add_argument("--cs-convention", choices=("upper", "lower"), default="upper")
    p_sim.add_argument("--c-n", type=float, default=None,
                       help="similarity scale override (default: n**0.4 quantile rule)")
    p_sim.add_argument("--first-check", type=int, default=2,
                       help="first scale at which the freeze test applies")
    p_sim.add_argument("--no-baselines", action="store_true")
    p_sim.add_argument("--threads", type=int, default=None,
                       help="worker processes (default: SVCM_THREADS or cpu count, max 4)")
    p_sim.add_argument("--dump-replicate", type=int, default=None, metavar="R",
                       help="also write replicate R's volumes and a fit config")
    p_sim.add_argument("--no-report", action="store_true", help="skip figure rendering")
    p_sim.set_defaults(func=_cmd_simulate)

    p_test = sub.add_parser("test", help="voxel-wise test on stored volumes")
    p_test.add_argument("--fit", required=True, help="directory of a completed fit")
    p_test.add_argument("--coef", required=True, help="coefficient name to test against 0")
    p_test.add_argument("--label", default="final",
                        help="which maps to test (final, h0, mass_s5, ...)")
    p_test.add_argument("--alpha", type=float, default=0.05)
    p_test.add_argument("--min-cluster", type=int, default=50)
    p_test.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=6)
    p_test.add_argument("--out", default=None, help="output directory (default: fit dir)")
    p_test.set_defaults(func=_cmd_test)

    p_pred = sub.add_parser("predict", help="fixed-effect prediction volumes")
    p_pred.add_argument("--fit", required=True, help="directory of a completed fit")
    p_pred.add_argument("--covariates", required=True,
                        help="CSV of new subjects (same columns as the fit)")
    p_pred.add_argument("--label", default="final")
    p_pred.add_argument("--out", required=True)
    p_pred.set_defaults(func=_cmd_predict)

    p_conv = sub.add_parser("convert", help="convert Vol1 volumes to/from .npy",
                            epilog=_VOL1_HEADER_DOC)
    p_conv.add_argument("input")
    p_conv.add_argument("output")
    p_conv.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0),
                        metavar=("SX", "SY", "SZ"),
                        help="voxel spacing when writing .vol from .npy")
    p_conv.set_defaults(func=_cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, volio.VolumeFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
