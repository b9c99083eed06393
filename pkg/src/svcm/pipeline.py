"""End-to-end fit: load data, estimate, test, and write every artifact.

Volumes, CSVs, and PGMs are deterministic functions of the inputs: fixed
write order, fixed float formatting, fixed reduction orders.  The manifest
additionally records wall times, so reruns agree everywhere except those
timing entries.  If any stage fails, a manifest with ``status: FAILED`` and
a stage-tagged error message is flushed before the exception propagates.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time

import numpy as np

from .baselines import gks_pipeline, lce_smooth
from .config import HypothesisSpec, RunConfig
from .design import DesignMatrix, coeff_selector, load_covariates
from .fpca import build_noise_model
from .grid import Grid3, Mask
from .infer import Hypothesis, WaldMap, detect_clusters, wald_test
from .leastsq import CoefficientField, SubjectStack, ls_fit, raw_variance
from .mass import MassState, run_mass
from . import volio

__all__ = [
    "HypothesisResult",
    "PipelineResult",
    "StageError",
    "auto_mask",
    "resolve_hypothesis",
    "run_pipeline",
]


class StageError(RuntimeError):
    """A pipeline stage failed; the message carries the stage tag."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclasses.dataclass(frozen=True)
class HypothesisResult:
    name: str
    wald: WaldMap
    clusters: tuple


@dataclasses.dataclass(frozen=True)
class PipelineResult:
    config: RunConfig
    grid: Grid3
    mask: Mask
    design: DesignMatrix
    subject_ids: tuple
    noise: object
    raw: CoefficientField
    final: CoefficientField
    state: MassState | None
    tests: dict
    baselines: dict
    out_dir: str
    outputs: tuple
    wall_times: dict


def auto_mask(stack: SubjectStack) -> Mask:
    """Voxels whose response varies across subjects (nonzero variance)."""
    active = stack.y.var(axis=0) > 0.0
    dense = stack.mask.scatter(active, fill=False)
    return Mask(stack.grid, dense)


def resolve_hypothesis(spec: HypothesisSpec, design: DesignMatrix) -> Hypothesis:
    """Turn a config-level hypothesis into restriction rows for this design."""
    if spec.rows is not None:
        rows = np.asarray(spec.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != design.p:
            raise ValueError(
                f"hypothesis {spec.name!r}: rows must have {design.p} columns")
        b0 = None if spec.b0 is None else np.asarray(spec.b0, dtype=np.float64)
        return Hypothesis(rows=rows, b0=b0, name=spec.name)
    if isinstance(spec.coef, int):
        j = spec.coef
        if not 0 <= j < design.p:
            raise ValueError(f"hypothesis {spec.name!r}: coefficient index {j} out of range")
    else:
        try:
            j = design.names.index(spec.coef)
        except ValueError:
            raise ValueError(
                f"hypothesis {spec.name!r}: no coefficient named {spec.coef!r} "
                f"(have {list(design.names)})") from None
    return Hypothesis(rows=coeff_selector(design, j), name=spec.name)


class _Sink:
    """Collects written artifact paths relative to the output directory."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.paths = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, rel):
        full = os.path.join(self.out_dir, rel)
        parent = os.path.dirname(full)
        if parent:
            os.makedirs(parent, exist_ok=True)
        self.paths.append(rel)
        return full


def _write_field(sink, label, field, grid, mask):
    for j, cname in enumerate(field.coef_names()):
        volio.write_volume(sink.path(f"{label}_beta_{cname}.vol"),
                           grid, mask.scatter(field.beta[j]))
        volio.write_volume(sink.path(f"{label}_sd_{cname}.vol"),
                           grid, mask.scatter(np.sqrt(field.var[j])))


def _config_echo(cfg: RunConfig, schedule) -> dict:
    return {
        "covariates": cfg.covariates,
        "subjects": list(cfg.subjects),
        "mask": cfg.mask,
        "method": cfg.method,
        "method_bandwidth": cfg.method_bandwidth,
        "gcv_grid": list(cfg.gcv_grid),
        "cum_threshold": cfg.cum_threshold,
        "center_fpca": cfg.center_fpca,
        "alpha": cfg.alpha,
        "min_cluster": cfg.min_cluster,
        "lce_bandwidths": list(cfg.lce_bandwidths),
        "gks_sigmas": list(cfg.gks_sigmas),
        "schedule": {
            "c_h": schedule.c_h,
            "n_scales": schedule.n_scales,
            "c_n": schedule.c_n,
            "cs": list(schedule.cs),
            "kst": schedule.kst,
        },
    }


def _write_failed_manifest(out_dir, stage, error):
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump({"format": "svcm-run/1", "status": "FAILED",
                       "stage": stage, "error": str(error)},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError:
        pass


def run_pipeline(cfg: RunConfig, log=print) -> PipelineResult:
    walls = {}
    stage = "load"
    try:
        return _run_pipeline(cfg, log, walls)
    except StageError as exc:
        _write_failed_manifest(cfg.output, exc.stage, exc.cause)
        raise
    except Exception as exc:
        _write_failed_manifest(cfg.output, stage, exc)
        raise


def _staged(walls, stage, fn):
    t0 = time.perf_counter()
    try:
        out = fn()
    except Exception as exc:
        raise StageError(stage, exc) from exc
    walls[stage] = time.perf_counter() - t0
    return out


def _run_pipeline(cfg: RunConfig, log, walls) -> PipelineResult:
    def _load():
        ids, design = load_covariates(cfg.covariates)
        if len(cfg.subjects) != design.n:
            raise ValueError(f"{design.n} covariate rows but {len(cfg.subjects)} volumes")
        mask = None
        if cfg.mask not in (None, "auto"):
            mask = volio.read_mask(cfg.mask)
        stack, grid, mask = volio.load_subject_stack(cfg.subjects, mask=mask)
        if cfg.mask == "auto":
            mask = auto_mask(stack)
            stack = SubjectStack(grid=grid, mask=mask,
                                 y=mask.gather(stack.mask.scatter(stack.y)))
        return ids, design, stack, grid, mask

    ids, design, stack, grid, mask = _staged(walls, "load", _load)
    log(f"loaded {stack.n} subjects on {grid.dims[0]}x{grid.dims[1]}x{grid.dims[2]} "
        f"grid, {mask.n_active} voxels in mask")

    def _stage1():
        raw0 = ls_fit(stack, design)
        noise = build_noise_model(stack, design, raw0, candidates=cfg.gcv_grid,
                                  cum_threshold=cfg.cum_threshold, center=cfg.center_fpca)
        raw = CoefficientField(raw0.beta, raw_variance(design, noise.sigma_y_diag()),
                               label="h0", names=design.names)
        return raw, noise

    raw, noise = _staged(walls, "stage1", _stage1)
    log(f"selected smoothing bandwidth h={noise.h_opt:g} "
        f"(trace {noise.gcv.candidates[noise.gcv.opt_index].trace:.1f}); "
        f"{noise.eigen.l_s} of {noise.eigen.n_components} components retained")

    schedule = cfg.make_schedule(stack.n)
    record = cfg.resolve_record_scales(schedule.n_scales) if cfg.method == "svcm" else ()

    def _stage2():
        if cfg.method == "svcm":
            final, state = run_mass(raw, noise, design, mask, schedule, snapshots=record)
            final = CoefficientField(final.beta, final.var, label=final.label,
                                     names=design.names)
        elif cfg.method == "lce":
            fld = lce_smooth(raw, noise.sigma_y_diag(), design, mask, cfg.method_bandwidth)
            final = CoefficientField(fld.beta, fld.var, label=fld.label, names=design.names)
            state = None
        else:
            fld = gks_pipeline(stack, design, cfg.method_bandwidth)
            final = CoefficientField(fld.beta, fld.var, label=fld.label, names=design.names)
            state = None
        return final, state

    final, state = _staged(walls, "stage2", _stage2)
    log(f"final maps from method {cfg.method!r} ({final.label})")

    def _stage3():
        tests = {}
        for hspec in cfg.hypotheses:
            hyp = resolve_hypothesis(hspec, design)
            source = state if state is not None else final
            wmap = wald_test(source, noise, design, hyp)
            clusters = detect_clusters(wmap, mask, alpha=cfg.alpha,
                                       min_size=cfg.min_cluster)
            tests[hspec.name] = HypothesisResult(name=hspec.name, wald=wmap,
                                                 clusters=tuple(clusters))
        return tests

    tests = _staged(walls, "stage3", _stage3)
    for name, res in tests.items():
        log(f"hypothesis {name!r}: {int((res.wald.pvalues < cfg.alpha).sum())} voxels "
            f"below alpha={cfg.alpha:g}, {len(res.clusters)} clusters of >= {cfg.min_cluster}")

    def _extras():
        baselines = {}
        for h in cfg.lce_bandwidths:
            fld = lce_smooth(raw, noise.sigma_y_diag(), design, mask, h)
            baselines[fld.label] = CoefficientField(fld.beta, fld.var, label=fld.label,
                                                    names=design.names)
        for s in cfg.gks_sigmas:
            fld = gks_pipeline(stack, design, s)
            baselines[fld.label] = CoefficientField(fld.beta, fld.var, label=fld.label,
                                                    names=design.names)
        return baselines

    baselines = _staged(walls, "baselines", _extras)

    def _write():
        sink = _Sink(cfg.output)
        volio.write_mask(sink.path("mask.vol"), mask)
        _write_field(sink, "h0", raw, grid, mask)
        if state is not None:
            for s in record:
                if s == 0:
                    continue  # written above as h0
                snap = state.snapshots[s]
                _write_field(sink, f"mass_s{s}",
                             CoefficientField(snap.beta, snap.var, label=snap.label,
                                              names=design.names),
                             grid, mask)
        _write_field(sink, "final", final, grid, mask)
        for label, fld in baselines.items():
            _write_field(sink, label, fld, grid, mask)
        volio.write_volume(sink.path("sigma_eps.vol"), grid, mask.scatter(noise.sigma_eps))
        for l in range(noise.eigen.l_s):
            volio.write_volume(sink.path(f"eigenfunc_{l + 1}.vol"), grid,
                               mask.scatter(noise.eigen.funcs[l]))

        volio.write_csv(sink.path("gcv.csv"),
                        ("h", "score", "trace", "n_fallback", "disqualified"),
                        noise.gcv.as_rows())
        values = noise.eigen.values
        cum = np.cumsum(values) / values.sum() if values.size else values
        volio.write_csv(sink.path("eigen.csv"),
                        ("component", "value", "cum_fraction", "retained"),
                        [(l + 1, values[l], cum[l], int(l < noise.eigen.l_s))
                         for l in range(values.size)])
        volio.write_csv(sink.path("scores.csv"),
                        ("subject",) + tuple(f"score_{l+1}"
                                             for l in range(noise.scores.shape[1])),
                        [(ids[i],) + tuple(noise.scores[i]) for i in range(stack.n)])
        if state is not None:
            stop_rows = []
            for j, cname in enumerate(design.names):
                counts = np.bincount(state.stopped_at[j].astype(np.int64),
                                     minlength=schedule.n_scales + 1)
                stop_rows.extend((cname, s, int(c)) for s, c in enumerate(counts))
            volio.write_csv(sink.path("stops.csv"),
                            ("coefficient", "scale", "n_voxels"), stop_rows)

        for name, res in tests.items():
            volio.write_volume(sink.path(f"wald_{name}.vol"), grid,
                               mask.scatter(res.wald.stats))
            volio.write_volume(sink.path(f"pvalue_{name}.vol"), grid,
                               mask.scatter(res.wald.pvalues, fill=1.0))
            rows = []
            for k, cl in enumerate(res.clusters):
                px, py, pz = grid.unravel(cl.peak)
                rows.append((k + 1, cl.size, px, py, pz, cl.peak_p))
            volio.write_csv(sink.path(f"clusters_{name}.csv"),
                            ("cluster", "size", "peak_x", "peak_y", "peak_z", "peak_p"),
                            rows)

        mid = grid.dims[2] // 2
        for j, cname in enumerate(design.names):
            dense = mask.scatter(final.beta[j]).reshape(grid.shape3)
            vmax = float(np.abs(dense).max())
            volio.write_pgm(sink.path(f"pgm/final_beta_{cname}_z{mid}.pgm"),
                            np.abs(dense[mid]), vmax if vmax > 0 else 1.0)
        for name, res in tests.items():
            dense = mask.scatter(1.0 - res.wald.pvalues).reshape(grid.shape3)
            volio.write_pgm(sink.path(f"pgm/signif_{name}_z{mid}.pgm"), dense[mid], 1.0)

        if cfg.report:
            from . import report
            report.render_fit_report(sink, grid, mask, design, noise, raw, final, tests)
        return sink

    sink = _staged(walls, "write", _write)

    manifest = {
        "format": "svcm-run/1",
        "status": "COMPLETED",
        "n_subjects": stack.n,
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "mask_voxels": mask.n_active,
        "coefficients": list(design.names),
        "h_opt": noise.h_opt,
        "n_components_retained": noise.eigen.l_s,
        "final_label": final.label,
        "recorded_scales": list(record),
        "seed": cfg.seed,
        "hypotheses": sorted(tests),
        "baselines": sorted(baselines),
        "config": _config_echo(cfg, schedule),
        "outputs": sorted(sink.paths),
        "wall_times": {k: round(v, 3) for k, v in walls.items()},
    }
    with open(os.path.join(cfg.output, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    return PipelineResult(
        config=cfg, grid=grid, mask=mask, design=design, subject_ids=tuple(ids),
        noise=noise, raw=raw, final=final, state=state, tests=tests,
        baselines=baselines, out_dir=cfg.output, outputs=tuple(sink.paths),
        wall_times=dict(walls),
    )
