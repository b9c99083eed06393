"""Run configuration: a strict JSON schema for the command-line pipeline.

Unknown keys are rejected rather than ignored so that typos ("schdule")
fail loudly instead of silently running with defaults.
"""

from __future__ import annotations

import dataclasses
import json
import os

from .fpca import default_gcv_grid
from .mass import ScaleSchedule

__all__ = ["ConfigError", "HypothesisSpec", "RunConfig", "load_config"]

METHODS = ("svcm", "lce", "gks")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent run configuration."""


def _expect(obj, key, types, where, default=None, required=False):
    if key not in obj:
        if required:
            raise ConfigError(f"{where}: missing required key {key!r}")
        return default
    val = obj.pop(key)
    if types is not None and not isinstance(val, types):
        names = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ConfigError(f"{where}.{key}: expected {names}, got {type(val).__name__}")
    return val


def _no_leftovers(obj, where):
    if obj:
        raise ConfigError(f"{where}: unknown keys {sorted(obj)}")


@dataclasses.dataclass(frozen=True)
class HypothesisSpec:
    """A named test: either a single coefficient against zero, or explicit
    restriction rows with an optional offset."""

    name: str
    coef: str | int | None = None
    rows: tuple | None = None
    b0: tuple | None = None

    @staticmethod
    def parse(obj, where):
        if not isinstance(obj, dict):
            raise ConfigError(f"{where}: each hypothesis must be an object")
        obj = dict(obj)
        name = _expect(obj, "name", str, where, required=True)
        coef = _expect(obj, "coef", (str, int), where)
        rows = _expect(obj, "rows", list, where)
        b0 = _expect(obj, "b0", list, where)
        _no_leftovers(obj, where)
        if (coef is None) == (rows is None):
            raise ConfigError(f"{where}: give exactly one of 'coef' or 'rows'")
        if rows is not None:
            try:
                rows = tuple(tuple(float(v) for v in row) for row in rows)
            except (TypeError, ValueError):
                raise ConfigError(f"{where}.rows: expected a matrix of numbers") from None
            if b0 is not None:
                b0 = tuple(float(v) for v in b0)
        elif b0 is not None:
            raise ConfigError(f"{where}: 'b0' requires explicit 'rows'")
        return HypothesisSpec(name=name, coef=coef, rows=rows, b0=b0)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Everything the ``fit`` pipeline needs, resolved and validated.

    ``mask`` is a Vol1 path, the string ``"auto"`` (keep voxels whose
    response varies across subjects), or ``None`` (keep all voxels).
    ``method`` selects the smoother behind the final maps: the multiscale
    adaptive pipeline (``svcm``), local-constant smoothing of the raw
    coefficients (``lce``), or Gaussian pre-smoothing of the responses
    (``gks``); the latter two use ``method_bandwidth``.
    ``record_scales`` lists the adaptive scales whose maps are written
    (``"all"`` writes every scale incl. the raw one).
    """

    covariates: str
    subjects: tuple
    output: str
    mask: str | None = None
    method: str = "svcm"
    method_bandwidth: float = 2.0
    record_scales: tuple | str = "all"
    seed: int | None = None
    schedule: ScaleSchedule | None = None
    schedule_args: dict = dataclasses.field(default_factory=dict)
    gcv_grid: tuple = dataclasses.field(default_factory=default_gcv_grid)
    cum_threshold: float = 0.8
    center_fpca: bool = False
    hypotheses: tuple = ()
    alpha: float = 0.05
    min_cluster: int = 50
    lce_bandwidths: tuple = ()
    gks_sigmas: tuple = ()
    report: bool = True
    threads: int | None = None

    def make_schedule(self, n: int) -> ScaleSchedule:
        if self.schedule is not None:
            return self.schedule
        return ScaleSchedule.default(n, **self.schedule_args)

    def resolve_record_scales(self, n_scales: int) -> tuple:
        if self.record_scales == "all":
            return tuple(range(n_scales + 1))
        bad = [s for s in self.record_scales if not 0 <= s <= n_scales]
        if bad:
            raise ConfigError(f"record_scales {bad} outside 0..{n_scales}")
        return tuple(sorted(set(self.record_scales)))


def _parse_schedule_args(obj):
    if obj is None:
        return {}
    where = "config.schedule"
    args = {}
    ch = _expect(obj, "c_h", (int, float), where)
    if ch is not None:
        args["c_h"] = float(ch)
    ns = _expect(obj, "n_scales", int, where)
    if ns is not None:
        args["n_scales"] = ns
    kst = _expect(obj, "kst", str, where)
    if kst is not None:
        args["kst"] = kst
    conv = _expect(obj, "cs_convention", str, where)
    if conv is not None:
        args["cs_convention"] = conv
    cn = _expect(obj, "c_n", (int, float), where)
    if cn is not None:
        args["c_n"] = float(cn)
    fc = _expect(obj, "first_check", int, where)
    if fc is not None:
        args["first_check"] = fc
    floor = _expect(obj, "variance_floor", (int, float), where)
    if floor is not None:
        args["variance_floor"] = float(floor)
    _no_leftovers(obj, where)
    return args


def _parse_gcv(obj):
    where = "config.gcv"
    base = _expect(obj, "base", (int, float), where, default=1.0)
    ratio = _expect(obj, "ratio", (int, float), where, default=1.25)
    count = _expect(obj, "count", int, where, default=9)
    _no_leftovers(obj, where)
    try:
        return default_gcv_grid(float(base), float(ratio), count)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path: str) -> RunConfig:
    """Parse and validate a JSON run configuration.

    Relative data paths are resolved against the config file's directory.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")

    where = "config"
    base_dir = os.path.dirname(os.path.abspath(path))
    rel = lambda p: p if os.path.isabs(p) else os.path.join(base_dir, p)

    covariates = rel(_expect(obj, "covariates", str, where, required=True))
    subjects = _expect(obj, "subjects", list, where, required=True)
    if not subjects or not all(isinstance(v, str) for v in subjects):
        raise ConfigError("config.subjects: expected a non-empty list of paths")
    subjects = tuple(rel(v) for v in subjects)
    output = rel(_expect(obj, "output", str, where, required=True))
    mask = _expect(obj, "mask", str, where)
    if mask is not None and mask != "auto":
        mask = rel(mask)

    method = _expect(obj, "method", str, where, default="svcm")
    if method not in METHODS:
        raise ConfigError(f"config.method: must be one of {METHODS}, got {method!r}")
    mbw = float(_expect(obj, "method_bandwidth", (int, float), where, default=2.0))
    if mbw <= 0:
        raise ConfigError("config.method_bandwidth: must be positive")

    record = _expect(obj, "record_scales", (str, list), where, default="all")
    if isinstance(record, str):
        if record != "all":
            raise ConfigError("config.record_scales: expected \"all\" or a list of scales")
    else:
        if not all(isinstance(s, int) for s in record):
            raise ConfigError("config.record_scales: scales must be integers")
        record = tuple(record)

    seed = _expect(obj, "seed", int, where)

    schedule_args = _parse_schedule_args(_expect(obj, "schedule", dict, where))
    gcv_grid = _parse_gcv(_expect(obj, "gcv", dict, where, default={}))
    cum = float(_expect(obj, "cum_threshold", (int, float), where, default=0.8))
    if not 0.0 < cum <= 1.0:
        raise ConfigError("config.cum_threshold: must be in (0, 1]")
    center = _expect(obj, "center_fpca", bool, where, default=False)

    hyp_objs = _expect(obj, "hypotheses", list, where, default=[])
    hypotheses = tuple(
        HypothesisSpec.parse(h, f"config.hypotheses[{i}]") for i, h in enumerate(hyp_objs)
    )
    names = [h.name for h in hypotheses]
    if len(set(names)) != len(names):
        raise ConfigError("config.hypotheses: duplicate names")

    alpha = float(_expect(obj, "alpha", (int, float), where, default=0.05))
    if not 0.0 < alpha < 1.0:
        raise ConfigError("config.alpha: must be in (0, 1)")
    min_cluster = _expect(obj, "min_cluster", int, where, default=50)
    if min_cluster < 1:
        raise ConfigError("config.min_cluster: must be >= 1")

    baselines = _expect(obj, "baselines", dict, where, default={})
    bwhere = "config.baselines"
    lce = _expect(baselines, "lce", list, bwhere, default=[])
    gks = _expect(baselines, "gks", list, bwhere, default=[])
    _no_leftovers(baselines, bwhere)
    try:
        lce = tuple(float(v) for v in lce)
        gks = tuple(float(v) for v in gks)
    except (TypeError, ValueError):
        raise ConfigError(f"{bwhere}: bandwidths must be numbers") from None
    if any(v <= 0 for v in lce + gks):
        raise ConfigError(f"{bwhere}: bandwidths must be positive")

    report = _expect(obj, "report", bool, where, default=True)
    threads = _expect(obj, "threads", int, where)
    if threads is not None and threads < 1:
        raise ConfigError("config.threads: must be >= 1")
    _no_leftovers(obj, where)

    return RunConfig(
        covariates=covariates, subjects=subjects, output=output, mask=mask,
        method=method, method_bandwidth=mbw, record_scales=record, seed=seed,
        schedule_args=schedule_args, gcv_grid=gcv_grid, cum_threshold=cum,
        center_fpca=center, hypotheses=hypotheses, alpha=alpha,
        min_cluster=min_cluster, lce_bandwidths=lce, gks_sigmas=gks,
        report=report, threads=threads,
    )
