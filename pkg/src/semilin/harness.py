"""Experiment orchestration: configs, runs, sweeps and reports."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import time
import traceback
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import dbsde
from . import fixedpoint as fp
from . import networks as nw
from .metrics import ErrorReport
from .pdes import BaselineCache, make_problem
from .rng import derive_seed
from .training import TrainingConfig, TrainingDiverged

log = logging.getLogger(__name__)

# section of the config file holding each field
_SECTIONS = {
    "problem": ("problem", "d", "T", "x0", "params"),
    "solver": ("solver", "arch", "h", "w", "loss"),
    "training": (
        "N",
        "iterations",
        "batch_size",
        "lr0",
        "period",
        "min_improvement",
        "test_every",
        "test_size",
        "scaler_paths",
    ),
    "fixedpoint": ("lam", "n_inner", "fp_batch_size"),
    "evaluation": ("final_test_size", "n_eval_point", "n_eval_traj", "traj_count", "n_ref", "baseline_samples"),
    "run": ("seed", "output_dir", "axis", "values", "repeats", "couple_maturity"),
}


@dataclass
class ExperimentConfig:
    problem: str = "osc_square"
    d: int = 10
    T: float = 1.0
    x0: list | None = None
    params: dict = field(default_factory=dict)
    solver: str = "dbsde"
    arch: str = "f"
    h: int | None = None
    w: int | None = None
    loss: str = "terminal"
    N: int = 100
    iterations: int = 16000
    batch_size: int = 300
    lr0: float = 1e-2
    period: int = 1000
    min_improvement: float = 0.05
    test_every: int = 100
    test_size: int = 1000
    scaler_paths: int = 10000
    lam: float = 0.5
    n_inner: int = 10000
    fp_batch_size: int = 300
    final_test_size: int = 1500
    n_eval_point: int = 1_000_000
    n_eval_traj: int = 100_000
    traj_count: int = 10
    n_ref: int = 50000
    baseline_samples: int = 1_000_000
    seed: int = 0
    output_dir: str = "results"
    axis: str | None = None
    values: list = field(default_factory=list)
    repeats: int = 5
    couple_maturity: bool = True

    def __post_init__(self):
        if self.solver not in ("dbsde", "fixedpoint"):
            raise ValueError("solver must be 'dbsde' or 'fixedpoint'")

    # serialization ----------------------------------------------------------
    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def hash(self, exclude=("output_dir", "axis", "values", "repeats")):
        """sha256 of the canonical JSON of the fields that affect results."""
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def to_ini(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        data = self.to_dict()
        for section, keys in _SECTIONS.items():
            cp[section] = {}
            for k in keys:
                v = data[k]
                if k == "params":
                    for pk, pv in sorted(v.items()):
                        cp[section][pk] = repr(float(pv))
                    continue
                cp[section][k] = json.dumps(v)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_string(text)
        kw, params = {}, {}
        names = {f.name for f in dataclasses.fields(cls)}
        for section in cp.sections():
            for k, raw in cp[section].items():
                if section == "problem" and k not in names:
                    params[k] = float(raw)
                    continue
                if k not in names:
                    raise ValueError(f"unknown config key [{section}] {k}")
                kw[k] = _parse_value(raw)
        if params:
            kw["params"] = params
        return cls(**kw)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_ini(fh.read())

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    # factories --------------------------------------------------------------
    def make_problem(self):
        return make_problem(self.problem, self.d, T=self.T, x0=self.x0, **self.params)

    def training_config(self):
        return TrainingConfig(
            batch_size=self.batch_size,
            iterations=self.iterations,
            lr0=self.lr0,
            period=self.period,
            min_improvement=self.min_improvement,
            test_every=self.test_every,
            test_size=self.test_size,
            final_test_size=self.final_test_size,
            scaler_paths=self.scaler_paths,
            n_steps=self.N,
            lam=self.lam,
            n_inner=self.n_inner,
            fp_batch_size=self.fp_batch_size,
            seed=self.seed,
        )

    def network_spec(self):
        return nw.NetworkSpec(self.arch, self.d, h=self.h, w=self.w, n_steps=self.N)


def _parse_value(raw):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    return raw


# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    report: ErrorReport
    history: list
    wall_time: float
    config_hash: str
    version: str
    run_index: int
    seed: int
    axis: str | None = None
    axis_value: object = None
    status: str = "ok"
    error: str = ""

    def to_json(self):
        return {
            "report": self.report.to_json(),
            "history": [list(h) for h in self.history],
            "wall_time": self.wall_time,
            "config_hash": self.config_hash,
            "version": self.version,
            "run_index": self.run_index,
            "seed": self.seed,
            "axis": self.axis,
            "axis_value": self.axis_value,
            "status": self.status,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        rep = dict(obj.pop("report"))
        obj["report"] = ErrorReport(**rep)
        return cls(**obj)

    def result_hash(self):
        """Hash of everything except the wall time."""
        d = self.to_json()
        d.pop("wall_time")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=float).encode()).hexdigest()[:16]


def iterations_to_convergence(history, tol=0.05):
    """First recorded iteration whose test loss is within ``tol`` of the best one (informational)."""
    recs = [(h[0], h[2]) for h in history if h[2] is not None and math.isfinite(h[2])]
    if not recs:
        return None
    best = min(v for _, v in recs)
    return next(it for it, v in recs if v <= best * (1.0 + tol))


class RunFailed(RuntimeError):
    def __init__(self, msg, result):
        super().__init__(msg)
        self.result = result


def _run_dir(config, run_index):
    return os.path.join(config.output_dir, f"{config.hash()}_r{run_index}")


def run(config, run_index=0, axis=None, axis_value=None, save=True):
    """Build, train, evaluate and persist one experiment."""
    seed = derive_seed(config.seed, "run", run_index)
    problem = config.make_problem()
    tcfg = config.training_config()
    spec = config.network_spec()
    cache = BaselineCache(os.path.join(config.output_dir, "baselines.json")) if save else None
    out = _run_dir(config, run_index)
    t0 = time.perf_counter()
    history = []
    state = None
    try:
        if config.solver == "dbsde":
            state = dbsde.train(problem, spec, tcfg, seed=seed, loss_kind=config.loss, on_record=history.append)
            report = dbsde.evaluate(
                state,
                n_paths=config.final_test_size,
                n_ref=config.n_ref,
                n_ref_paths=config.traj_count,
                baseline_samples=config.baseline_samples,
                cache=cache,
            )
        else:
            state = fp.train_fixed_point(problem, spec, tcfg, seed=seed, on_record=history.append)
            report = fp.evaluate(
                state,
                n_eval_point=config.n_eval_point,
                n_eval_traj=config.n_eval_traj,
                traj_count=config.traj_count,
                n_ref=config.n_ref,
                baseline_samples=config.baseline_samples,
                cache=cache,
            )
        status, err = "ok", ""
    except TrainingDiverged as exc:
        report, status, err = ErrorReport(), "diverged", str(exc)
        history = exc.history or history
    if status == "ok":
        log.info("run %d: test loss within 5%% of its minimum from iteration %s", run_index, iterations_to_convergence(history))
    res = RunResult(report, history, time.perf_counter() - t0, config.hash(), __version__, run_index, seed, axis, axis_value, status, err)
    if save:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.json"), "w") as fh:
            json.dump(config.to_dict(), fh, indent=1, sort_keys=True)
        with open(os.path.join(out, "config.ini"), "w") as fh:
            fh.write(config.to_ini())
        with open(os.path.join(out, "result.json"), "w") as fh:
            json.dump(res.to_json(), fh, indent=1, sort_keys=True, default=float)
        if state is not None:
            nw.save_checkpoint(state.net, os.path.join(out, "checkpoint"), extra={"scaler": state.scaler.to_json()})
    if status != "ok":
        raise RunFailed(f"run {run_index} failed: {err}", res)
    return res


AXES_FIELDS = {"N", "T", "d", "n_inner", "lam", "iterations", "arch", "n_eval", "n_eval_point", "n_eval_traj", "batch_size", "h", "w"}


def config_for_axis(config, axis, value):
    """Config with one axis set; problem parameters (e.g. r) go to the driver."""
    if axis == "T":
        c = config.replace(T=float(value))
        return c.replace(N=int(round(100 * float(value)))) if config.couple_maturity else c
    if axis == "n_eval":
        return config.replace(n_eval_point=int(value), n_eval_traj=int(value))
    if axis in AXES_FIELDS:
        f = {f.name: f for f in dataclasses.fields(config)}[axis]
        typ = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        if "int" in typ:
            value = int(value)
        elif "float" in typ:
            value = float(value)
        return config.replace(**{axis: value})
    cls = type(config.make_problem())
    if axis in cls.defaults:
        return config.replace(params={**config.params, axis: float(value)})
    raise ValueError(f"unknown sweep axis {axis!r}")


def sweep(config, axis=None, values=None, repeats=None):
    """One run per (value, repeat); failures are recorded and the sweep continues."""
    axis = axis if axis is not None else config.axis
    values = list(values if values is not None else config.values)
    repeats = config.repeats if repeats is None else repeats
    results = []
    if not axis or not values:
        cfgs = [(None, None, config)]
    else:
        cfgs = [(axis, v, config_for_axis(config, axis, v)) for v in values]
    for axis_name, value, cfg in cfgs:
        for r in range(repeats):
            try:
                results.append(run(cfg, run_index=r, axis=axis_name, axis_value=value))
            except RunFailed as exc:
                log.error("%s", exc)
                results.append(exc.result)
            except Exception as exc:  # isolate unexpected failures too
                log.error("run %s=%s #%d crashed: %s", axis_name, value, r, exc)
                results.append(
                    RunResult(ErrorReport(), [], 0.0, cfg.hash(), __version__, r, derive_seed(cfg.seed, "run", r), axis_name, value, "error", traceback.format_exc(limit=3))
                )
    return results


# ---------------------------------------------------------------------------
# reports

RUN_COLUMNS = ("config_hash", "axis", "axis_value", "run_index", "seed", "status") + ErrorReport.FIELDS
METRICS = ("rel_y0", "rel_z0", "int_y", "int_z", "final_test_loss")
SUMMARY_COLUMNS = ("axis", "axis_value", "n") + tuple(f"{m}_{s}" for m in METRICS for s in ("mean", "q05", "q95"))


def load_results(in_dir):
    out = []
    for root, _, files in sorted(os.walk(in_dir)):
        if "result.json" in files:
            with open(os.path.join(root, "result.json")) as fh:
                out.append(RunResult.from_json(json.load(fh)))
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _sort_key(r):
    v = r.axis_value
    return (str(r.axis), (0, float(v)) if isinstance(v, (int, float)) else (1, str(v)), r.run_index, r.config_hash)


def summarize(values):
    """(mean, q05, q95) with linear interpolation between order statistics; NaNs ignored."""
    a = np.asarray([v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))], dtype=float)
    if a.size == 0:
        return math.nan, math.nan, math.nan
    return float(a.mean()), float(np.quantile(a, 0.05)), float(np.quantile(a, 0.95))


def report(results, out_dir, figures=True):
    """runs.csv, summary.csv, timings.csv and (optionally) PNG figures."""
    os.makedirs(out_dir, exist_ok=True)
    results = sorted(results, key=_sort_key)
    runs_path = os.path.join(out_dir, "runs.csv")
    with open(runs_path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(RUN_COLUMNS)
        for r in results:
            row = r.report.row()
            wr.writerow(
                [_fmt(x) for x in (r.config_hash, r.axis, r.axis_value, r.run_index, r.seed, r.status)]
                + [_fmt(row[k]) for k in ErrorReport.FIELDS]
            )
    groups = {}
    for r in results:
        groups.setdefault((str(r.axis), r.axis_value if r.axis_value is not None else ""), []).append(r)
    summary_rows = []
    for (axis, value), rs in groups.items():
        ok = [r for r in rs if r.status == "ok"]
        row = [axis if axis != "None" else "", value, len(ok)]
        for m in METRICS:
            row += list(summarize([getattr(r.report, m) for r in ok]))
        summary_rows.append(row)
    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SUMMARY_COLUMNS)
        for row in summary_rows:
            wr.writerow([_fmt(x) for x in row])
    with open(os.path.join(out_dir, "timings.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("config_hash", "run_index", "wall_time", "iterations_to_convergence"))
        for r in results:
            wr.writerow((r.config_hash, r.run_index, _fmt(r.wall_time), _fmt(iterations_to_convergence(r.history))))
    paths = [runs_path, summary_path]
    if figures:
        from .plotting import plot_report

        paths += plot_report(results, summary_rows, out_dir)
    return paths
