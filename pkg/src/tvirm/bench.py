"""Repetition harness: data per seed, training, evaluation, aggregation and emission."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import envgen
from .autodiff import GraphError
from .dataio import Batch, CsvSchema, DataError, apply_standardize, fit_standardize, load_csv, standardize_labels_within
from .models import ParamSet
from .trainer import Report, TrainConfig, TrainingDiverged, evaluate, train

log = logging.getLogger(__name__)

AGGREGATE_COLUMNS = ("method", "mean", "worst", "std_mean", "std_worst")


# --- data sources ------------------------------------------------------------


@dataclass(frozen=True)
class SimulationData:
    p_s_minus: float = 0.999
    p_s_plus: float = 0.9
    p_v: float = 0.8
    n_per_env: int = 5000
    n_test_per_env: int = 5000


@dataclass(frozen=True)
class RegressionData:
    n_train: int = 5000
    n_test: int = 5000
    slope_1900: float = 2.0
    slope_2000: float = -1.0
    label_noise: float = 0.5
    spurious_noise: float = 0.5


@dataclass(frozen=True)
class CsvData:
    """Pre-split CSV files. ``env`` names an integer environment column."""

    train: str
    test: tuple[str, ...]
    features: tuple[str, ...]
    label: str
    aux: tuple[str, ...] = ()
    env: str | None = None
    task: str = "classification"
    standardize: bool = True
    label_group: str | None = None  # standardize labels within groups of this column


DataSource = SimulationData | RegressionData | CsvData


@dataclass(frozen=True)
class Task:
    train: Batch
    tests: list[Batch]
    kind: str  # "classification" or "regression"
    invariant: tuple[int, ...] = ()  # columns known to be invariant, if any


def make_task(source: DataSource, seed: int) -> Task:
    """Materialize one repetition's data. Synthetic sources draw everything from ``seed``."""
    s_train, s_test = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    invariant = tuple(range(envgen.N_INVARIANT))
    if isinstance(source, SimulationData):
        tr = envgen.make_train_set(source.p_s_minus, source.p_s_plus, source.p_v, source.n_per_env, s_train)
        te = envgen.make_test_suite(source.p_v, source.n_test_per_env, s_test)
        return Task(tr, te, "classification", invariant)
    if isinstance(source, RegressionData):
        spec = envgen.RegressionSpec(
            n=source.n_train, slope_1900=source.slope_1900, slope_2000=source.slope_2000,
            label_noise=source.label_noise, spurious_noise=source.spurious_noise,
        )
        tr, te = envgen.make_regression_task(spec, source.n_test, seed)
        return Task(tr, te, "regression", invariant)
    if isinstance(source, CsvData):
        return _csv_task(source)
    raise TypeError(f"unsupported data source {type(source).__name__}")


def _csv_task(source: CsvData) -> Task:
    schema = CsvSchema(features=list(source.features), label=source.label, aux=list(source.aux), env=source.env)
    tr = load_csv(source.train, schema)
    te = [load_csv(p, schema) for p in source.test]
    if source.label_group is not None:
        tr = standardize_labels_within(tr, source.label_group)
        te = [standardize_labels_within(b, source.label_group) for b in te]
    if source.standardize:
        state = fit_standardize(tr)
        tr, te = apply_standardize(state, tr), [apply_standardize(state, b) for b in te]
    return Task(tr, te, source.task)


# --- feature weights ---------------------------------------------------------------


@dataclass(frozen=True)
class FeatureWeights:
    weights: np.ndarray  # |w_i| / sum_j |w_j|
    invariant_share: float | None


def feature_weight_report(params: ParamSet, invariant: Sequence[int] = (), prefix: str = "phi") -> FeatureWeights:
    """Normalized absolute first-layer weights per input, plus the share of ``invariant`` inputs.

    With several output units the absolute weights are summed over outputs.
    """
    w = np.abs(np.asarray(params[f"{prefix}.0.weight"], dtype=np.float64))
    per_input = w.sum(axis=1)
    total = per_input.sum()
    if total == 0:
        raise ValueError("all first-layer weights are zero")
    norm = per_input / total
    share = float(norm[list(invariant)].sum()) if len(invariant) else None
    return FeatureWeights(norm, share)


# --- repetitions -------------------------------------------------------------------


@dataclass(frozen=True)
class Experiment:
    data: DataSource
    train: TrainConfig
    base_seed: int = 0


@dataclass
class RepResult:
    rep: int
    seed: int
    report: Report | None = None
    invariant_share: float | None = None
    final_objective: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {
            "rep": self.rep,
            "seed": self.seed,
            "report": None if self.report is None else self.report.to_dict(),
            "invariant_share": self.invariant_share,
            "final_objective": self.final_objective,
            "error": self.error,
        }


def run_repetition(exp: Experiment, rep: int) -> RepResult:
    """Repetition ``rep``: data, initialization and shuffling all use ``base_seed + rep``."""
    seed = exp.base_seed + rep
    try:
        task = make_task(exp.data, seed)
        config = replace(exp.train, seed=seed)
        result = train(task.train, config)
        report = evaluate(result.phi_arch, result.phi, task.tests, task.kind, task.train)
    except (TrainingDiverged, GraphError, DataError, FloatingPointError) as err:
        return RepResult(rep, seed, error=f"{type(err).__name__}: {err}")
    share = None
    if task.invariant and not exp.train.phi_hidden:
        share = feature_weight_report(result.phi, task.invariant).invariant_share
    last = result.history[-1].total if result.history else None
    return RepResult(rep, seed, report, share, last)


@dataclass
class Aggregate:
    method: str
    task: str
    results: list[RepResult]
    mean: float
    worst: float
    std_mean: float | None  # None when fewer than two repetitions succeeded
    std_worst: float | None
    invariant_share: float | None = None
    failures: list[RepResult] = field(default_factory=list)

    @property
    def std_flagged(self) -> bool:
        return self.std_mean is None

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("method", "task", "mean", "worst", "std_mean", "std_worst", "invariant_share")}
        d["reps"] = len(self.results)
        d["failed"] = [r.rep for r in self.failures]
        return d


def aggregate(method: str, results: Sequence[RepResult]) -> Aggregate:
    """Mean and sample STD (ddof 1) of the mean and worst metrics over successful repetitions."""
    results = sorted(results, key=lambda r: r.rep)
    ok = [r for r in results if r.ok]
    failed = [r for r in results if not r.ok]
    if failed:
        warnings.warn(f"{len(failed)} of {len(results)} repetitions failed; aggregating the rest", RuntimeWarning)
    if not ok:
        raise RuntimeError("every repetition failed")
    means = np.array([r.report.mean for r in ok])
    worsts = np.array([r.report.worst for r in ok])
    if len(ok) >= 2:
        std_mean, std_worst = float(np.std(means, ddof=1)), float(np.std(worsts, ddof=1))
    else:
        std_mean = std_worst = None
    shares = [r.invariant_share for r in ok if r.invariant_share is not None]
    share = float(np.mean(shares)) if len(shares) == len(ok) else None
    return Aggregate(method, ok[0].report.task, ok, float(means.mean()), float(worsts.mean()),
                     std_mean, std_worst, share, failed)


def bench(exp: Experiment, reps: int, jobs: int = 1) -> Aggregate:
    """Run ``reps`` independent repetitions, optionally in ``jobs`` processes.

    Every repetition owns its seeds, so the aggregate does not depend on ``jobs``.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if jobs < 1:
        raise ValueError("jobs must be at least 1")
    if jobs == 1:
        results = [run_repetition(exp, r) for r in range(reps)]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_repetition, [exp] * reps, range(reps)))
    for r in results:
        if r.ok:
            log.info("rep %d seed %d mean %.4f worst %.4f", r.rep, r.seed, r.report.mean, r.report.worst)
        else:
            log.warning("rep %d seed %d failed: %s", r.rep, r.seed, r.error)
    return aggregate(exp.train.method.name, results)


# --- emission ----------------------------------------------------------------------


def write_jsonl(path: str | Path, agg: Aggregate, config: dict | None = None) -> None:
    """One JSON record per repetition, failed ones included."""
    rows = sorted(agg.results + agg.failures, key=lambda r: r.rep)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            rec = {"method": agg.method, "task": agg.task, **r.to_dict()}
            if config is not None:
                rec["config"] = config
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_aggregate_csv(path: str | Path, aggs: Sequence[Aggregate], config: dict | None = None) -> None:
    """Columns ``method, mean, worst, std_mean, std_worst``; an empty cell marks a flagged STD.

    ``config`` is echoed as ``#`` comment lines above the header.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if config is not None:
            fh.write("# config " + json.dumps(config, sort_keys=True) + "\n")
            fh.write("# task " + ",".join(a.task for a in aggs) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for a in aggs:
            w.writerow([a.method, repr(a.mean), repr(a.worst),
                        "" if a.std_mean is None else repr(a.std_mean),
                        "" if a.std_worst is None else repr(a.std_worst)])


@dataclass(frozen=True)
class TableRow:
    method: str
    mean: float
    worst: float
    std_mean: float | None
    std_worst: float | None


def read_aggregate_csv(path: str | Path) -> tuple[list[TableRow], str]:
    """Rows of an aggregate CSV and its task (``classification`` unless recorded otherwise)."""
    task = "classification"
    with open(path, encoding="utf-8") as fh:
        lines = []
        for line in fh:
            if line.startswith("# task "):
                kinds = set(line[len("# task "):].strip().split(","))
                task = "regression" if kinds == {"regression"} else "classification"
            elif not line.startswith("#"):
                lines.append(line)
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != AGGREGATE_COLUMNS:
        raise DataError(f"aggregate CSV must have columns {', '.join(AGGREGATE_COLUMNS)}")
    opt = lambda s: None if s == "" else float(s)  # noqa: E731
    rows = [TableRow(r["method"], float(r["mean"]), float(r["worst"]), opt(r["std_mean"]), opt(r["std_worst"]))
            for r in reader]
    return rows, task


def render_table(rows: Sequence[TableRow | Aggregate], task: str = "classification") -> str:
    """Fixed-width text table. Accuracies print as percentages with 2 decimals, MSE with 4."""
    if task == "classification":
        fmt = lambda v: "-" if v is None else f"{100.0 * v:.2f}"  # noqa: E731
    else:
        fmt = lambda v: "-" if v is None else f"{v:.4f}"  # noqa: E731
    width = max([len("Method")] + [len(r.method) for r in rows])
    head = f"{'Method':<{width}}  {'Mean':>9}  {'Worst':>9}  {'STD mean':>9}  {'STD worst':>9}"
    out = [head, "-" * len(head)]
    for r in rows:
        out.append(f"{r.method:<{width}}  {fmt(r.mean):>9}  {fmt(r.worst):>9}  "
                   f"{fmt(r.std_mean):>9}  {fmt(r.std_worst):>9}")
    return "\n".join(out)


def experiment_dict(exp: Experiment) -> dict:
    """Plain-data view of an experiment, for provenance records."""
    d = asdict(exp)
    d["train"]["method"] = exp.train.method.name
    d["train"]["loss"] = exp.train.loss.name
    d["data"] = {"kind": type(exp.data).__name__, **d["data"]}
    return d
