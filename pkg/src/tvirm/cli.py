"""Command-line entry point: ``tvirm {gen,train,bench,gradcheck,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import bench as bench_mod
from .autodiff import GraphError
from .config import ConfigError, dump_config, experiment, load_config
from .dataio import CsvSchema, DataError, write_csv
from .gradcheck import run_gradcheck, summarize_by_method
from .models import save_params
from .objectives import Method
from .trainer import TrainingDiverged, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config file")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                        help="override a config key, e.g. train.lam=10 (repeatable)")
    common.add_argument("--seed", type=int, help="base seed (bench.base_seed)")
    common.add_argument("--method", help="training method (train.method)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="tvirm", description="Total-variation invariant risk minimization experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="write synthetic train/test CSV files")
    sub.add_parser("train", parents=[common], help="train once; write parameters, history and report")
    b = sub.add_parser("bench", parents=[common], help="run repetitions; write per-run records and the aggregate")
    b.add_argument("--reps", type=int, help="number of repetitions (bench.reps)")
    b.add_argument("--jobs", type=int, help="worker processes (bench.jobs)")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every objective")
    g.add_argument("--seeds", type=int, default=10, help="random cases per objective (default: 10)")
    r = sub.add_parser("report", parents=[common], help="render an aggregate CSV as a text table")
    r.add_argument("aggregate", help="aggregate CSV written by bench")
    return p


def _effective_config(args) -> dict:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"bench.base_seed={args.seed}")
    if args.method is not None:
        overrides.append(f"train.method={args.method}")
    if getattr(args, "reps", None) is not None:
        overrides.append(f"bench.reps={args.reps}")
    if getattr(args, "jobs", None) is not None:
        overrides.append(f"bench.jobs={args.jobs}")
    return load_config(args.config, overrides)


def _write_config(out: Path, cfg: dict) -> None:
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")


def cmd_gen(cfg: dict, out: Path) -> None:
    exp = experiment(cfg)
    if not isinstance(exp.data, (bench_mod.SimulationData, bench_mod.RegressionData)):
        raise ConfigError("data.kind", "gen needs a synthetic data kind")
    task = bench_mod.make_task(exp.data, exp.base_seed)
    # environments are a function of t, so only features, label and t are written
    schema = CsvSchema(features=tuple(task.train.feature_names), label="y", time="t")
    write_csv(out / "train.csv", task.train, schema)
    for k, b in enumerate(task.tests):
        write_csv(out / f"test_{k}.csv", b, schema)
    _write_config(out, cfg)
    print(f"wrote train.csv ({len(task.train)} rows) and {len(task.tests)} test files to {out}")


def cmd_train(cfg: dict, out: Path) -> None:
    exp = experiment(cfg)
    task = bench_mod.make_task(exp.data, exp.base_seed)
    result = train(task.train, exp.train)
    report = evaluate(result.phi_arch, result.phi, task.tests, task.kind, task.train)
    save_params(out / "phi.npz", result.phi)
    if result.rho:
        save_params(out / "rho.npz", result.rho)
    with open(out / "history.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,total,risk,penalty\n")
        for i, h in enumerate(result.history):
            fh.write(f"{i},{h.total!r},{h.risk_term!r},{h.penalty_term!r}\n")
    record = {"report": report.to_dict(), "config": cfg}
    if task.invariant and not exp.train.phi_hidden:
        fw = bench_mod.feature_weight_report(result.phi, task.invariant)
        record["feature_weights"] = fw.weights.tolist()
        record["invariant_share"] = fw.invariant_share
    (out / "report.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_config(out, cfg)
    agg = bench_mod.aggregate(exp.train.method.name, [bench_mod.RepResult(0, exp.base_seed, report)])
    print(bench_mod.render_table([agg], task.kind))


def cmd_bench(cfg: dict, out: Path) -> None:
    exp = experiment(cfg)
    agg = bench_mod.bench(exp, cfg["bench"]["reps"], cfg["bench"]["jobs"])
    stem = agg.method.lower()
    bench_mod.write_jsonl(out / f"{stem}.jsonl", agg, cfg)
    bench_mod.write_aggregate_csv(out / f"{stem}.csv", [agg], cfg)
    _write_config(out, cfg)
    print(bench_mod.render_table([agg], agg.task))
    if agg.std_flagged:
        print("note: STD needs at least two successful repetitions")
    if agg.failures:
        print(f"note: {len(agg.failures)} repetition(s) failed; see {stem}.jsonl")


def cmd_gradcheck(cfg: dict, out: Path, n_seeds: int) -> bool:
    base = cfg["bench"]["base_seed"]
    results = run_gradcheck(seeds=range(base, base + n_seeds))
    worst = summarize_by_method(results)
    ok = True
    for name in (m.name for m in Method):
        flag = "ok" if worst[name] < 1e-4 else "FAIL"
        ok = ok and flag == "ok"
        print(f"{name:<14} max relative error {worst[name]:.3e}  {flag}")
    return ok


def cmd_report(path: str) -> None:
    rows, task = bench_mod.read_aggregate_csv(path)
    print(bench_mod.render_table(rows, task))


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "report":
            cmd_report(args.aggregate)
            return EXIT_OK
        cfg = _effective_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen":
            cmd_gen(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "bench":
            cmd_bench(cfg, out)
        elif args.command == "gradcheck":
            return EXIT_OK if cmd_gradcheck(cfg, out, args.seeds) else EXIT_RUNTIME
        return EXIT_OK
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TrainingDiverged, GraphError, FloatingPointError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
