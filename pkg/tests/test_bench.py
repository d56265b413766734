import csv
import json

import numpy as np
import pytest

from tvirm.bench import (
    Experiment,
    RepResult,
    SimulationData,
    RegressionData,
    CsvData,
    aggregate,
    bench,
    experiment_dict,
    feature_weight_report,
    make_task,
    read_aggregate_csv,
    read_jsonl,
    render_table,
    write_aggregate_csv,
    write_jsonl,
)
from tvirm.dataio import write_csv
from tvirm.envgen import SyntheticSpec, generate_synthetic
from tvirm.objectives import Method
from tvirm.trainer import Report, TrainConfig, summarize

SMALL = SimulationData(n_per_env=150, n_test_per_env=100)


def small_exp(method=Method.IRM_TV_L1, **kw):
    cfg = TrainConfig(method=method, lam=1.0, epochs=20, lr_phi=1e-2, **kw)
    return Experiment(SMALL, cfg, base_seed=3)


def rep(i, mean, worst, share=None):
    return RepResult(i, i, Report("classification", [mean, worst], mean, worst), share)


def test_feature_weights_examples():
    fw = feature_weight_report({"phi.0.weight": np.array([[1.0], [-1.0], [2.0]])})
    assert fw.weights.tolist() == [0.25, 0.25, 0.5] and fw.invariant_share is None
    fw = feature_weight_report({"phi.0.weight": np.full((15, 1), 0.3)}, invariant=range(5))
    assert fw.invariant_share == pytest.approx(1 / 3, abs=1e-15)


def test_feature_weights_all_zero():
    with pytest.raises(ValueError):
        feature_weight_report({"phi.0.weight": np.zeros((3, 1))})


def test_single_rep_aggregate_equals_report():
    agg = aggregate("ERM", [rep(0, 0.8, 0.6)])
    assert (agg.mean, agg.worst) == (0.8, 0.6)
    assert agg.std_flagged and agg.std_worst is None


def test_std_is_sample_std():
    means, worsts = [0.7, 0.8, 0.75, 0.9], [0.5, 0.6, 0.55, 0.4]
    agg = aggregate("X", [rep(i, m, w) for i, (m, w) in enumerate(zip(means, worsts))])
    m = np.array(means)
    assert agg.std_mean == pytest.approx(np.sqrt(((m - m.mean()) ** 2).sum() / (len(m) - 1)), abs=1e-15)
    assert agg.std_worst == pytest.approx(np.std(worsts, ddof=1), abs=1e-15)


def test_failures_are_excluded_with_warning():
    bad = RepResult(2, 2, error="TrainingDiverged: boom")
    with pytest.warns(RuntimeWarning):
        agg = aggregate("X", [rep(0, 0.8, 0.6), rep(1, 0.6, 0.4), bad])
    assert agg.mean == pytest.approx(0.7) and [r.rep for r in agg.failures] == [2]
    with pytest.warns(RuntimeWarning), pytest.raises(RuntimeError):
        aggregate("X", [bad])


def test_bench_is_deterministic_and_reports_share():
    a, b = bench(small_exp(), 2), bench(small_exp(), 2)
    assert a.to_dict() == b.to_dict()
    assert [r.seed for r in a.results] == [3, 4]
    assert 0.0 < a.invariant_share < 1.0


def test_parallel_equals_serial():
    exp = small_exp(Method.MINIMAX_TV_L1)
    serial, parallel = bench(exp, 3, jobs=1), bench(exp, 3, jobs=2)
    assert serial.to_dict() == parallel.to_dict()
    for x, y in zip(serial.results, parallel.results):
        assert x.to_dict() == y.to_dict()


def test_bench_reps_validated():
    with pytest.raises(ValueError):
        bench(small_exp(), 0)


def test_make_task_is_seeded():
    a, b = make_task(SMALL, 7), make_task(SMALL, 7)
    assert np.array_equal(a.train.X, b.train.X)
    assert len(a.tests) == 4 and a.invariant == (0, 1, 2, 3, 4)
    assert not np.array_equal(make_task(SMALL, 8).train.X, a.train.X)


def test_regression_task():
    task = make_task(RegressionData(n_train=500, n_test=300), 1)
    assert task.kind == "regression" and len(task.tests) == 5


def test_csv_task(tmp_path):
    for name, seed in (("train", 1), ("test", 2)):
        write_csv(tmp_path / f"{name}.csv", generate_synthetic(SyntheticSpec(0.9, 0.9, 0.8, 120, seed)))
    feats = tuple(f"xv{i}" for i in range(5)) + tuple(f"xs{i}" for i in range(10))
    src = CsvData(train=str(tmp_path / "train.csv"), test=(str(tmp_path / "test.csv"),),
                  features=feats, label="y", aux=("t",), env="env")
    task = make_task(src, 0)
    np.testing.assert_allclose(task.train.X.mean(axis=0), 0.0, atol=1e-12)
    assert task.train.env_ids is not None and task.train.z.shape == (120, 1)
    exp = Experiment(src, TrainConfig(method=Method.VREX, epochs=5))
    assert bench(exp, 1).results[0].ok


def test_emission_roundtrip(tmp_path):
    agg = aggregate("IRM_TV_L1", [rep(0, 0.8, 0.6, 0.7), rep(1, 0.7, 0.5, 0.6)])
    cfg = {"train": {"lam": 1.0}}
    write_jsonl(tmp_path / "r.jsonl", agg, cfg)
    recs = read_jsonl(tmp_path / "r.jsonl")
    assert [r["rep"] for r in recs] == [0, 1] and recs[0]["config"] == cfg
    write_aggregate_csv(tmp_path / "a.csv", [agg], cfg)
    text = (tmp_path / "a.csv").read_text()
    assert text.startswith("# config ") and json.loads(text.splitlines()[0][len("# config "):]) == cfg
    rows, task = read_aggregate_csv(tmp_path / "a.csv")
    assert task == "classification"
    assert (rows[0].method, rows[0].mean, rows[0].std_mean) == ("IRM_TV_L1", agg.mean, agg.std_mean)


def test_flagged_std_is_empty_cell(tmp_path):
    write_aggregate_csv(tmp_path / "a.csv", [aggregate("ERM", [rep(0, 0.8, 0.6)])])
    row = list(csv.DictReader(open(tmp_path / "a.csv")))[0]
    assert row["std_mean"] == "" and row["std_worst"] == ""
    rows, _ = read_aggregate_csv(tmp_path / "a.csv")
    assert rows[0].std_mean is None


def test_render_table_formats():
    agg = aggregate("MINIMAX_TV_L1", [rep(0, 0.7731, 0.7454), rep(1, 0.7731, 0.7454)])
    lines = render_table([agg]).splitlines()
    assert lines[0].split() == ["Method", "Mean", "Worst", "STD", "mean", "STD", "worst"]
    assert lines[2].split() == ["MINIMAX_TV_L1", "77.31", "74.54", "0.00", "0.00"]
    r = RepResult(0, 0, summarize([0.2, 0.5], "regression"))
    line = render_table([aggregate("ERM", [r])], "regression").splitlines()[2]
    assert line.split() == ["ERM", "0.3500", "0.5000", "-", "-"]
    # fixed width: every line the same length
    assert len({len(s) for s in lines}) == 1


def test_experiment_dict_is_plain_data():
    d = experiment_dict(small_exp())
    assert d["train"]["method"] == "IRM_TV_L1" and d["data"]["kind"] == "SimulationData"
    json.dumps(d)
