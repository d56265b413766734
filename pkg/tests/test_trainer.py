import numpy as np
import pytest

from tvirm import fixtures
from tvirm.autodiff import NonFiniteError, graph_backward, graph_eval
from tvirm.dataio import Batch
from tvirm.objectives import Method
from tvirm.risk import LossKind
from tvirm.trainer import (
    TrainConfig,
    TrainingDiverged,
    adam_init,
    adam_step,
    build_problem,
    evaluate,
    fit,
    predictor_arch,
    summarize,
    train,
)


def test_adam_zero_gradient_keeps_params():
    p = {"a": np.array([1.0, -2.0])}
    state = adam_init(p)
    for _ in range(5):
        q, state = adam_step(p, {"a": np.zeros(2)}, state, 0.1)
        assert np.array_equal(q["a"], p["a"])


def test_adam_constant_gradient_step_tends_to_sign():
    p = {"a": np.zeros(3)}
    g = {"a": np.array([0.3, -5.0, 1e-3])}
    state, lr = adam_init(p), 1e-3
    for _ in range(1000):
        new, state = adam_step(p, g, state, lr)
        step, p = new["a"] - p["a"], new
    np.testing.assert_allclose(step, -np.sign(g["a"]) * lr, rtol=1e-4)


def test_adam_first_step_is_lr():
    # bias correction makes the first update exactly lr * g / (|g| + eps)
    p = {"a": np.array([0.0])}
    q, _ = adam_step(p, {"a": np.array([4.0])}, adam_init(p), 0.01)
    assert q["a"][0] == pytest.approx(-0.01 * 4.0 / (4.0 + 1e-8), abs=1e-16)


def test_adam_rejects_nonfinite_gradient():
    p = {"a": np.zeros(1)}
    with pytest.raises(NonFiniteError):
        adam_step(p, {"a": np.array([np.nan])}, adam_init(p), 0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_phi=0.0)
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)


@pytest.mark.parametrize("method", [Method.IRM_TV_L1, Method.MINIMAX_TV_L1])
@pytest.mark.parametrize("lam", [1.0, 0.1])
def test_toy_converges_to_closed_form(method, lam):
    prob = fixtures.toy_problem(method)
    res = fit(prob, TrainConfig(method=method, lam=lam, epochs=2000, lr_phi=1e-2, lr_rho=1e-2))
    phi_star, val_star = fixtures.toy_optimum(lam)
    vals = graph_eval(prob.graph, {**res.phi, **res.rho, "lambda": np.asarray(lam)})
    assert abs(res.phi["phi"][0, 0] - phi_star) <= 0.01
    assert abs(vals[prob.objective.total.id] - val_star) <= (0.003 if lam == 1.0 else 0.005)


def test_toy_history_non_increasing_at_small_step():
    prob = fixtures.toy_problem(Method.IRM_TV_L1, phi0=-0.5)
    res = fit(prob, TrainConfig(method=Method.IRM_TV_L1, lam=1.0, epochs=10, lr_phi=1e-3))
    totals = [h.total for h in res.history]
    assert all(b <= a for a, b in zip(totals, totals[1:]))


def test_rho_ascent_does_not_decrease_penalty():
    # freeze phi by giving it a vanishing step; phi = 0.3 keeps every g_e nonzero
    prob = fixtures.toy_problem(Method.MINIMAX_TV_L2, phi0=0.3, seed=4)
    pens = []

    def record(epoch, phi, rho):
        vals = graph_eval(prob.graph, {**phi, **rho, "lambda": np.asarray(1.0)})
        pens.append(float(vals[prob.objective.penalty.id]))

    cfg = TrainConfig(method=Method.MINIMAX_TV_L2, lam=1.0, epochs=30, lr_phi=1e-300, lr_rho=1e-3)
    fit(prob, cfg, record)
    assert all(b >= a - 1e-12 for a, b in zip(pens, pens[1:]))
    assert pens[-1] > pens[0]


def test_rho_ascent_uses_penalty_gradient_only():
    prob = fixtures.toy_problem(Method.MINIMAX_TV_L1, phi0=0.3, seed=1)
    feed = {**prob.phi, **prob.rho, "lambda": np.asarray(1.0)}
    graph_eval(prob.graph, feed)
    total = graph_backward(prob.graph, prob.objective.total, wrt=set(prob.rho))
    pen = graph_backward(prob.graph, prob.objective.penalty, wrt=set(prob.rho))
    # the risk term does not depend on rho, so both gradients agree
    for k in prob.rho:
        np.testing.assert_allclose(total[k], pen[k], rtol=0, atol=1e-15)


def separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 2))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(float)
    return Batch(X=X, y=y, env_ids=(np.arange(n) % 2), z=rng.random((n, 1)))


def test_erm_fits_separable_data():
    b = separable()
    res = train(b, TrainConfig(method=Method.ERM, epochs=200, lr_phi=0.05))
    rep = evaluate(res.phi_arch, res.phi, [b], train_batch=b)
    assert rep.train == 1.0


@pytest.mark.parametrize("method", list(Method))
def test_training_is_deterministic(method):
    b = separable(80, 1)
    cfg = TrainConfig(method=method, lam=2.0, epochs=15, lr_phi=1e-2, seed=3, batch_size=32, phi_hidden=(4,))
    a, c = train(b, cfg), train(b, cfg)
    assert a.history == c.history
    for k in a.phi:
        assert np.array_equal(a.phi[k], c.phi[k])


def test_lambda_zero_matches_erm_trajectory():
    b = separable(100, 2)
    base = dict(epochs=20, lr_phi=1e-2, seed=5)
    erm = train(b, TrainConfig(method=Method.ERM, **base))
    # a single partition makes the partition mean the global mean
    b1 = Batch(X=b.X, y=b.y, env_ids=np.zeros(len(b), dtype=int))
    irm = train(b1, TrainConfig(method=Method.IRM_TV_L1, lam=0.0, **base))
    assert [h.total for h in erm.history] == [h.total for h in irm.history]


def test_warmup_holds_penalty_off():
    b = separable(100, 3)
    cfg = TrainConfig(method=Method.IRM_TV_L2, lam=50.0, epochs=6, warmup_epochs=3, lr_phi=1e-2)
    hist = train(b, cfg).history
    assert all(h.total == h.risk_term for h in hist[:3])
    assert all(h.total == pytest.approx(h.risk_term + 50.0 * h.penalty_term) for h in hist[3:])


def test_missing_columns_rejected():
    b = Batch(X=np.zeros((4, 2)), y=np.zeros(4))
    with pytest.raises(ValueError, match="environment labels"):
        build_problem(b, TrainConfig(method=Method.IRM_TV_L1))
    with pytest.raises(ValueError, match="auxiliary"):
        build_problem(b, TrainConfig(method=Method.MINIMAX_TV_L1))


def test_divergence_aborts_with_history():
    X = np.array([[1e200], [-1e200]])
    b = Batch(X=X, y=np.array([1e200, -1e200]), env_ids=np.array([0, 1]))
    cfg = TrainConfig(method=Method.IRM_TV_L2, loss=LossKind.MSE, epochs=5, lr_phi=1.0)
    with pytest.raises(TrainingDiverged) as info:
        train(b, cfg)
    assert info.value.epoch == 0 and info.value.history == []


def test_multiclass_training_runs():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((90, 3))
    y = X.argmax(axis=1).astype(float)
    b = Batch(X=X, y=y, env_ids=np.arange(90) % 3)
    res = train(b, TrainConfig(method=Method.VREX, loss=LossKind.MULTI_CE, n_classes=3, epochs=100, lr_phi=0.05))
    assert evaluate(res.phi_arch, res.phi, [b]).mean > 0.9


def test_summaries():
    rep = summarize([0.9, 0.8, 0.7, 0.6], "classification")
    assert (rep.mean, rep.worst) == (pytest.approx(0.75), 0.6)
    rep = summarize([0.2, 0.5], "regression")
    assert (rep.mean, rep.worst) == (pytest.approx(0.35), 0.5)


def test_evaluate_perfect_classifier(rng):
    arch = predictor_arch(2, TrainConfig())
    params = {"phi.0.weight": np.array([[1.0], [0.0]]), "phi.0.bias": np.zeros(1)}
    batches = []
    for _ in range(4):
        X = rng.standard_normal((30, 2))
        batches.append(Batch(X=X, y=(X[:, 0] > 0).astype(float)))
    rep = evaluate(arch, params, batches)
    assert rep.per_env == [1.0] * 4 and rep.mean == 1.0 and rep.worst == 1.0
