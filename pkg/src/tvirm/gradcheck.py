"""Finite-difference check of reverse-mode gradients on every training objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Graph, graph_backward, graph_eval
from .dataio import Batch
from .objectives import Method
from .risk import LossKind
from .trainer import TrainConfig, build_problem

KINK_OPS = ("abs", "relu")


@dataclass(frozen=True)
class CheckResult:
    method: Method
    seed: int
    loss: LossKind
    max_rel_error: float
    n_checked: int
    n_excluded: int


def _kink_inputs(graph: Graph, values) -> np.ndarray:
    parts = [values[parents[0]].ravel() for op, parents, _ in graph.nodes if op in KINK_OPS]
    return np.concatenate(parts) if parts else np.zeros(0)


def random_case(method: Method, seed: int, max_n: int = 256, max_width: int = 64):
    """A random small model, dataset and penalty weight for ``method``.

    The predictor has 1 to 3 layers with hidden widths up to ``max_width``;
    the loss is drawn from binary, multi-class and squared error.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(16, max_n + 1))
    d = int(rng.integers(1, 9))
    hidden = tuple(int(w) for w in rng.integers(1, max_width + 1, int(rng.integers(0, 3))))
    loss = [LossKind.BINARY_CE, LossKind.MULTI_CE, LossKind.MSE][int(rng.integers(3))]
    n_classes = int(rng.integers(3, 5)) if loss is LossKind.MULTI_CE else None
    if loss is LossKind.MSE:
        y = rng.standard_normal(n)
    else:
        y = rng.integers(0, n_classes or 2, n).astype(np.float64)
    n_part = int(rng.integers(2, 5))
    env = np.arange(n) % n_part  # every environment non-empty
    rng.shuffle(env)
    batch = Batch(X=rng.standard_normal((n, d)), y=y, z=rng.uniform(-1, 1, (n, int(rng.integers(1, 3)))), env_ids=env)
    config = TrainConfig(
        method=method, lam=float(rng.uniform(0.1, 10.0)), epochs=1, seed=int(rng.integers(2**31)),
        n_envs=int(rng.integers(2, 4)), loss=loss, n_classes=n_classes,
        phi_hidden=hidden, rho_hidden=int(rng.integers(1, 17)),
    )
    return batch, config


def check_case(batch: Batch, config: TrainConfig, h: float = 1e-4, kink_tol: float = 1e-6,
               perturb: float = 0.5, seed: int = 0) -> tuple[float, int, int]:
    """Max relative error between backward and central differences over all parameters.

    Parameters are jittered away from their (zero-bias) initialization first so
    that every path carries gradient; the jitter is redrawn while any
    absolute-value input lies within ``kink_tol`` of 0. Single coordinates
    are excluded when their +-h probes change the sign of any absolute-value
    or ReLU input. The numeric value is the central difference
    ``(f(p + h e_i) - f(p - h e_i)) / 2h``; relative error is
    ``|a - f| / max(|a|, |f|, s)`` with ``s`` a millionth of the largest
    analytic entry, so coordinates whose true gradient is 0 (for example
    environment weights when every soft derivative shares a sign) are
    compared at the scale of the whole gradient rather than of round-off.
    """
    prob = build_problem(batch, config)
    rng = np.random.default_rng(seed)
    data = {**prob.bind(None), "lambda": np.asarray(config.lam)}
    g, root = prob.graph, prob.objective.total

    for _ in range(20):
        params = {k: v + perturb * rng.standard_normal(v.shape) for k, v in {**prob.phi, **prob.rho}.items()}
        values = graph_eval(g, {**data, **params})
        abs_in = [values[p[0]].ravel() for op, p, _ in g.nodes if op == "abs"]
        if not abs_in or np.abs(np.concatenate(abs_in)).min() >= kink_tol:
            break
    else:
        raise RuntimeError("could not draw parameters away from the absolute-value kink")
    analytic = graph_backward(g, root, wrt=set(params))
    base_signs = np.sign(_kink_inputs(g, values))
    floor = max(1e-12, 1e-6 * max(float(np.abs(v).max(initial=0.0)) for v in analytic.values()))

    worst, checked, excluded = 0.0, 0, 0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            probes, crossed = [], False
            for step in (h, -h):
                probe = flat.copy()
                probe[i] += step
                vals = graph_eval(g, {**data, **params, name: probe.reshape(arr.shape)})
                probes.append(float(vals[root.id]))
                crossed = crossed or not np.array_equal(np.sign(_kink_inputs(g, vals)), base_signs)
            if crossed:
                excluded += 1
                continue
            fd = (probes[0] - probes[1]) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
            checked += 1
    return worst, checked, excluded


def run_gradcheck(methods: Sequence[Method] = tuple(Method), seeds: Sequence[int] = range(10),
                  h: float = 1e-4, max_n: int = 64, max_width: int = 16) -> list[CheckResult]:
    """One random case per (method, seed).

    The defaults keep the whole suite to seconds; each case costs one forward
    pass per parameter and probe, so ``max_n``/``max_width`` (up to 256/64)
    trade time for coverage.
    """
    out = []
    for method in methods:
        for seed in seeds:
            batch, config = random_case(method, seed, max_n, max_width)
            err, checked, excluded = check_case(batch, config, h, seed=seed)
            out.append(CheckResult(method, seed, config.loss, err, checked, excluded))
    return out


def summarize_by_method(results: Sequence[CheckResult]) -> dict[str, float]:
    worst: dict[str, float] = {}
    for r in results:
        worst[r.method.name] = max(worst.get(r.method.name, 0.0), float(r.max_rel_error))
    return worst

