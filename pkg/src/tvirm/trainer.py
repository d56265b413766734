"""Adam, the training loop and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import models
from .autodiff import Graph, NonFiniteError, graph_backward, graph_eval
from .dataio import Batch
from .models import Arch, ParamSet
from .objectives import Method, Objective, ObjectiveValue, minimax_tv_objective, partition_objective
from .risk import (
    LossKind,
    label_targets,
    partition_env_risks,
    partition_matrix,
    per_sample_loss,
    w_derivative_per_sample,
    weighted_env_risks,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    method: Method = Method.ERM
    lam: float = 1.0
    epochs: int = 5300
    lr_phi: float = 1e-3
    lr_rho: float = 1e-3
    batch_size: int | None = None  # None trains full-batch
    seed: int = 0
    warmup_epochs: int = 0
    rho_steps: int = 1
    n_envs: int = 2  # environments inferred by the minimax methods
    loss: LossKind = LossKind.BINARY_CE
    n_classes: int | None = None
    phi_hidden: tuple[int, ...] = ()
    rho_hidden: int = 16

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not (self.lr_phi > 0 and self.lr_rho > 0):
            raise ValueError("learning rates must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.warmup_epochs < 0 or self.rho_steps < 1:
            raise ValueError("warmup_epochs must be >= 0 and rho_steps >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, history: list[ObjectiveValue]):
        super().__init__(f"objective became non-finite at epoch {epoch}")
        self.epoch = epoch
        self.history = history


# --- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Mapping[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        {k: np.zeros_like(v) for k, v in params.items()},
        {k: np.zeros_like(v) for k, v in params.items()},
        0, beta1, beta2, eps,
    )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam descent step. Returns new ``(params, state)``; inputs are untouched."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {k}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, replace(state, m=new_m, v=new_v, step=t)


# --- problems ----------------------------------------------------------------


@dataclass
class Problem:
    """A built training graph plus how to bind data to it.

    ``bind(rows)`` returns data bindings for a row subset (``None`` = all rows).
    ``bounds`` clips named parameters after every step.
    """

    graph: Graph
    objective: Objective
    phi: ParamSet
    rho: ParamSet
    n_rows: int
    bind: Callable[[np.ndarray | None], dict[str, np.ndarray]]
    bounds: dict[str, tuple[float, float]] = field(default_factory=dict)
    phi_arch: Arch | None = None
    rho_arch: Arch | None = None


@dataclass
class TrainResult:
    phi: ParamSet
    rho: ParamSet
    history: list[ObjectiveValue]
    phi_arch: Arch | None = None
    rho_arch: Arch | None = None


def predictor_arch(d: int, config: TrainConfig) -> Arch:
    out = config.n_classes if config.loss is LossKind.MULTI_CE else 1
    return Arch.mlp([d, *config.phi_hidden, out])


def build_problem(data: Batch, config: TrainConfig) -> Problem:
    """Training graph for ``config.method`` on ``data``, with fresh seeded parameters."""
    method = config.method
    if method.needs_partition and data.env_ids is None:
        raise ValueError(f"{method.name} needs environment labels")
    if method.is_minimax and data.z is None:
        raise ValueError(f"{method.name} needs auxiliary variables")

    seeds = np.random.SeedSequence(config.seed).generate_state(2)
    phi_arch = predictor_arch(data.X.shape[1], config)
    phi = models.init_params(phi_arch, int(seeds[0]), "phi")
    targets = label_targets(config.loss, data.y, config.n_classes)

    g = Graph()
    x = g.leaf("X")
    t = g.leaf("targets")
    lam = g.leaf("lambda")
    out = models.forward_predictor(g, phi_arch, x, "phi")
    losses = per_sample_loss(g, config.loss, out, t)
    wds = w_derivative_per_sample(g, config.loss, out, t)

    rho, rho_arch = {}, None
    if method.is_minimax:
        rho_arch = models.env_arch(data.z.shape[1], config.n_envs, config.rho_hidden)
        rho = models.init_params(rho_arch, int(seeds[1]), "rho")
        weights = models.forward_env_weights(g, rho_arch, g.leaf("Z"), config.n_envs, "rho")
        soft = weighted_env_risks(g, losses, wds, weights, config.n_envs)
        norm = "L1" if method is Method.MINIMAX_TV_L1 else "L2"
        objective = minimax_tv_objective(g, losses, soft, lam, norm)
        env_ids = None
    else:
        # ERM ignores any partition and averages over all samples
        env_ids = data.env_ids if method.needs_partition else np.zeros(len(data), dtype=np.int64)
        env = partition_env_risks(g, losses, wds, env_ids, matrix=g.leaf("env_matrix"))
        objective = partition_objective(g, method, env, lam)

    full_matrix = None if env_ids is None else partition_matrix(env_ids)

    def bind(rows):
        sel = slice(None) if rows is None else rows
        b = {"X": data.X[sel], "targets": targets[sel]}
        if env_ids is not None:
            b["env_matrix"] = full_matrix if rows is None else partition_matrix(env_ids[sel])
        if method.is_minimax:
            b["Z"] = data.z[sel]
        return b

    return Problem(g, objective, phi, rho, len(data), bind, phi_arch=phi_arch, rho_arch=rho_arch)


def _clip(params: ParamSet, bounds: Mapping[str, tuple[float, float]]) -> ParamSet:
    if not bounds:
        return params
    return {k: np.clip(v, *bounds[k]) if k in bounds else v for k, v in params.items()}


def fit(problem: Problem, config: TrainConfig,
        on_epoch: Callable[[int, ParamSet, ParamSet], None] | None = None) -> TrainResult:
    """Run ``config.epochs`` epochs of (alternating) Adam on a built problem.

    Minimax methods first take ``rho_steps`` ascent steps on the environment
    network using the gradient of the penalty term alone, then one descent
    step on the predictor with the new environment weights. The penalty weight
    in the predictor's objective is 0 for the first ``warmup_epochs`` epochs.
    The ascent ignores it: for any fixed ``lam > 0`` Adam takes the same steps
    on ``lam * penalty`` as on ``penalty``, and using the bare penalty lets the
    environment network learn during warmup. ``on_epoch(epoch, phi, rho)``
    is called after every epoch.
    """
    g, obj = problem.graph, problem.objective
    phi, rho = dict(problem.phi), dict(problem.rho)
    phi_names, rho_names = set(phi), set(rho)
    phi_opt, rho_opt = adam_init(phi), adam_init(rho)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).generate_state(3)[2])
    history: list[ObjectiveValue] = []

    def slices():
        if config.batch_size is None or config.batch_size >= problem.n_rows:
            yield None
            return
        order = rng.permutation(problem.n_rows)
        for s in range(0, problem.n_rows, config.batch_size):
            yield np.sort(order[s : s + config.batch_size])

    for epoch in range(config.epochs):
        lam = 0.0 if epoch < config.warmup_epochs else config.lam
        for rows in slices():
            data = problem.bind(rows)
            data["lambda"] = np.asarray(lam)
            try:
                if rho_names:
                    for _ in range(config.rho_steps):
                        graph_eval(g, {**data, **phi, **rho})
                        up = graph_backward(g, obj.penalty, wrt=rho_names)
                        ascent = {k: -v for k, v in up.items()}
                        rho, rho_opt = adam_step(rho, ascent, rho_opt, config.lr_rho)
                        rho = _clip(rho, problem.bounds)
                vals = graph_eval(g, {**data, **phi, **rho})
            except NonFiniteError:
                raise TrainingDiverged(epoch, history) from None
            history.append(ObjectiveValue.read(obj, vals))
            grads = graph_backward(g, obj.total, wrt=phi_names)
            phi, phi_opt = adam_step(phi, grads, phi_opt, config.lr_phi)
            phi = _clip(phi, problem.bounds)
        if on_epoch is not None:
            on_epoch(epoch, phi, rho)

    return TrainResult(phi, rho, history, problem.phi_arch, problem.rho_arch)


def train(data: Batch, config: TrainConfig, on_epoch=None) -> TrainResult:
    return fit(build_problem(data, config), config, on_epoch)


# --- evaluation ----------------------------------------------------------------


@dataclass
class Report:
    task: str
    per_env: list[float]
    mean: float
    worst: float
    train: float | None = None

    def to_dict(self) -> dict:
        return {"task": self.task, "per_env": list(self.per_env), "mean": self.mean,
                "worst": self.worst, "train": self.train}


def predict(arch: Arch, params: Mapping[str, np.ndarray], X: np.ndarray, prefix: str = "phi") -> np.ndarray:
    g = Graph()
    out = models.forward_predictor(g, arch, g.leaf("X"), prefix)
    return graph_eval(g, {"X": X, **params})[out.id]


def batch_metric(arch: Arch, params, batch: Batch, task: str) -> float:
    out = predict(arch, params, batch.X)
    if task == "regression":
        return float(np.mean((out[:, 0] - batch.y) ** 2))
    if out.shape[1] == 1:
        pred = (out[:, 0] > 0).astype(np.float64)  # sigmoid(f) > 0.5
    else:
        pred = out.argmax(axis=1).astype(np.float64)
    return float(np.mean(pred == batch.y))


def summarize(per_env: Sequence[float], task: str, train: float | None = None) -> Report:
    vals = [float(v) for v in per_env]
    if not vals:
        raise ValueError("need at least one environment")
    worst = min(vals) if task == "classification" else max(vals)
    return Report(task, vals, float(np.mean(vals)), worst, train)


def evaluate(arch: Arch, params, batches: Sequence[Batch], task: str = "classification",
             train_batch: Batch | None = None) -> Report:
    """Accuracy (classification) or MSE (regression) per test environment, with mean and worst."""
    if task not in ("classification", "regression"):
        raise ValueError(f"unknown task {task!r}")
    per_env = [batch_metric(arch, params, b, task) for b in batches]
    train = None if train_batch is None else batch_metric(arch, params, train_batch, task)
    return summarize(per_env, task, train)
