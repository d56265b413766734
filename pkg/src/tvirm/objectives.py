"""Scalar training objectives assembled from environment risks.

Every builder returns an :class:`Objective` holding three scalar nodes, with
``total = risk + lam * penalty``. ``lam`` may be a float (frozen as a
constant) or a scalar node, which lets a trainer switch the penalty on after
a warmup without rebuilding the graph.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node
from .risk import EnvRisks


class Method(enum.Enum):
    ERM = "ERM"
    IRM_TV_L2 = "IRM_TV_L2"
    IRM_TV_L1 = "IRM_TV_L1"
    VREX = "VREX"
    MINIMAX_TV_L2 = "MINIMAX_TV_L2"
    MINIMAX_TV_L1 = "MINIMAX_TV_L1"

    @property
    def needs_partition(self) -> bool:
        return self in (Method.IRM_TV_L2, Method.IRM_TV_L1, Method.VREX)

    @property
    def is_minimax(self) -> bool:
        return self in (Method.MINIMAX_TV_L2, Method.MINIMAX_TV_L1)

    @classmethod
    def parse(cls, name: str) -> "Method":
        key = name.strip().upper().replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown method {name!r}; choose from {', '.join(m.name for m in cls)}") from None


@dataclass(frozen=True)
class Objective:
    total: Node
    risk: Node
    penalty: Node
    lam: Node


@dataclass(frozen=True)
class ObjectiveValue:
    total: float
    risk_term: float
    penalty_term: float

    @classmethod
    def read(cls, obj: Objective, values: dict[int, np.ndarray]) -> "ObjectiveValue":
        return cls(float(values[obj.total.id]), float(values[obj.risk.id]), float(values[obj.penalty.id]))


def _lam_node(g: Graph, lam) -> Node:
    if isinstance(lam, Node):
        return lam
    if lam < 0:
        raise ValueError("penalty weight must be non-negative")
    return g.const(float(lam))


def _combine(g: Graph, risk: Node, penalty: Node, lam) -> Objective:
    lam = _lam_node(g, lam)
    return Objective(g.add(risk, g.mul(lam, penalty)), risk, penalty, lam)


def erm_objective(g: Graph, env: EnvRisks) -> Objective:
    risk = g.mean(env.risks)
    return _combine(g, risk, g.const(0.0), 0.0)


def irm_tv_l2_objective(g: Graph, env: EnvRisks, lam) -> Objective:
    """Mean risk plus ``lam * mean_e g_e^2``."""
    return _combine(g, g.mean(env.risks), g.mean(g.square(env.w_derivs)), lam)


def irm_tv_l1_objective(g: Graph, env: EnvRisks, lam) -> Objective:
    """Mean risk plus ``lam * (mean_e |g_e|)^2``; ``|.|`` has subgradient 0 at 0."""
    return _combine(g, g.mean(env.risks), g.square(g.mean(g.abs(env.w_derivs))), lam)


def vrex_objective(g: Graph, env: EnvRisks, lam) -> Objective:
    """Mean risk plus ``lam`` times the population variance of the risks."""
    e = env.n_envs
    center = g.const(np.eye(e) - np.full((e, e), 1.0 / e))
    dev = g.matmul(g.reshape(env.risks, (1, e)), center)
    return _combine(g, g.mean(env.risks), g.mean(g.square(dev)), lam)


def minimax_tv_objective(g: Graph, losses: Node, soft: EnvRisks, lam, norm: str = "L1") -> Objective:
    """Global mean loss plus ``lam`` times a norm of the soft-environment derivatives.

    ``soft`` comes from :func:`tvirm.risk.weighted_env_risks`. The penalty sums
    over the ``E`` components without averaging: ``sum_j g_j^2`` for ``"L2"``,
    ``(sum_j |g_j|)^2`` for ``"L1"``.
    """
    if norm == "L2":
        penalty = g.sum(g.square(soft.w_derivs))
    elif norm == "L1":
        penalty = g.square(g.sum(g.abs(soft.w_derivs)))
    else:
        raise ValueError(f"norm must be 'L1' or 'L2', not {norm!r}")
    return _combine(g, g.mean(losses), penalty, lam)


def partition_objective(g: Graph, method: Method, env: EnvRisks, lam) -> Objective:
    if method is Method.ERM:
        return erm_objective(g, env)
    if method is Method.IRM_TV_L2:
        return irm_tv_l2_objective(g, env, lam)
    if method is Method.IRM_TV_L1:
        return irm_tv_l1_objective(g, env, lam)
    if method is Method.VREX:
        return vrex_objective(g, env, lam)
    raise ValueError(f"{method.name} is not a partition objective")


def adaptive_lambda_estimate(risks, w_derivs, tol: float = 1e-12) -> float | None:
    """Penalty weight that lifts the mean risk to the worst one, or ``None``.

    ``(max_e R_e - mean_e R_e) / (mean_e |g_e|)^2``. ``None`` marks the
    zero-variation case, where any weight gives the same objective.
    Diagnostic only; training never calls it.
    """
    r = np.asarray(risks, dtype=np.float64)
    d = np.asarray(w_derivs, dtype=np.float64)
    if r.size == 0 or r.shape != d.shape:
        raise ValueError("risks and derivatives must be non-empty and the same length")
    denom = np.mean(np.abs(d)) ** 2
    if denom < tol:
        return None
    return float((r.max() - r.mean()) / denom)
