"""Per-sample losses, environment risks and their derivative in the dummy scale ``w``.

The classifier on top of the predictor is a scalar ``w`` fixed at 1, so
``d loss(w * f, y) / dw`` at ``w = 1`` has a closed form in the outputs ``f``.
Penalties built from it stay first-order in the predictor parameters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node


class LossKind(enum.Enum):
    BINARY_CE = "binary_ce"
    MULTI_CE = "multi_ce"
    MSE = "mse"


@dataclass(frozen=True)
class EnvRisks:
    """Graph nodes for per-environment risks ``R_e`` and derivatives ``g_e``, both shape ``(E,)``."""

    risks: Node
    w_derivs: Node
    n_envs: int


def label_targets(kind: LossKind, y, n_classes: int | None = None) -> np.ndarray:
    """Validate labels and return the ``n x c`` target matrix the loss nodes consume."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if kind is LossKind.MSE:
        return y[:, None]
    if kind is LossKind.BINARY_CE:
        if not np.isin(y, (0.0, 1.0)).all():
            raise ValueError("binary labels must be 0 or 1")
        return y[:, None]
    if n_classes is None:
        raise ValueError("multi-class targets need n_classes")
    idx = y.astype(int)
    if (idx != y).any() or (idx < 0).any() or (idx >= n_classes).any():
        raise ValueError(f"class labels must be integers in [0, {n_classes})")
    return np.eye(n_classes)[idx]


def _targets(g: Graph, kind: LossKind, out: Node, y, n_classes: int | None) -> Node:
    if isinstance(y, Node):
        return y
    return g.const(label_targets(kind, y, n_classes))


def per_sample_loss(g: Graph, kind: LossKind, out: Node, y, n_classes: int | None = None) -> Node:
    """Loss per sample, shape ``(n,)``.

    ``y`` is either raw labels (validated here) or a node already holding the
    ``n x c`` target matrix from :func:`label_targets`.
    """
    t = _targets(g, kind, out, y, n_classes)
    if kind is LossKind.MSE:
        return g.sum(g.square(out - t), axis=1)
    if kind is LossKind.BINARY_CE:
        # log(1 + e^f) - y f, with log(1 + e^f) = logsumexp(0, f)
        pair = g.matmul(out, g.const([[0.0, 1.0]]))
        return g.logsumexp(pair) - g.sum(out * t, axis=1)
    return g.logsumexp(out) - g.sum(out * t, axis=1)


def w_derivative_per_sample(g: Graph, kind: LossKind, out: Node, y, n_classes: int | None = None) -> Node:
    """``d loss(w f, y) / dw`` at ``w = 1`` per sample, shape ``(n,)``."""
    t = _targets(g, kind, out, y, n_classes)
    if kind is LossKind.MSE:
        return g.sum((out - t) * 2.0 * out, axis=1)
    if kind is LossKind.BINARY_CE:
        return g.sum((g.sigmoid(out) - t) * out, axis=1)
    return g.sum(g.softmax(out) * out, axis=1) - g.sum(out * t, axis=1)


def partition_matrix(env_ids) -> np.ndarray:
    """``n x E`` matrix whose column ``e`` averages over the samples of environment ``e``."""
    env_ids = np.asarray(env_ids)
    if env_ids.ndim != 1 or env_ids.size == 0:
        raise ValueError("env_ids must be a non-empty vector")
    ids = env_ids.astype(int)
    if (ids != env_ids).any() or ids.min() < 0:
        raise ValueError("environment ids must be non-negative integers")
    counts = np.bincount(ids)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"environment {int(empty[0])} has no samples")
    return np.eye(counts.size)[ids] / counts


def _group_means(g: Graph, v: Node, m: Node) -> Node:
    return g.reshape(g.matmul(g.reshape(v, (1, -1)), m), (-1,))


def partition_env_risks(g: Graph, losses: Node, w_derivs: Node, env_ids=None, matrix: Node | None = None) -> EnvRisks:
    """Group means of losses and w-derivatives under known environment labels.

    By default the partition is frozen into the graph as a constant. Passing
    ``matrix``, a leaf bound to :func:`partition_matrix` output at evaluation,
    lets one graph serve many data slices; ``env_ids`` then only fixes ``E``.
    """
    if matrix is None:
        m = partition_matrix(env_ids)
        n_envs = m.shape[1]
        matrix = g.const(m)
    else:
        if env_ids is None:
            raise ValueError("pass env_ids alongside matrix to fix the environment count")
        n_envs = int(np.max(env_ids)) + 1
    return EnvRisks(_group_means(g, losses, matrix), _group_means(g, w_derivs, matrix), n_envs)


def _soft_means(g: Graph, v: Node, w: Node, n_envs: int) -> Node:
    spread = g.matmul(g.reshape(v, (-1, 1)), g.const(np.ones((1, n_envs))))
    return g.mean(g.mul(spread, w), axis=0)


def weighted_env_risks(g: Graph, losses: Node, w_derivs: Node, weights: Node, n_envs: int) -> EnvRisks:
    """Soft-assignment risks ``R_j = (1/n) sum_i loss_i W_ij`` and likewise for ``g_j``.

    ``weights`` must hold an ``n x n_envs`` matrix with simplex rows; the check
    runs at evaluation since the rows usually come from the environment network.
    """
    w = g.simplex_rows(weights)
    return EnvRisks(_soft_means(g, losses, w, n_envs), _soft_means(g, w_derivs, w, n_envs), n_envs)
