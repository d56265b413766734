"""Analytic one-parameter fixture: risk ``1 + w * phi`` with ``w`` uniform on [-0.9, 0.1].

Environments are ``w`` values on a midpoint grid, so the grid mean is exactly
the continuous mean -0.4 and every environment has ``dR/dw = phi``. With
``phi`` restricted to [-1, 1] both TV-l1 objectives reduce to
``1 - 0.4 phi + lam phi^2``.
"""

from __future__ import annotations

import numpy as np

from . import models
from .autodiff import Graph
from .objectives import Method, irm_tv_l1_objective, irm_tv_l2_objective, minimax_tv_objective
from .risk import EnvRisks, weighted_env_risks
from .trainer import Problem

W_LO, W_HI = -0.9, 0.1
PHI_BOUNDS = (-1.0, 1.0)


def w_grid(n_envs: int) -> np.ndarray:
    return W_LO + (np.arange(n_envs) + 0.5) * (W_HI - W_LO) / n_envs


def toy_objective(phi, lam: float):
    return 1.0 - 0.4 * np.asarray(phi) + lam * np.asarray(phi) ** 2


def toy_optimum(lam: float) -> tuple[float, float]:
    """``(argmin, min)`` of the toy objective over ``phi`` in [-1, 1]."""
    if lam > 0.2:
        return 1.0 / (5.0 * lam), 1.0 - 1.0 / (25.0 * lam)
    return 1.0, 0.6 + lam


def worst_case_risk(phi: float) -> float:
    return 1.0 + W_HI * phi if phi >= 0 else 1.0 + W_LO * phi


def toy_problem(method: Method, n_envs: int = 200, phi0: float = 0.0,
                seed: int = 0, rho_hidden: int = 16) -> Problem:
    """Build the fixture as a trainable problem with ``phi`` clipped to [-1, 1].

    The penalty weight is a leaf, so :func:`tvirm.trainer.fit` sets it from
    the config. Minimax variants treat each grid point as one sample whose auxiliary
    variable is its ``w``; the environment network splits them into two groups.
    """
    w = w_grid(n_envs)
    g = Graph()
    phi = g.param("phi")
    lam = g.leaf("lambda")
    risks = g.add(g.reshape(g.matmul(phi, g.const(w[None, :])), (n_envs,)), g.const(np.ones(n_envs)))
    derivs = g.reshape(g.matmul(phi, g.const(np.ones((1, n_envs)))), (n_envs,))
    rho, rho_arch = {}, None
    if method is Method.IRM_TV_L1:
        obj = irm_tv_l1_objective(g, EnvRisks(risks, derivs, n_envs), lam)
    elif method is Method.IRM_TV_L2:
        obj = irm_tv_l2_objective(g, EnvRisks(risks, derivs, n_envs), lam)
    elif method.is_minimax:
        rho_arch = models.env_arch(1, 2, rho_hidden)
        rho = models.init_params(rho_arch, seed, "rho")
        weights = models.forward_env_weights(g, rho_arch, g.const(w[:, None]), 2, "rho")
        soft = weighted_env_risks(g, risks, derivs, weights, 2)
        norm = "L1" if method is Method.MINIMAX_TV_L1 else "L2"
        obj = minimax_tv_objective(g, risks, soft, lam, norm)
    else:
        raise ValueError(f"no toy form for {method.name}")
    return Problem(
        graph=g,
        objective=obj,
        phi={"phi": np.array([[phi0]])},
        rho=rho,
        n_rows=n_envs,
        bind=lambda rows: {},
        bounds={"phi": PHI_BOUNDS},
        rho_arch=rho_arch,
    )
