"""Feed-forward predictor and environment-weight networks built on :mod:`tvirm.autodiff`."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Graph, Node, ShapeError

ACTIVATIONS = ("none", "relu", "sigmoid", "softmax")

ParamSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class Layer:
    in_dim: int
    out_dim: int
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be positive")


@dataclass(frozen=True)
class Arch:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an architecture needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @classmethod
    def mlp(cls, dims: list[int], hidden: str = "relu", head: str = "none") -> "Arch":
        """``Arch.mlp([15, 32, 1])`` is Linear(15,32) -> ReLU -> Linear(32,1)."""
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        acts = [hidden] * (len(dims) - 2) + [head]
        return cls(tuple(Layer(a, b, act) for a, b, act in zip(dims, dims[1:], acts)))


def linear_predictor(d: int, out: int = 1) -> Arch:
    return Arch.mlp([d, out])


def env_arch(d_z: int, n_envs: int, hidden: int = 16) -> Arch:
    """Environment network: sigmoid head for two environments, softmax above."""
    if n_envs < 2:
        raise ValueError("environment inference needs at least 2 environments")
    if n_envs == 2:
        return Arch.mlp([d_z, hidden, 1], head="sigmoid")
    return Arch.mlp([d_z, hidden, n_envs], head="softmax")


def param_names(arch: Arch, prefix: str) -> list[str]:
    names = []
    for k in range(len(arch.layers)):
        names += [f"{prefix}.{k}.weight", f"{prefix}.{k}.bias"]
    return names


def init_params(arch: Arch, seed: int, prefix: str = "phi") -> ParamSet:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for k, layer in enumerate(arch.layers):
        bound = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        params[f"{prefix}.{k}.weight"] = rng.uniform(-bound, bound, size=(layer.in_dim, layer.out_dim))
        params[f"{prefix}.{k}.bias"] = np.zeros(layer.out_dim)
    return params


def check_params(arch: Arch, params: Mapping[str, np.ndarray], prefix: str) -> None:
    for k, layer in enumerate(arch.layers):
        w = params.get(f"{prefix}.{k}.weight")
        b = params.get(f"{prefix}.{k}.bias")
        if w is None or b is None:
            raise KeyError(f"missing parameters for {prefix} layer {k}")
        if w.shape != (layer.in_dim, layer.out_dim) or b.shape != (layer.out_dim,):
            raise ShapeError(f"{prefix} layer {k}: got {w.shape}/{b.shape}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError(f"{prefix} layer {k} has non-finite parameters")


def _activate(g: Graph, h: Node, act: str) -> Node:
    if act == "relu":
        return g.relu(h)
    if act == "sigmoid":
        return g.sigmoid(h)
    if act == "softmax":
        return g.softmax(h)
    return h


def build_mlp(g: Graph, arch: Arch, x: Node, prefix: str) -> Node:
    h = x
    for k, layer in enumerate(arch.layers):
        w = g.param(f"{prefix}.{k}.weight")
        b = g.param(f"{prefix}.{k}.bias")
        h = _activate(g, g.bias_add(g.matmul(h, w), b), layer.activation)
    return h


def forward_predictor(g: Graph, arch: Arch, x: Node, prefix: str = "phi") -> Node:
    """Raw outputs ``n x c`` of the predictor (logits or regression values)."""
    return build_mlp(g, arch, x, prefix)


def forward_env_weights(g: Graph, arch: Arch, z: Node, n_envs: int, prefix: str = "rho") -> Node:
    """Per-sample environment weights, ``n x n_envs`` with rows on the simplex.

    Two environments use one sigmoid unit ``p`` expanded to ``(p, 1 - p)``;
    more use a softmax head of width ``n_envs``.
    """
    if n_envs < 2:
        raise ValueError("environment inference needs at least 2 environments")
    head = arch.layers[-1]
    if n_envs == 2:
        if head.out_dim != 1 or head.activation != "sigmoid":
            raise ValueError("two-environment head must be a single sigmoid unit")
        p = build_mlp(g, arch, z, prefix)
        w = g.bias_add(g.matmul(p, g.const([[1.0, -1.0]])), g.const([0.0, 1.0]))
    else:
        if head.out_dim != n_envs or head.activation != "softmax":
            raise ValueError(f"head must be a softmax of width {n_envs}")
        w = build_mlp(g, arch, z, prefix)
    return g.simplex_rows(w)


def save_params(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    """Write an ``.npz`` archive: one named float64 array per parameter, shape in its header."""
    with open(path, "wb") as fh:
        np.savez(fh, **{k: np.asarray(v, dtype=np.float64) for k, v in params.items()})


def load_params(path: str | Path) -> ParamSet:
    with np.load(path, allow_pickle=False) as data:
        return {k: np.array(data[k]) for k in data.files}
