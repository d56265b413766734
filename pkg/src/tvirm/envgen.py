"""Synthetic temporal distribution-shift data.

Classification: for each sample draw ``t ~ U[0, 1]``, an invariant scalar
``x_v ~ N(+-1, 1)`` (equal mixture), a label ``sign(x_v)`` kept with
probability ``p_v`` and flipped otherwise, and a spurious scalar
``x_s ~ N(y, 1)`` with probability ``p_s(t)`` else ``N(-y, 1)``. ``x_v`` is
observed through 5 columns and ``x_s`` through 10, each column adding its
own standard normal noise. ``p_s(t)`` is ``p_s_minus`` before ``t = 0.5``
and ``p_s_plus`` from there on.

Regression: a house-price-like task over "years" where a spurious column's
slope on the label drifts with time, so training years reward it and later
years punish it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataio import Batch, concat, split_by_column

N_INVARIANT = 5
N_SPURIOUS = 10
TEST_P_S = (0.999, 0.8, 0.2, 0.001)


@dataclass(frozen=True)
class SyntheticSpec:
    p_s_minus: float
    p_s_plus: float
    p_v: float
    n: int = 10_000
    seed: int = 0

    def __post_init__(self):
        for name in ("p_s_minus", "p_s_plus", "p_v"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} is not a probability")
        if self.n < 1:
            raise ValueError("n must be at least 1")


def feature_names() -> list[str]:
    return [f"xv{i}" for i in range(N_INVARIANT)] + [f"xs{i}" for i in range(N_SPURIOUS)]


def generate_synthetic(spec: SyntheticSpec) -> Batch:
    """Draw ``spec.n`` samples. Labels are stored as 0/1 (sign -1 maps to 0)."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    t = rng.uniform(0.0, 1.0, n)
    centre = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    x_v = centre + rng.standard_normal(n)
    base = np.where(x_v >= 0, 1.0, -1.0)
    y = np.where(rng.random(n) < spec.p_v, base, -base)
    p_s = np.where(t < 0.5, spec.p_s_minus, spec.p_s_plus)
    x_s = np.where(rng.random(n) < p_s, y, -y) + rng.standard_normal(n)
    X = np.hstack([
        x_v[:, None] + rng.standard_normal((n, N_INVARIANT)),
        x_s[:, None] + rng.standard_normal((n, N_SPURIOUS)),
    ])
    return Batch(
        X=X,
        y=(y > 0).astype(np.float64),
        z=t[:, None],
        env_ids=(t >= 0.5).astype(np.int64),
        t=t,
        feature_names=feature_names(),
        aux_names=["t"],
        latent={"x_v": x_v, "x_s": x_s, "sign_x_v": base},
    )


def make_train_set(p_s_minus: float, p_s_plus: float, p_v: float, n_per_env: int, seed: int) -> Batch:
    """Training data with ``n_per_env`` samples expected in each half of the time axis."""
    return generate_synthetic(SyntheticSpec(p_s_minus, p_s_plus, p_v, 2 * n_per_env, seed))


def make_test_suite(p_v: float, n_per_env: int, seed: int) -> list[Batch]:
    """One batch per test spurious level in ``TEST_P_S``, all sharing ``p_v``."""
    seeds = np.random.SeedSequence(seed).generate_state(len(TEST_P_S))
    return [
        generate_synthetic(SyntheticSpec(p, p, p_v, n_per_env, int(s)))
        for p, s in zip(TEST_P_S, seeds)
    ]


@dataclass(frozen=True)
class RegressionSpec:
    """Year-indexed regression with a drifting spurious slope.

    Years are integers drawn uniformly from ``[year_lo, year_hi]``. The
    spurious slope on the label moves linearly from ``slope_1900`` in 1900
    to ``slope_2000`` in 2000, whatever range is sampled.
    """

    n: int = 5000
    year_lo: int = 1900
    year_hi: int = 1950
    slope_1900: float = 2.0
    slope_2000: float = -1.0
    label_noise: float = 0.5
    spurious_noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.year_hi < self.year_lo:
            raise ValueError("year_hi must not precede year_lo")
        if self.label_noise < 0 or self.spurious_noise < 0:
            raise ValueError("noise scales must be non-negative")


TRAIN_YEARS = (1900, 1950)
TEST_YEARS = (1951, 2000)
TRAIN_DECADES = (1900, 1910, 1920, 1930, 1940, 1950)
TEST_DECADES = (1951, 1961, 1971, 1981, 1991, 2000)


def spurious_slope(spec: RegressionSpec, year) -> np.ndarray:
    frac = (np.asarray(year, dtype=np.float64) - 1900.0) / 100.0
    return spec.slope_1900 + frac * (spec.slope_2000 - spec.slope_1900)


def generate_regression(spec: RegressionSpec) -> Batch:
    """Label ``y = x_v + noise``; the spurious scalar is ``slope(year) * y + noise``.

    Column layout matches the classification task: 5 noisy copies of
    ``x_v`` then 10 of ``x_s``. ``z`` is the year rescaled by
    ``(year - 1950) / 50``; ``t`` is the raw year.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    year = rng.integers(spec.year_lo, spec.year_hi + 1, n).astype(np.float64)
    x_v = rng.standard_normal(n)
    y = x_v + spec.label_noise * rng.standard_normal(n)
    x_s = spurious_slope(spec, year) * y + spec.spurious_noise * rng.standard_normal(n)
    X = np.hstack([
        x_v[:, None] + rng.standard_normal((n, N_INVARIANT)),
        x_s[:, None] + rng.standard_normal((n, N_SPURIOUS)),
    ])
    return Batch(
        X=X, y=y, z=((year - 1950.0) / 50.0)[:, None], t=year,
        feature_names=feature_names(), aux_names=["year_scaled"], label_name="y",
        latent={"x_v": x_v, "x_s": x_s},
    )


def make_regression_task(spec: RegressionSpec, n_test: int, seed: int) -> tuple[Batch, list[Batch]]:
    """Training years split into 5 decade environments, later years into 5 test decades.

    ``spec.year_lo``/``year_hi``/``seed``/``n`` are overridden by the fixed
    year ranges and by seeds drawn from ``seed``.
    """
    s_train, s_test = np.random.SeedSequence(seed).generate_state(2)
    train = generate_regression(replace(spec, year_lo=TRAIN_YEARS[0], year_hi=TRAIN_YEARS[1], seed=int(s_train)))
    test = generate_regression(replace(spec, n=n_test, year_lo=TEST_YEARS[0], year_hi=TEST_YEARS[1], seed=int(s_test)))
    envs = split_by_column(train, "t", TRAIN_DECADES)
    train = concat(envs)
    return train, split_by_column(test, "t", TEST_DECADES)
