"""Tabular batches, CSV round-tripping, standardization and environment splitting."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class Batch:
    """A dataset slice. ``z`` holds auxiliary variables, ``t`` time stamps."""

    X: np.ndarray
    y: np.ndarray
    z: np.ndarray | None = None
    env_ids: np.ndarray | None = None
    t: np.ndarray | None = None
    feature_names: list[str] = field(default_factory=list)
    aux_names: list[str] = field(default_factory=list)
    label_name: str = "y"
    latent: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        n = self.X.shape[0]
        if self.X.ndim != 2 or self.y.shape[0] != n:
            raise DataError(f"X {self.X.shape} and y {self.y.shape} disagree")
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=np.float64).reshape(n, -1)
        if self.env_ids is not None:
            self.env_ids = np.asarray(self.env_ids, dtype=np.int64).reshape(-1)
            if self.env_ids.shape[0] != n:
                raise DataError("env_ids length differs from sample count")
        if self.t is not None:
            self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.X.shape[1])]
        if self.z is not None and not self.aux_names:
            self.aux_names = [f"z{i}" for i in range(self.z.shape[1])]

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_envs(self) -> int:
        return 0 if self.env_ids is None else int(self.env_ids.max()) + 1

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return replace(
            self,
            X=self.X[idx],
            y=self.y[idx],
            z=pick(self.z),
            env_ids=pick(self.env_ids),
            t=pick(self.t),
            latent={k: v[idx] for k, v in self.latent.items()},
        )

    def column(self, name: str) -> np.ndarray:
        if name in self.feature_names:
            return self.X[:, self.feature_names.index(name)]
        if name in self.aux_names:
            return self.z[:, self.aux_names.index(name)]
        if name == "t" and self.t is not None:
            return self.t
        if name == self.label_name:
            return self.y
        raise DataError(f"batch has no column {name!r}")


def concat(batches: Sequence[Batch]) -> Batch:
    first = batches[0]
    cat = lambda attr: None if getattr(first, attr) is None else np.concatenate([getattr(b, attr) for b in batches])  # noqa: E731
    return replace(
        first,
        X=np.vstack([b.X for b in batches]),
        y=np.concatenate([b.y for b in batches]),
        z=cat("z"),
        env_ids=cat("env_ids"),
        t=cat("t"),
        latent={},
    )


@dataclass(frozen=True)
class CsvSchema:
    features: tuple[str, ...]
    label: str
    aux: tuple[str, ...] = ()
    env: str | None = None
    time: str | None = None

    def __post_init__(self):
        cols = list(self.features) + [self.label] + list(self.aux)
        cols += [c for c in (self.env, self.time) if c is not None]
        dupes = sorted({c for c in cols if cols.count(c) > 1})
        if dupes:
            raise DataError(f"columns assigned more than one role: {', '.join(dupes)}")

    @classmethod
    def for_batch(cls, batch: Batch) -> "CsvSchema":
        return cls(
            features=tuple(batch.feature_names),
            label=batch.label_name,
            aux=tuple(batch.aux_names) if batch.z is not None else (),
            env="env" if batch.env_ids is not None else None,
            # synthetic batches carry time as their auxiliary column already
            time="t" if batch.t is not None and "t" not in batch.aux_names else None,
        )


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(path: str | Path, batch: Batch, schema: CsvSchema | None = None) -> CsvSchema:
    """Write a batch as LF-terminated CSV with 17 significant digits per value."""
    schema = schema or CsvSchema.for_batch(batch)
    header = list(schema.features) + [schema.label] + list(schema.aux)
    cols = [batch.X[:, i] for i in range(batch.X.shape[1])] + [batch.y]
    if schema.aux:
        cols += [batch.z[:, i] for i in range(batch.z.shape[1])]
    if schema.env is not None:
        header.append(schema.env)
        cols.append(batch.env_ids)
    if schema.time is not None:
        header.append(schema.time)
        cols.append(batch.t)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])
    return schema


def load_csv(path: str | Path, schema: CsvSchema) -> Batch:
    """Parse a headed CSV into a batch; every schema column must be present and numeric."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    wanted = list(schema.features) + [schema.label] + list(schema.aux)
    wanted += [c for c in (schema.env, schema.time) if c is not None]
    for col in wanted:
        if col not in header:
            raise DataError(f"{path}: missing column {col!r}")
    pos = {c: header.index(c) for c in wanted}
    body = [r for r in rows[1:] if r and any(cell.strip() for cell in r)]
    if not body:
        raise DataError(f"{path}: no data rows")

    data = np.empty((len(body), len(wanted)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"{path}:{i + 2}: expected {len(header)} fields, got {len(row)}")
        for j, col in enumerate(wanted):
            cell = row[pos[col]].strip()
            try:
                data[i, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}:{i + 2}: column {col!r} is not numeric: {cell!r}") from None
    if not np.isfinite(data).all():
        bad = int(np.argwhere(~np.isfinite(data))[0, 0])
        raise DataError(f"{path}:{bad + 2}: non-finite value")

    nf, na = len(schema.features), len(schema.aux)
    k = nf + 1 + na
    env = time = None
    if schema.env is not None:
        env = data[:, k]
        if (env != np.round(env)).any() or (env < 0).any():
            raise DataError(f"{path}: environment column must hold non-negative integers")
        k += 1
    if schema.time is not None:
        time = data[:, k]
    return Batch(
        X=data[:, :nf],
        y=data[:, nf],
        z=data[:, nf + 1 : nf + 1 + na] if na else None,
        env_ids=env,
        t=time,
        feature_names=list(schema.features),
        aux_names=list(schema.aux),
        label_name=schema.label,
    )


@dataclass(frozen=True)
class StandardizerState:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # True where a column had zero variance and is left as is


def fit_standardize(train: Batch) -> StandardizerState:
    if len(train) == 0:
        raise DataError("cannot fit a standardizer on an empty batch")
    mean = train.X.mean(axis=0)
    std = train.X.std(axis=0)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if constant.any():
        log.warning("zero-variance columns passed through: %s",
                    [train.feature_names[i] for i in np.flatnonzero(constant)])
    return StandardizerState(np.where(constant, 0.0, mean), np.where(constant, 1.0, std), constant)


def apply_standardize(state: StandardizerState, batch: Batch) -> Batch:
    return replace(batch, X=(batch.X - state.mean) / state.std)


def standardize_labels_within(batch: Batch, column: str) -> Batch:
    """Standardize labels separately inside each distinct value of ``column``.

    Groups with a single sample or zero spread are only centered.
    """
    key = batch.column(column)
    y = batch.y.copy()
    for v in np.unique(key):
        m = key == v
        sd = y[m].std()
        y[m] = (y[m] - y[m].mean()) / (sd if sd > 0 else 1.0)
    return replace(batch, y=y)


def split_by_column(batch: Batch, column: str, boundaries: Sequence[float]) -> list[Batch]:
    """Bucket rows on ``column`` into ``[b_k, b_k+1)``; the last bucket also keeps ``b_K``.

    Each returned batch carries ``env_ids`` equal to its bucket index.
    """
    b = np.asarray(boundaries, dtype=np.float64)
    if b.size < 2 or not (np.diff(b) > 0).all():
        raise DataError("boundaries must be strictly increasing with at least two values")
    vals = batch.column(column)
    idx = np.searchsorted(b, vals, side="right") - 1
    idx[vals == b[-1]] = b.size - 2
    outside = (idx < 0) | (idx > b.size - 2)
    if outside.any():
        raise DataError(f"value {vals[outside][0]!r} of {column!r} lies outside [{b[0]}, {b[-1]}]")
    out = []
    for k in range(b.size - 1):
        rows = np.flatnonzero(idx == k)
        if rows.size == 0:
            raise DataError(f"bucket [{b[k]}, {b[k + 1]}) of {column!r} is empty")
        part = batch.take(rows)
        part.env_ids = np.full(rows.size, k, dtype=np.int64)
        out.append(part)
    return out
