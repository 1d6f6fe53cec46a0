"""Datasets: right-censored records, synthetic generators and CSV ingestion.

CSV schema: UTF-8, header ``time,event,<feature names...>``, ``.`` decimal
separator, one record per line.  ``time`` must be positive and ``event`` is
0 (censored) or 1 (event observed).  The synthetic generator's debug output
adds ``raw_t`` and ``raw_c`` columns holding the latent event and censoring
times.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np


class ParseError(ValueError):
    def __init__(self, msg, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {msg}" if where else msg)
        self.row = row
        self.column = column


class NonPositiveTime(ParseError):
    pass


class MissingColumn(ParseError):
    pass


class InvalidSpec(ValueError):
    pass


class ObservedRecord(NamedTuple):
    y: float
    delta: int
    x: np.ndarray


@dataclass
class Dataset:
    """Right-censored observations ``(time, event, X)``.

    ``X`` holds raw (unstandardized) covariates; models carry their own
    standardization.  ``raw_t``/``raw_c`` are only set by the synthetic
    generator in debug mode.
    """

    time: np.ndarray
    event: np.ndarray
    X: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    raw_t: np.ndarray | None = None
    raw_c: np.ndarray | None = None

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.event = np.asarray(self.event, dtype=np.int64)
        X = np.asarray(self.X, dtype=float)
        width = X.shape[1] if X.ndim == 2 else (len(self.feature_names or []) if X.size == 0 else -1)
        self.X = X.reshape(len(self.time), width)
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(self.X.shape[1])]
        if len(self.feature_names) != self.X.shape[1]:
            raise ValueError("feature_names does not match covariate width")
        if len(self.event) != len(self.time):
            raise ValueError("time and event lengths differ")

    def __len__(self):
        return len(self.time)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def censoring_rate(self) -> float:
        return float(1.0 - self.event.mean()) if len(self) else 0.0

    @property
    def records(self) -> list[ObservedRecord]:
        return [ObservedRecord(float(y), int(d), x) for y, d, x in zip(self.time, self.event, self.X)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.time[idx], self.event[idx], self.X[idx], list(self.feature_names),
                       None if self.raw_t is None else self.raw_t[idx],
                       None if self.raw_c is None else self.raw_c[idx])

    def standardization(self) -> tuple[np.ndarray, np.ndarray]:
        """Column means and standard deviations (1 where a column is constant)."""
        if len(self) == 0:
            return np.zeros(self.n_features), np.ones(self.n_features)
        mean = self.X.mean(axis=0)
        std = self.X.std(axis=0)
        return mean, np.where(std > 0, std, 1.0)


# -- Weibull ------------------------------------------------------------------

def weibull_sample(shape, scale, rng: np.random.Generator, size=None) -> np.ndarray:
    """Inverse-CDF draw ``scale * (-log U)^(1/shape)``; CDF ``1 - exp(-(t/scale)^shape)``."""
    u = rng.random(size if size is not None else np.broadcast(shape, scale).shape)
    return scale * (-np.log1p(-u)) ** (1.0 / shape)


def weibull_cdf(t, shape, scale):
    return -np.expm1(-(np.asarray(t, dtype=float) / scale) ** shape)


# -- synthetic model ----------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Two-component Weibull mixture with Weibull censoring.

    ``T ~ p W(b1.x, b2.x) + (1 - p) W(2 b3.x, b4.x)`` and
    ``C ~ W(b5.x, censor_scale * b6.x)`` with ``x ~ U([0, 1]^d)``.
    ``W(a, b)`` has shape ``a`` and scale ``b``.  When ``betas`` is None
    the six coefficient vectors are drawn from ``U[0.5, 1.5]`` with
    ``beta_seed``.  ``censor_target`` (if set) calibrates ``censor_scale``
    to reach that censoring rate.
    """

    d: int = 10
    n: int = 3000
    p: float = 0.3
    betas: np.ndarray | None = None
    beta_seed: int = 0
    censor_target: float | None = 0.8
    censor_scale: float = 1.0

    def __post_init__(self):
        if self.d < 1 or self.n < 0:
            raise InvalidSpec("d must be >= 1 and n >= 0")
        if not 0.0 <= self.p <= 1.0:
            raise InvalidSpec("mixture weight p must lie in [0, 1]")
        if self.betas is None:
            self.betas = np.random.default_rng(self.beta_seed).uniform(0.5, 1.5, (6, self.d))
        self.betas = np.asarray(self.betas, dtype=float)
        if self.betas.shape != (6, self.d):
            raise InvalidSpec(f"betas must have shape (6, {self.d})")
        if np.any(self.betas <= 0):
            raise InvalidSpec("beta entries must be positive")
        if self.censor_target is not None and not 0 < self.censor_target < 1:
            raise InvalidSpec("censor_target must lie in (0, 1)")
        if self.censor_scale <= 0:
            raise InvalidSpec("censor_scale must be positive")


def _linear(spec: SyntheticSpec, X: np.ndarray) -> np.ndarray:
    lin = X @ spec.betas.T
    if np.any(lin <= 0):
        raise InvalidSpec("non-positive Weibull parameter for some covariate vector")
    return lin


def sample_event_times(spec: SyntheticSpec, X, rng: np.random.Generator, m: int | None = None):
    """Draw ``T | X`` from the mixture; shape ``(n,)`` or ``(m, n)`` if ``m`` given."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    lin = _linear(spec, X)
    size = (len(X),) if m is None else (m, len(X))
    first = rng.random(size) < spec.p
    t1 = weibull_sample(lin[:, 0], lin[:, 1], rng, size)
    t2 = weibull_sample(2.0 * lin[:, 2], lin[:, 3], rng, size)
    return np.where(first, t1, t2)


def event_survival(spec: SyntheticSpec, t, X) -> np.ndarray:
    """True ``S_T(t | x)`` of the mixture (rows of ``X`` against ``t``)."""
    lin = _linear(spec, np.atleast_2d(np.asarray(X, dtype=float)))
    s1 = 1 - weibull_cdf(t, lin[:, 0], lin[:, 1])
    s2 = 1 - weibull_cdf(t, 2.0 * lin[:, 2], lin[:, 3])
    return spec.p * s1 + (1 - spec.p) * s2


def sample_censoring_times(spec: SyntheticSpec, X, rng: np.random.Generator, scale=None):
    lin = _linear(spec, np.atleast_2d(np.asarray(X, dtype=float)))
    s = spec.censor_scale if scale is None else scale
    return weibull_sample(lin[:, 4], s * lin[:, 5], rng)


def calibrate_censoring(spec: SyntheticSpec, target: float, n: int = 20000, seed: int = 12345,
                        X=None) -> float:
    """Scale of the censoring Weibull giving censoring rate ``target``.

    Bisection on ``log(scale)`` with common random numbers, so the result is
    deterministic.  ``X`` defaults to ``n`` uniform covariate vectors.
    """
    rng = np.random.default_rng(seed)
    if X is None:
        X = rng.random((n, spec.d))
    T = sample_event_times(spec, X, rng)
    lin = _linear(spec, X)
    # C = scale * b6.x * E^(1/b5.x) with E ~ Exp(1), fixed across the search
    base = lin[:, 5] * rng.exponential(size=len(X)) ** (1.0 / lin[:, 4])

    def rate(log_s):
        return float(np.mean(np.exp(log_s) * base < T))

    lo, hi = -10.0, 10.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if rate(mid) > target:
            lo = mid
        else:
            hi = mid
    return math.exp(0.5 * (lo + hi))


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator, debug: bool = False) -> Dataset:
    """Draw ``spec.n`` censored records from the synthetic model.

    With ``debug=True`` the latent ``raw_t``/``raw_c`` are kept on the dataset.
    """
    if spec.censor_target is not None:
        spec.censor_scale = calibrate_censoring(spec, spec.censor_target)
    X = rng.random((spec.n, spec.d))
    T = sample_event_times(spec, X, rng)
    C = sample_censoring_times(spec, X, rng)
    y = np.minimum(T, C)
    event = (T <= C).astype(np.int64)
    ds = Dataset(y, event, X)
    if debug:
        ds.raw_t, ds.raw_c = T, C
    return ds


def generate_portfolio_covariates(n_classes: int = 10, n_entities: int = 200,
                                  rng: np.random.Generator | None = None, d: int = 10,
                                  centers=None, noise: float = 0.1):
    """Clustered covariates: ``x_i = center_k + noise * eps_i``.

    Centers are ``U([0, 1]^d)`` unless given.  Entities are assigned to
    classes in equal blocks (``n_entities / n_classes`` each, remainder to the
    first classes).  Returns ``(X, labels, centers)``.
    """
    rng = rng if rng is not None else np.random.default_rng()
    if centers is None:
        centers = rng.random((n_classes, d))
    centers = np.asarray(centers, dtype=float)
    labels = np.arange(n_entities) % n_classes
    labels.sort()
    X = centers[labels] + noise * rng.standard_normal((n_entities, centers.shape[1]))
    return X, labels, centers


# -- CSV ----------------------------------------------------------------------

def load_csv(path) -> Dataset:
    """Read a ``time,event,<features...>`` CSV file."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file") from None
        for col in ("time", "event"):
            if col not in header:
                raise MissingColumn("required column missing", column=col)
        i_t, i_e = header.index("time"), header.index("event")
        skip = {i_t, i_e} | {header.index(c) for c in ("raw_t", "raw_c") if c in header}
        feat_idx = [j for j in range(len(header)) if j not in skip]
        times, events, rows = [], [], []
        for r, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=r)
            try:
                t = float(row[i_t])
            except ValueError:
                raise ParseError(f"not a number: {row[i_t]!r}", row=r, column="time") from None
            if not t > 0 or not math.isfinite(t):
                raise NonPositiveTime(f"time must be positive and finite, got {row[i_t]}",
                                      row=r, column="time")
            if row[i_e].strip() not in ("0", "1", "0.0", "1.0"):
                raise ParseError(f"event must be 0 or 1, got {row[i_e]!r}", row=r, column="event")
            feats = []
            for j in feat_idx:
                try:
                    feats.append(float(row[j]))
                except ValueError:
                    raise ParseError(f"not a number: {row[j]!r}", row=r, column=header[j]) from None
            times.append(t)
            events.append(int(float(row[i_e])))
            rows.append(feats)
    X = np.array(rows, dtype=float).reshape(len(rows), len(feat_idx))
    return Dataset(np.array(times), np.array(events, dtype=np.int64), X,
                   [header[j] for j in feat_idx])


def write_csv(ds: Dataset, path, debug: bool = False) -> None:
    """Write ``ds``; floats use ``repr`` so a reload is bit-exact."""
    header = ["time", "event"] + list(ds.feature_names)
    extra = debug and ds.raw_t is not None
    if extra:
        header += ["raw_t", "raw_c"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(ds.time[i])), str(int(ds.event[i]))]
            row += [repr(float(v)) for v in ds.X[i]]
            if extra:
                row += [repr(float(ds.raw_t[i])), repr(float(ds.raw_c[i]))]
            w.writerow(row)


def split(ds: Dataset, train_fraction: float, rng: np.random.Generator,
          valid_fraction: float = 0.0):
    """Stratified (by event indicator) train / validation / test partition.

    Returns three datasets; the test part receives whatever is left.
    """
    if not 0 < train_fraction <= 1 or valid_fraction < 0 or train_fraction + valid_fraction > 1:
        raise ValueError("fractions must be in (0, 1] and sum to at most 1")
    parts = [[], [], []]
    for value in (0, 1):
        idx = np.flatnonzero(ds.event == value)
        idx = idx[rng.permutation(len(idx))]
        n_tr = int(round(train_fraction * len(idx)))
        n_va = min(int(round(valid_fraction * len(idx))), len(idx) - n_tr)
        parts[0].append(idx[:n_tr])
        parts[1].append(idx[n_tr:n_tr + n_va])
        parts[2].append(idx[n_tr + n_va:])
    return tuple(ds.subset(np.sort(np.concatenate(p)).astype(int)) for p in parts)
