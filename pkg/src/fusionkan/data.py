"""Shot records: CSV I/O, validation, normalisation, encoding and synthesis."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError, DataError
from .physics import expert_yield_array
from .schema import COMPOSITIONS, CSV_COLUMNS, CSV_HEADER, FEATURES, INPUT_WIDTH, N_COMPOSITIONS, N_PHYSICAL

__all__ = [
    "ShotRecord",
    "Normalizer",
    "DEFAULT_RANGES",
    "load_dataset",
    "save_dataset",
    "fit_normalizer",
    "encode",
    "encode_many",
    "physical_matrix",
    "composition_indices",
    "targets",
    "synthesize",
]


# (lower, upper, lower_inclusive, upper_inclusive); None = unbounded
_BOUNDS = {
    "e_l": (0.0, None, False, False),
    "r_out": (0.0, None, False, False),
    "m_hat": (0.0, 1.0, False, True),
    "r_hat": (0.0, 1.0, False, False),
    "rb_rt": (0.0, None, False, False),
    "alpha_ifar": (0.0, None, False, False),
    "cr": (1.0, None, False, False),
    "v_hat": (0.0, None, False, False),
    "y_hat": (0.0, None, False, False),
    "t_ratio": (1.0, None, True, False),
    "yoc_he": (0.0, 1.0, False, True),
    "y_exp": (0.0, None, False, False),
}


def _bound_text(name):
    lo, hi, lo_inc, hi_inc = _BOUNDS[name]
    if hi is None:
        return f"{'>=' if lo_inc else '>'} {lo:g}"
    return f"in {'[' if lo_inc else '('}{lo:g}, {hi:g}{']' if hi_inc else ')'}"


def _in_bounds(name, v):
    lo, hi, lo_inc, hi_inc = _BOUNDS[name]
    if not math.isfinite(v):
        return False
    if lo is not None and (v < lo or (v == lo and not lo_inc)):
        return False
    if hi is not None and (v > hi or (v == hi and not hi_inc)):
        return False
    return True


@dataclass(frozen=True)
class ShotRecord:
    """One shot. Units: e_l in kJ, r_out in um, y_exp in reactions; the rest dimensionless."""

    shot_id: str
    e_l: float
    r_out: float
    m_hat: float
    r_hat: float
    rb_rt: float
    alpha_ifar: float
    cr: float
    v_hat: float
    y_hat: float
    t_ratio: float
    yoc_he: float
    composition: str
    y_exp: float
    campaign: int | None = None

    def validate(self, row=None) -> "ShotRecord":
        for name in FEATURES + ("y_exp",):
            v = getattr(self, name)
            if not _in_bounds(name, v):
                column = CSV_COLUMNS.get(name, name)
                raise DataError(f"{name}={v!r} violates bound {_bound_text(name)}", row=row, column=column)
        if self.composition not in COMPOSITIONS:
            raise DataError(
                f"unknown composition {self.composition!r}; known: {', '.join(COMPOSITIONS)}",
                row=row,
                column="composition",
            )
        return self

    def features(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURES], dtype=np.float64)

    def replace(self, **changes) -> "ShotRecord":
        d = asdict(self)
        d.update(changes)
        return ShotRecord(**d)


# ---------------------------------------------------------------------------
# CSV


def load_dataset(path) -> list[ShotRecord]:
    """Read and validate a dataset CSV. Row numbers in errors count the header as row 1."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("dataset file is empty (no header)", row=1) from None
    header = [h.strip() for h in header]
    missing = [c for c in CSV_HEADER if c not in header]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}", row=1, column=missing[0])
    if tuple(header) != CSV_HEADER:
        raise DataError(f"header must be exactly {','.join(CSV_HEADER)}", row=1)

    records = []
    for row_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise DataError(f"expected {len(CSV_HEADER)} fields, found {len(row)}", row=row_no)
        cells = dict(zip(CSV_HEADER, (c.strip() for c in row)))
        values = {"shot_id": cells["shot_id"], "composition": cells["composition"]}
        for name in FEATURES + ("y_exp",):
            column = CSV_COLUMNS.get(name, name)
            try:
                values[name] = float(cells[column])
            except ValueError:
                raise DataError(f"cannot parse {cells[column]!r} as a number", row=row_no, column=column) from None
        records.append(ShotRecord(**values).validate(row=row_no))
    return records


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(records: Iterable[ShotRecord], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow(
            [r.shot_id] + [_fmt(getattr(r, name)) for name in FEATURES] + [r.composition, _fmt(r.y_exp)]
        )
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# normalisation and encoding


def physical_matrix(records: Sequence[ShotRecord]) -> np.ndarray:
    return np.array([r.features() for r in records], dtype=np.float64).reshape(len(records), N_PHYSICAL)


def composition_indices(records: Sequence[ShotRecord]) -> np.ndarray:
    out = []
    for r in records:
        if r.composition not in COMPOSITIONS:
            raise ArgumentError(f"unknown composition {r.composition!r}; known: {', '.join(COMPOSITIONS)}")
        out.append(COMPOSITIONS.index(r.composition))
    return np.array(out, dtype=int)


def targets(records: Sequence[ShotRecord]) -> np.ndarray:
    return np.array([r.y_exp for r in records], dtype=np.float64)


@dataclass(frozen=True)
class Normalizer:
    """Min-max scaling of the physical features; log-then-standardise for the yield."""

    feature_min: tuple
    feature_max: tuple
    log_mean: float
    log_std: float

    def __post_init__(self):
        for name, lo, hi in zip(FEATURES, self.feature_min, self.feature_max):
            if not hi > lo:
                raise ArgumentError(f"feature {name} is constant in the training split (min = max = {lo})")
        if not self.log_std > 0.0:
            raise ArgumentError("target log-yield is constant in the training split")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.feature_min, dtype=np.float64)

    @property
    def span(self) -> np.ndarray:
        return np.asarray(self.feature_max, dtype=np.float64) - self.lo

    def scale_features(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.lo) / self.span

    def unscale_features(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) * self.span + self.lo

    def scale_target(self, y) -> np.ndarray:
        return (np.log(np.asarray(y, dtype=np.float64)) - self.log_mean) / self.log_std

    def unscale_target(self, z) -> np.ndarray:
        return np.exp(np.asarray(z, dtype=np.float64) * self.log_std + self.log_mean)

    def to_dict(self) -> dict:
        return {
            "feature_min": list(self.feature_min),
            "feature_max": list(self.feature_max),
            "log_mean": self.log_mean,
            "log_std": self.log_std,
        }

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(tuple(d["feature_min"]), tuple(d["feature_max"]), float(d["log_mean"]), float(d["log_std"]))


def fit_normalizer(train_records: Sequence[ShotRecord]) -> Normalizer:
    if not train_records:
        raise ArgumentError("cannot fit a normalizer on an empty training split")
    X = physical_matrix(train_records)
    log_y = np.log(targets(train_records))
    return Normalizer(
        tuple(float(v) for v in X.min(axis=0)),
        tuple(float(v) for v in X.max(axis=0)),
        float(log_y.mean()),
        float(log_y.std()),
    )


def one_hot(indices) -> np.ndarray:
    indices = np.asarray(indices, dtype=int)
    out = np.zeros((indices.size, N_COMPOSITIONS))
    out[np.arange(indices.size), indices] = 1.0
    return out


def encode_many(records: Sequence[ShotRecord], normalizer: Normalizer) -> tuple[np.ndarray, np.ndarray]:
    """Feature matrix (n, 16) and normalised targets (n,).

    Column order: e_l, r_out, m_hat, r_hat, rb_rt, alpha_ifar, cr, v_hat, y_hat,
    t_ratio, yoc_he, then the one-hot composition C0..C4.
    """
    Z = normalizer.scale_features(physical_matrix(records))
    X = np.hstack([Z, one_hot(composition_indices(records))]).reshape(len(records), INPUT_WIDTH)
    return X, normalizer.scale_target(targets(records))


def encode(record: ShotRecord, normalizer: Normalizer) -> tuple[np.ndarray, float]:
    X, y = encode_many([record], normalizer)
    return X[0], float(y[0])


def decode_features(X, normalizer: Normalizer) -> tuple[np.ndarray, np.ndarray]:
    """Physical features and composition indices back from encoded rows."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return normalizer.unscale_features(X[:, :N_PHYSICAL]), np.argmax(X[:, N_PHYSICAL:], axis=1)


# ---------------------------------------------------------------------------
# synthetic data

DEFAULT_RANGES = {
    "e_l": (20.0, 30.0),
    "r_out": (400.0, 500.0),
    "m_hat": (0.4, 0.9),
    "r_hat": (0.85, 0.97),
    "rb_rt": (0.7, 1.2),
    "alpha_ifar": (0.3, 3.0),
    "cr": (12.0, 25.0),
    "v_hat": (0.8, 1.2),
    "y_hat": (0.5, 1.5),
    "t_ratio": (1.0, 1.5),
    "yoc_he": (0.5, 1.0),
}


def synthesize(
    n: int,
    seed: int = 0,
    noise_sigma: float = 0.0,
    campaign_count: int = 29,
    campaign_spread: float = 0.1,
    ranges: dict | None = None,
) -> list[ShotRecord]:
    """Draw ``n`` shots grouped into campaigns around random centres.

    Each feature is the campaign centre plus Gaussian scatter of
    ``campaign_spread`` times the feature range, clipped to the range. The
    yield is the expert model (with composition offset) times exp(noise).
    """
    if int(n) != n or n < 0:
        raise ArgumentError(f"n must be a non-negative integer, got {n}")
    if not noise_sigma >= 0.0:
        raise ArgumentError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if int(campaign_count) != campaign_count or campaign_count < 1:
        raise ArgumentError(f"campaign_count must be >= 1, got {campaign_count}")
    if not campaign_spread >= 0.0:
        raise ArgumentError(f"campaign_spread must be >= 0, got {campaign_spread}")
    bounds = dict(DEFAULT_RANGES)
    if ranges:
        unknown = set(ranges) - set(bounds)
        if unknown:
            raise ArgumentError(f"unknown feature(s) in ranges: {', '.join(sorted(unknown))}")
        bounds.update(ranges)
    lo = np.array([bounds[f][0] for f in FEATURES], dtype=np.float64)
    hi = np.array([bounds[f][1] for f in FEATURES], dtype=np.float64)
    if np.any(hi <= lo):
        raise ArgumentError("every range must have lower < upper")

    rng = np.random.default_rng(seed)
    centers = lo + (hi - lo) * rng.random((campaign_count, N_PHYSICAL))
    campaign = rng.integers(campaign_count, size=n)
    X = centers[campaign] + campaign_spread * (hi - lo) * rng.standard_normal((n, N_PHYSICAL))
    X = np.clip(X, lo, hi)
    comp = rng.integers(N_COMPOSITIONS, size=n)
    eps = noise_sigma * rng.standard_normal(n) if noise_sigma > 0.0 else np.zeros(n)
    y = expert_yield_array(X, comp)
    if noise_sigma > 0.0:
        y = y * np.exp(eps)

    records = []
    for i in range(n):
        rec = ShotRecord(
            f"S{i:05d}",
            *(float(v) for v in X[i]),
            composition=COMPOSITIONS[comp[i]],
            y_exp=float(y[i]),
            campaign=int(campaign[i]),
        )
        records.append(rec.validate(row=i))
    return records
