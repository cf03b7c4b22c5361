"""Expert piecewise power-law yield model and the physics-informed loss terms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import DropoutMask, Tape, Var
from .errors import ArgumentError, NumericalError
from .schema import COMPOSITIONS, FEATURES, T_RATIO_INDEX, YOC_INDEX

__all__ = [
    "ExpertExponents",
    "EXPERT",
    "COMPOSITION_OFFSETS",
    "expert_yield",
    "expert_yield_array",
    "power_law_yield_array",
    "PhysicsPenaltyConfig",
    "mse_loss",
    "hinge_t",
    "hinge_yoc",
    "physics_penalty",
    "total_loss",
    "loss_node",
]

# multiplicative yield offset per composition category (C0 is the reference)
COMPOSITION_OFFSETS = (1.0, 0.95, 1.05, 0.9, 1.1)


@dataclass(frozen=True)
class Piece:
    lo: float
    hi: float
    exponent: float
    scale: float = 1.0


@dataclass(frozen=True)
class ExpertExponents:
    """Exponents of the expert yield model.

    Piecewise factors are ``scale * x**exponent`` on ``[lo, hi)``. The scale of
    the rb_rt piece below 0.86 is 0.86**-4.6, which joins it continuously to
    the x**-3 piece.
    """

    e_l: float = 2.3
    r_out: float = -2.6
    m_hat: float = 2.9
    r_hat: float = 26.5
    cr: float = 0.0
    v_hat: float = 2.02
    y_hat: float = 0.78
    t_ratio: float = -1.32
    yoc_he: float = 1.26
    rb_rt: tuple = field(
        default=(
            Piece(0.0, 0.86, 1.6, 0.86 ** (-3.0 - 1.6)),
            Piece(0.86, 1.0, -3.0),
            Piece(1.0, np.inf, 0.0),
        )
    )
    alpha_ifar: tuple = field(default=(Piece(0.0, 1.0, 0.45), Piece(1.0, np.inf, -0.1)))

    def pieces(self, name: str) -> tuple:
        value = getattr(self, name)
        if isinstance(value, tuple):
            return value
        return (Piece(0.0, np.inf, value),)

    def factor(self, name: str, x):
        """Yield factor contributed by one feature; vectorised over ``x``."""
        x = np.asarray(x, dtype=np.float64)
        out = np.empty_like(x)
        for piece in self.pieces(name):
            sel = (x >= piece.lo) & (x < piece.hi)
            out[sel] = piece.scale * x[sel] ** piece.exponent
        return out


EXPERT = ExpertExponents()


def _field(record, name):
    if isinstance(record, Mapping):
        return record[name]
    return getattr(record, name)


def expert_yield(record, exponents: ExpertExponents = EXPERT) -> float:
    """Expert-model yield for one record (ShotRecord, mapping, or any object with feature attributes).

    A ``composition`` field, when present, multiplies in that category's offset.
    """
    values = []
    for name in FEATURES:
        v = float(_field(record, name))
        if not v > 0.0:
            raise ArgumentError(f"expert model needs a strictly positive {name}, got {v}")
        values.append(v)
    try:
        comp = _field(record, "composition")
    except (KeyError, AttributeError):
        comp = None
    comp_index = 0 if comp is None else _composition_index(comp)
    return float(expert_yield_array(np.array([values]), np.array([comp_index]), exponents)[0])


def _composition_index(comp) -> int:
    if isinstance(comp, str):
        if comp not in COMPOSITIONS:
            raise ArgumentError(f"unknown composition {comp!r}; known: {', '.join(COMPOSITIONS)}")
        return COMPOSITIONS.index(comp)
    return int(comp)


def power_law_yield_array(X, exponents: ExpertExponents = EXPERT) -> np.ndarray:
    """Product of the per-feature factors for physical inputs of shape (n, 11)."""
    X = np.asarray(X, dtype=np.float64)
    if np.any(X <= 0.0):
        j = int(np.argwhere(X <= 0.0)[0, 1])
        raise ArgumentError(f"expert model needs a strictly positive {FEATURES[j]}")
    log_y = np.zeros(X.shape[0])
    for j, name in enumerate(FEATURES):
        log_y += np.log(exponents.factor(name, X[:, j]))
    return np.exp(log_y)


def expert_yield_array(X, composition, exponents: ExpertExponents = EXPERT) -> np.ndarray:
    offsets = np.asarray(COMPOSITION_OFFSETS)[np.asarray(composition, dtype=int)]
    return power_law_yield_array(X, exponents) * offsets


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class PhysicsPenaltyConfig:
    gamma1: float = 0.1
    gamma2: float = 0.1
    fd_step: float = 1e-3
    # 0 = penalise at the batch points; n > 0 = n uniform random probe points per batch
    collocation_points: int = 0

    def __post_init__(self):
        if not (self.gamma1 >= 0.0 and self.gamma2 >= 0.0):
            raise ArgumentError("penalty strengths must be >= 0")
        if not self.fd_step > 0.0:
            raise ArgumentError("finite-difference step must be > 0")
        if self.collocation_points < 0:
            raise ArgumentError("collocation_points must be >= 0")

    @property
    def active(self) -> bool:
        return self.gamma1 > 0.0 or self.gamma2 > 0.0


NO_PHYSICS = PhysicsPenaltyConfig(0.0, 0.0)


def mse_loss(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.size == 0 or t.size == 0:
        raise ArgumentError("mse of empty vectors")
    if p.shape != t.shape:
        raise ArgumentError(f"prediction shape {p.shape} does not match target shape {t.shape}")
    r = p - t
    return float(np.mean(r * r))


def hinge_t(d):
    """Pass a T-ratio derivative through only when positive (yield must fall with T-ratio)."""
    if isinstance(d, Var):
        return ad.clamp_zero_below(d)
    return np.maximum(d, 0.0) if np.ndim(d) else max(float(d), 0.0)


def hinge_yoc(d):
    """Pass a YOC derivative through only when negative (yield must rise with YOC)."""
    if isinstance(d, Var):
        return -ad.clamp_zero_below(-d)
    return np.minimum(d, 0.0) if np.ndim(d) else min(float(d), 0.0)


def _tile_masks(masks, copies):
    if not masks:
        return masks
    return [
        None if m is None else DropoutMask(np.tile(m.keep, (copies, 1)), m.rate, m.draw_id)
        for m in masks
    ]


def loss_node(
    model,
    tape: Tape,
    params,
    X,
    y,
    config: PhysicsPenaltyConfig = NO_PHYSICS,
    masks=None,
    probe_X=None,
    probe_masks=None,
):
    """Record mse + physics penalty on ``tape``; returns ``(total, mse, penalty)`` nodes.

    With the penalty active and no separate probe points, the batch and its four
    shifted copies go through one forward pass that reuses each sample's
    dropout mask, so the finite differences see a single subnetwork.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ArgumentError("empty batch")
    if not config.active:
        pred = model.forward(tape, X, params, masks)
        mse = ad.mean((pred - y) ** 2)
        return mse, mse, None

    h = config.fd_step
    shifted = []
    for j in (T_RATIO_INDEX, YOC_INDEX):
        e = np.zeros(X.shape[1])
        e[j] = h
        shifted.append(e)
    if probe_X is None:
        P, pmasks, offset = X, masks, n
        stacked = np.concatenate([X] + [X + s * e for e in shifted for s in (1.0, -1.0)])
        out = model.forward(tape, stacked, params, _tile_masks(masks, 5))
        pred = out[:n]
    else:
        P = np.asarray(probe_X, dtype=np.float64)
        pmasks = probe_masks
        offset = 0
        pred = model.forward(tape, X, params, masks)
        stacked = np.concatenate([P + s * e for e in shifted for s in (1.0, -1.0)])
        out = model.forward(tape, stacked, params, _tile_masks(pmasks, 4))
    m = P.shape[0]
    d_t = (out[offset : offset + m] - out[offset + m : offset + 2 * m]) * (0.5 / h)
    d_yoc = (out[offset + 2 * m : offset + 3 * m] - out[offset + 3 * m : offset + 4 * m]) * (0.5 / h)
    for name, d in (("t_ratio", d_t), ("yoc_he", d_yoc)):
        bad = np.flatnonzero(~np.isfinite(d.value))
        if bad.size:
            raise NumericalError(f"non-finite {name} derivative estimate at sample {int(bad[0])}")

    mse = ad.mean((pred - y) ** 2)
    penalty = None
    if config.gamma1 > 0.0:
        penalty = config.gamma1 * ad.mean(ad.absolute(hinge_t(d_t)))
    if config.gamma2 > 0.0:
        term = config.gamma2 * ad.mean(ad.absolute(hinge_yoc(d_yoc)))
        penalty = term if penalty is None else penalty + term
    return mse + penalty, mse, penalty


def physics_penalty(model, X, config: PhysicsPenaltyConfig) -> float:
    """gamma1*mean|hinge_t(df/dT)| + gamma2*mean|hinge_yoc(df/dYOC)| over the rows of ``X``."""
    if not config.active:
        return 0.0
    X = np.asarray(X, dtype=np.float64)
    tape = Tape()
    params = model.param_nodes(tape, requires_grad=False)
    _, _, penalty = loss_node(model, tape, params, X, np.zeros(X.shape[0]), config)
    return float(penalty.value)


def total_loss(model, X, y, config: PhysicsPenaltyConfig = NO_PHYSICS) -> float:
    tape = Tape()
    params = model.param_nodes(tape, requires_grad=False)
    total, _, _ = loss_node(model, tape, params, X, y, config)
    return float(total.value)
