"""Uniform B-spline bases for KAN edges.

``order`` is the polynomial degree (3 = cubic). A grid with ``grid_size`` G
intervals over the domain carries ``order`` extra knots on each side, giving
G + 2k + 1 knots and G + k basis functions that sum to one on the domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ArgumentError, NumericalError

__all__ = [
    "SplineGrid",
    "KanEdge",
    "make_grid",
    "basis_eval",
    "basis_derivative",
    "spline_eval",
    "edge_eval",
    "grid_extend",
    "refit_coefficients",
    "basis_node",
]


@dataclass(frozen=True)
class SplineGrid:
    domain_lo: float
    domain_hi: float
    grid_size: int
    order: int
    knots: np.ndarray = field(repr=False, compare=False)

    @property
    def n_basis(self) -> int:
        return self.grid_size + self.order

    @property
    def spacing(self) -> float:
        return (self.domain_hi - self.domain_lo) / self.grid_size

    def __eq__(self, other):
        if not isinstance(other, SplineGrid):
            return NotImplemented
        return (self.domain_lo, self.domain_hi, self.grid_size, self.order) == (
            other.domain_lo,
            other.domain_hi,
            other.grid_size,
            other.order,
        )

    def __hash__(self):
        return hash((self.domain_lo, self.domain_hi, self.grid_size, self.order))


def make_grid(domain_lo: float = 0.0, domain_hi: float = 1.0, G: int = 5, k: int = 3) -> SplineGrid:
    lo, hi = float(domain_lo), float(domain_hi)
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        raise ArgumentError(f"grid domain must satisfy lo < hi, got ({lo}, {hi})")
    if int(G) != G or G < 1:
        raise ArgumentError(f"grid size must be a positive integer, got {G}")
    if int(k) != k or k < 1:
        raise ArgumentError(f"spline order must be a positive integer, got {k}")
    G, k = int(G), int(k)
    h = (hi - lo) / G
    knots = lo + h * np.arange(-k, G + k + 1, dtype=np.float64)
    # pin the domain ends exactly so clamped inputs land on knots without drift
    knots[k] = lo
    knots[k + G] = hi
    knots.setflags(write=False)
    return SplineGrid(lo, hi, G, k, knots)


def _check_finite(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ArgumentError("spline input must be finite")
    return x


def _cox_de_boor(knots: np.ndarray, x: np.ndarray, degree: int) -> np.ndarray:
    """All degree-``degree`` basis values at ``x``; shape x.shape + (len(knots) - degree - 1,)."""
    t = knots
    xe = x[..., None]
    bases = ((xe >= t[:-1]) & (xe < t[1:])).astype(np.float64)
    for d in range(1, degree + 1):
        left = (xe - t[: -d - 1]) / (t[d:-1] - t[: -d - 1])
        right = (t[d + 1 :] - xe) / (t[d + 1 :] - t[1:-d])
        bases = left * bases[..., :-1] + right * bases[..., 1:]
    return bases


def basis_eval(grid: SplineGrid, x) -> np.ndarray:
    """Basis values at ``x`` (clamped to the grid domain); trailing axis has length G + k."""
    x = np.clip(_check_finite(x), grid.domain_lo, grid.domain_hi)
    return _cox_de_boor(grid.knots, x, grid.order)


def basis_derivative(grid: SplineGrid, x) -> np.ndarray:
    """d/dx of each basis function at the clamped ``x``."""
    x = np.clip(_check_finite(x), grid.domain_lo, grid.domain_hi)
    k = grid.order
    t = grid.knots
    lower = _cox_de_boor(t, x, k - 1)
    left = k / (t[k:-1] - t[: -k - 1])
    right = k / (t[k + 1 :] - t[1:-k])
    return lower[..., :-1] * left - lower[..., 1:] * right


def spline_eval(grid: SplineGrid, coefficients, x) -> np.ndarray:
    return basis_eval(grid, x) @ np.asarray(coefficients, dtype=np.float64)


def basis_node(x: ad.Var, grid: SplineGrid) -> ad.Var:
    """Tape primitive: basis values of a node, differentiable in the node.

    Outside the domain the clamp makes the spline flat, so the derivative
    with respect to the raw input vanishes there.
    """
    raw = x.value
    values = basis_eval(grid, raw)
    inside = ((raw >= grid.domain_lo) & (raw <= grid.domain_hi)).astype(np.float64)

    def backward(g):
        d = basis_derivative(grid, raw)
        return ((g * d).sum(axis=-1) * inside,)

    return ad.custom((x,), values, backward)


@dataclass(frozen=True)
class KanEdge:
    grid: SplineGrid
    coefficients: np.ndarray
    base_weight: float = 0.0
    spline_weight: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=np.float64)
        if c.shape != (self.grid.n_basis,):
            raise ArgumentError(f"edge needs {self.grid.n_basis} coefficients, got shape {c.shape}")
        if not (np.all(np.isfinite(c)) and np.isfinite(self.base_weight) and np.isfinite(self.spline_weight)):
            raise ArgumentError("edge parameters must be finite")
        object.__setattr__(self, "coefficients", c)


def _base_activation(x):
    return x * 0.5 * (1.0 + np.tanh(0.5 * x))


def edge_eval(edge: KanEdge, x):
    """spline_weight * sum_i c_i B_i(clamp(x)) + base_weight * silu(x)."""
    x = _check_finite(x)
    out = edge.spline_weight * spline_eval(edge.grid, edge.coefficients, x) + edge.base_weight * _base_activation(x)
    return float(out) if out.ndim == 0 else out


def refit_coefficients(old_grid: SplineGrid, coefficients, new_grid: SplineGrid) -> np.ndarray:
    """Least-squares coefficients on ``new_grid`` reproducing splines on ``old_grid``.

    ``coefficients`` may carry leading batch axes; the basis axis is last.
    """
    if (old_grid.domain_lo, old_grid.domain_hi) != (new_grid.domain_lo, new_grid.domain_hi):
        raise ArgumentError("refit requires grids over the same domain")
    coefficients = np.asarray(coefficients, dtype=np.float64)
    n_samples = 10 * new_grid.n_basis
    xs = np.linspace(new_grid.domain_lo, new_grid.domain_hi, n_samples)
    A = basis_eval(new_grid, xs)
    targets = basis_eval(old_grid, xs) @ coefficients.reshape(-1, old_grid.n_basis).T
    solution, _, rank, _ = np.linalg.lstsq(A, targets, rcond=None)
    if rank < new_grid.n_basis:
        raise NumericalError(f"grid refit is rank deficient ({rank} < {new_grid.n_basis})")
    return solution.T.reshape(coefficients.shape[:-1] + (new_grid.n_basis,))


def grid_extend(edge: KanEdge, new_G: int) -> KanEdge:
    """Refit ``edge`` onto a grid with ``new_G`` intervals over the same domain."""
    if new_G < edge.grid.grid_size:
        raise ArgumentError(f"new grid size {new_G} is smaller than current {edge.grid.grid_size}")
    g = edge.grid
    new_grid = make_grid(g.domain_lo, g.domain_hi, new_G, g.order)
    coeffs = refit_coefficients(g, edge.coefficients, new_grid)
    return KanEdge(new_grid, coeffs, edge.base_weight, edge.spline_weight)
