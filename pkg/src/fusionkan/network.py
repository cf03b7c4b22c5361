"""KAN and MLP surrogates, the mini-batch Adam training loop, and checkpoints.

Both model classes share a small protocol used by the losses and evaluation
code:

* ``parameters``: list of arrays, in checkpoint order
* ``param_nodes(tape)``: those arrays registered as tape leaves
* ``forward(tape, X, params, masks)``: node of shape (n,)
* ``dropout_widths``: widths of the activations that receive dropout masks
* ``predict(X)``: evaluation-mode numpy forward
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, adam_step, apply_dropout, draw_dropout_mask
from .data import Normalizer
from .errors import ArgumentError, CheckpointError, NumericalError, TrainingError
from .physics import PhysicsPenaltyConfig, loss_node
from .schema import FEATURES, INPUT_WIDTH
from .spline import KanEdge, SplineGrid, basis_node, make_grid, refit_coefficients

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

MLP_HIDDEN = (71, 71, 71)
KAN_LAYERS = 7
KAN_WIDTH = 71


class _Model:
    kind = ""

    def param_nodes(self, tape: Tape, requires_grad: bool = True):
        return [tape.leaf(p, requires_grad=requires_grad) for p in self.parameters]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters)

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters])

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if not np.all(np.isfinite(X)):
            raise ArgumentError("model input must be finite")
        tape = Tape()
        out = self.forward(tape, X, self.param_nodes(tape, requires_grad=False)).value
        return out

    def __call__(self, X):
        return self.predict(X)


# ---------------------------------------------------------------------------
# MLP


@dataclass(eq=False)
class MlpNetwork(_Model):
    """Fully connected net with softplus hidden units and a linear scalar output."""

    widths: tuple
    weights: list
    biases: list

    kind = "mlp"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or self.widths[-1] != 1:
            raise ArgumentError(f"MLP widths must end in 1, got {self.widths}")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise ArgumentError(f"layer {i} shapes {W.shape}/{b.shape} do not chain with widths {self.widths}")

    @property
    def architecture(self) -> dict:
        return {"widths": list(self.widths)}

    @property
    def parameters(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_parameters(self, params) -> "MlpNetwork":
        params = [np.asarray(p, dtype=np.float64) for p in params]
        return MlpNetwork(self.widths, params[0::2], params[1::2])

    @property
    def dropout_widths(self):
        return self.widths[1:-1]

    def forward(self, tape, X, params, masks=None):
        h = tape.lift(X)
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            h = ad.einsum("bi,io->bo", h, params[2 * i]) + params[2 * i + 1]
            _check_layer(h, i)
            if i < n_layers - 1:
                h = ad.softplus(h)
                if masks:
                    h = apply_dropout(h, masks[i])
        return ad.reshape(h, (-1,))


# ---------------------------------------------------------------------------
# KAN


@dataclass(eq=False)
class KanNetwork(_Model):
    """Stack of KAN layers. Edge (i -> o) of layer l computes

    spline_weight[l][i, o] * sum_k coefficients[l][i, o, k] B_k(x_i) + base_weight[l][i, o] * silu(x_i)
    and each output unit sums its incoming edges.
    """

    widths: tuple
    grids: list  # one SplineGrid per layer
    coefficients: list
    spline_weights: list
    base_weights: list

    kind = "kan"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or self.widths[-1] != 1:
            raise ArgumentError(f"KAN widths must end in 1, got {self.widths}")
        if len(self.grids) != len(self.widths) - 1:
            raise ArgumentError("a KAN needs one spline grid per layer")
        for i, (g, c, s, b) in enumerate(zip(self.grids, self.coefficients, self.spline_weights, self.base_weights)):
            shape = (self.widths[i], self.widths[i + 1])
            if c.shape != shape + (g.n_basis,) or s.shape != shape or b.shape != shape:
                raise ArgumentError(f"KAN layer {i} parameter shapes do not chain with widths {self.widths}")

    @property
    def grid(self) -> SplineGrid:
        """Grid of the input layer."""
        return self.grids[0]

    @property
    def architecture(self) -> dict:
        g = self.grids[0]
        arch = {
            "widths": list(self.widths),
            "grid_size": g.grid_size,
            "spline_order": g.order,
            "domain": [g.domain_lo, g.domain_hi],
        }
        if len(self.grids) > 1:
            h = self.grids[1]
            arch["hidden_domain"] = [h.domain_lo, h.domain_hi]
        return arch

    @property
    def parameters(self):
        out = []
        for c, s, b in zip(self.coefficients, self.spline_weights, self.base_weights):
            out += [c, s, b]
        return out

    def with_parameters(self, params, grids=None) -> "KanNetwork":
        params = [np.asarray(p, dtype=np.float64) for p in params]
        return KanNetwork(self.widths, list(grids or self.grids), params[0::3], params[1::3], params[2::3])

    @property
    def dropout_widths(self):
        return self.widths[1:-1]

    def edge(self, layer: int, i: int, o: int) -> KanEdge:
        return KanEdge(
            self.grids[layer],
            self.coefficients[layer][i, o].copy(),
            float(self.base_weights[layer][i, o]),
            float(self.spline_weights[layer][i, o]),
        )

    def forward(self, tape, X, params, masks=None):
        h = tape.lift(X)
        n_layers = len(self.widths) - 1
        for layer in range(n_layers):
            coef, sw, bw = params[3 * layer : 3 * layer + 3]
            i_dim, o_dim = self.widths[layer], self.widths[layer + 1]
            scaled = coef * ad.reshape(sw, (i_dim, o_dim, 1))
            spline = ad.einsum("bik,iok->bo", basis_node(h, self.grids[layer]), scaled)
            base = ad.einsum("bi,io->bo", ad.silu(h), bw)
            h = spline + base
            _check_layer(h, layer)
            if layer < n_layers - 1 and masks:
                h = apply_dropout(h, masks[layer])
        return ad.reshape(h, (-1,))

    def extend_grid(self, new_G: int) -> "KanNetwork":
        """Refit every edge spline onto ``new_G`` intervals over the same domains."""
        if new_G < self.grid.grid_size:
            raise ArgumentError(f"new grid size {new_G} is smaller than current {self.grid.grid_size}")
        new_grids = [make_grid(g.domain_lo, g.domain_hi, new_G, g.order) for g in self.grids]
        coeffs = [refit_coefficients(g, c, ng) for g, c, ng in zip(self.grids, self.coefficients, new_grids)]
        return KanNetwork(
            self.widths,
            new_grids,
            coeffs,
            [s.copy() for s in self.spline_weights],
            [b.copy() for b in self.base_weights],
        )


Model = MlpNetwork | KanNetwork


def _check_layer(h, layer):
    if not np.all(np.isfinite(h.value)):
        raise NumericalError(f"non-finite activation in layer {layer}")


# ---------------------------------------------------------------------------
# construction


def default_architecture(kind: str) -> dict:
    if kind in ("mlp", "mlp_pil"):
        return {"widths": [INPUT_WIDTH, *MLP_HIDDEN, 1]}
    if kind == "kan":
        return {
            "widths": [INPUT_WIDTH] + [KAN_WIDTH] * (KAN_LAYERS - 1) + [1],
            "grid_size": 5,
            "spline_order": 3,
            "domain": [0.0, 1.0],
            "hidden_domain": [-1.0, 1.0],
        }
    raise ArgumentError(f"unknown model kind {kind!r}; expected kan, mlp or mlp_pil")


def kan_widths(n_layers: int, width: int, input_width: int = INPUT_WIDTH) -> list:
    """Widths for ``n_layers`` KAN layers: input -> width -> ... -> width -> 1."""
    if n_layers < 1:
        raise ArgumentError("a KAN needs at least one layer")
    return [input_width] + [width] * (n_layers - 1) + [1]


def init_model(kind: str, architecture: dict | None = None, seed: int = 0) -> Model:
    arch = dict(default_architecture(kind))
    if architecture:
        arch.update(architecture)
    widths = [int(w) for w in arch["widths"]]
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ArgumentError(f"invalid widths {widths}")
    if widths[-1] != 1:
        raise ArgumentError(f"output width must be 1, got {widths[-1]}")
    rng = np.random.default_rng(seed)

    if kind in ("mlp", "mlp_pil"):
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return MlpNetwork(tuple(widths), weights, biases)

    G, k = int(arch["grid_size"]), int(arch["spline_order"])
    first = make_grid(arch["domain"][0], arch["domain"][1], G, k)
    hidden_domain = arch.get("hidden_domain", arch["domain"])
    hidden = make_grid(hidden_domain[0], hidden_domain[1], G, k)
    grids = [first] + [hidden] * (len(widths) - 2)
    coeffs, sws, bws = [], [], []
    for grid, fan_in, fan_out in zip(grids, widths[:-1], widths[1:]):
        sw = np.ones((fan_in, fan_out))
        coeffs.append(0.1 * sw[..., None] * rng.standard_normal((fan_in, fan_out, grid.n_basis)))
        sws.append(sw)
        bound = 1.0 / np.sqrt(fan_in)
        bws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    return KanNetwork(tuple(widths), grids, coeffs, sws, bws)


def parameter_count(kind: str, architecture: dict) -> int:
    widths = architecture["widths"]
    pairs = list(zip(widths[:-1], widths[1:]))
    if kind in ("mlp", "mlp_pil"):
        return sum(i * o + o for i, o in pairs)
    nb = int(architecture["grid_size"]) + int(architecture["spline_order"])
    return sum(i * o * (nb + 2) for i, o in pairs)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 11
    max_epochs: int = 3000
    dropout_rate: float = 0.1
    loss_kind: str = "mse"
    gamma1: float = 0.1
    gamma2: float = 0.1
    fd_step: float = 1e-3
    collocation_points: int = 0
    seed: int = 0
    early_stop_patience: int = 200
    early_stop_min_delta: float = 1e-6

    def __post_init__(self):
        if not self.learning_rate >= 0.0:
            raise ArgumentError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ArgumentError("max_epochs must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ArgumentError("dropout_rate must lie in [0, 1)")
        if self.loss_kind not in ("mse", "mse_plus_physics"):
            raise ArgumentError(f"loss_kind must be mse or mse_plus_physics, got {self.loss_kind!r}")
        if self.early_stop_patience < 1:
            raise ArgumentError("early_stop_patience must be >= 1")
        if not self.early_stop_min_delta >= 0.0:
            raise ArgumentError("early_stop_min_delta must be >= 0")
        if not (self.gamma1 >= 0.0 and self.gamma2 >= 0.0):
            raise ArgumentError("gamma1 and gamma2 must be >= 0")
        self.physics  # validates fd_step and collocation_points

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "TrainConfig":
        base = {
            "kan": dict(max_epochs=500, dropout_rate=0.2, loss_kind="mse"),
            "mlp": dict(max_epochs=3000, dropout_rate=0.1, loss_kind="mse"),
            "mlp_pil": dict(max_epochs=3000, dropout_rate=0.1, loss_kind="mse_plus_physics"),
        }
        if kind not in base:
            raise ArgumentError(f"unknown model kind {kind!r}; expected kan, mlp or mlp_pil")
        return cls(**{**base[kind], **overrides})

    @property
    def physics(self) -> PhysicsPenaltyConfig:
        if self.loss_kind == "mse":
            return PhysicsPenaltyConfig(0.0, 0.0, self.fd_step)
        return PhysicsPenaltyConfig(self.gamma1, self.gamma2, self.fd_step, self.collocation_points)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ArgumentError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class TrainResult:
    model: Model
    loss_trace: list
    best_loss: float
    best_epoch: int  # 0 = initial parameters were never beaten
    epochs_run: int
    stopped_early: bool = False


def dataset_loss(model: Model, X, y, physics: PhysicsPenaltyConfig, params=None) -> float:
    """Evaluation-mode training objective over the whole of (X, y)."""
    tape = Tape()
    if params is None:
        nodes = model.param_nodes(tape, requires_grad=False)
    else:
        nodes = [tape.leaf(p, requires_grad=False) for p in params]
    total, _, _ = loss_node(model, tape, nodes, X, y, physics)
    return float(total.value)


def train(
    model: Model,
    X,
    y,
    config: TrainConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam with per-epoch reshuffling and early stopping.

    The loss recorded for each epoch is the evaluation-mode objective on the
    full training set after that epoch. The returned model carries the
    parameters with the lowest such loss, the initial parameters included.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ArgumentError("training set must be a non-empty (n, d) array")
    if y.shape != (X.shape[0],):
        raise ArgumentError(f"targets shape {y.shape} does not match {X.shape[0]} rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ArgumentError("training data must be finite")

    physics = config.physics
    rng = np.random.default_rng(config.seed)
    n = X.shape[0]
    params = [p.copy() for p in model.parameters]
    state = AdamState.zeros_like(params)

    best_loss = dataset_loss(model, X, y, physics, params)
    if not np.isfinite(best_loss):
        raise TrainingError("initial loss is not finite", epoch=0)
    best_params, best_epoch = params, 0
    reference, stale = best_loss, 0
    trace = []
    stopped = False

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            masks = None
            if config.dropout_rate > 0.0:
                masks = [draw_dropout_mask((idx.size, w), config.dropout_rate, rng) for w in model.dropout_widths]
            probe_X = probe_masks = None
            if physics.active and physics.collocation_points:
                probe_X = _probe_points(rng, physics.collocation_points, X.shape[1])
                if config.dropout_rate > 0.0:
                    probe_masks = [
                        draw_dropout_mask((probe_X.shape[0], w), config.dropout_rate, rng)
                        for w in model.dropout_widths
                    ]
            try:
                tape = Tape()
                nodes = [tape.leaf(p) for p in params]
                total, _, _ = loss_node(model, tape, nodes, X[idx], y[idx], physics, masks, probe_X, probe_masks)
                if not np.isfinite(total.value):
                    raise NumericalError("non-finite batch loss")
                grads = tape.gradient(total, nodes)
                params, state = adam_step(params, grads, state, config.learning_rate)
            except NumericalError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch=epoch) from exc

        try:
            loss = dataset_loss(model, X, y, physics, params)
        except NumericalError as exc:
            raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch=epoch) from exc
        if not np.isfinite(loss):
            raise TrainingError(f"training diverged in epoch {epoch} (non-finite loss)", epoch=epoch)
        trace.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, loss)
        if loss < best_loss:
            best_loss, best_params, best_epoch = loss, params, epoch
        if loss < reference - config.early_stop_min_delta:
            reference, stale = loss, 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                log.info("early stop at epoch %d (best %.6g at epoch %d)", epoch, best_loss, best_epoch)
                stopped = True
                break

    return TrainResult(model.with_parameters(best_params), trace, best_loss, best_epoch, len(trace), stopped)


def _probe_points(rng, count, width):
    from .schema import N_COMPOSITIONS, N_PHYSICAL

    P = np.zeros((count, width))
    P[:, :N_PHYSICAL] = rng.random((count, N_PHYSICAL))
    P[np.arange(count), N_PHYSICAL + rng.integers(N_COMPOSITIONS, size=count)] = 1.0
    return P


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    model: Model,
    path,
    normalizer: Normalizer | None = None,
    metadata: dict | None = None,
) -> None:
    """Write a versioned JSON checkpoint. Floats are written with full round-trip precision."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "architecture": model.architecture,
        "features": list(FEATURES),
        "normalizer": None if normalizer is None else normalizer.to_dict(),
        "parameters": [float(v) for v in model.flat_parameters()],
        "metadata": metadata or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=False) + "\n", encoding="utf-8")


@dataclass
class Checkpoint:
    model: Model
    normalizer: Normalizer | None
    metadata: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is not valid JSON (truncated?): {exc.msg}", row=exc.lineno) from None
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint root must be an object")
    for key in ("version", "kind", "architecture", "parameters"):
        if key not in doc:
            raise CheckpointError(f"checkpoint is missing field {key!r}", column=key)
    if doc["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {doc['version']!r} is not supported (expected {CHECKPOINT_VERSION})",
            column="version",
        )
    if doc.get("features", list(FEATURES)) != list(FEATURES):
        raise CheckpointError("checkpoint feature order differs from this build", column="features")
    kind = doc["kind"]
    if kind not in ("mlp", "kan"):
        raise CheckpointError(f"unknown model kind {kind!r}", column="kind")
    arch = doc["architecture"]
    try:
        template = init_model(kind, arch, seed=0)
    except (ArgumentError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad architecture: {exc}", column="architecture") from None
    flat = np.asarray(doc["parameters"], dtype=np.float64)
    expected = template.n_params
    if flat.shape != (expected,):
        raise CheckpointError(
            f"parameter count {flat.size} does not match architecture ({expected})", column="parameters"
        )
    params, offset = [], 0
    for p in template.parameters:
        params.append(flat[offset : offset + p.size].reshape(p.shape))
        offset += p.size
    norm = doc.get("normalizer")
    try:
        normalizer = None if norm is None else Normalizer.from_dict(norm)
    except (KeyError, ArgumentError, TypeError) as exc:
        raise CheckpointError(f"bad normalizer: {exc}", column="normalizer") from None
    return Checkpoint(template.with_parameters(params), normalizer, doc.get("metadata", {}))
