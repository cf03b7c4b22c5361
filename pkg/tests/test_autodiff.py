import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionkan import autodiff as ad
from fusionkan.autodiff import AdamState, Tape, adam_step, apply_dropout, draw_dropout_mask
from fusionkan.errors import ArgumentError, NumericalError, StructuralError
from fusionkan.network import init_model, kan_widths


def central_difference(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def assert_fd_close(analytic, numeric, rel=1e-4, floor=1e-7):
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(numeric), np.abs(analytic))
    assert np.all(err <= np.maximum(rel * scale, floor)), np.max(err / np.maximum(scale, floor))


class TestBackward:
    def test_square(self):
        tape = Tape()
        theta = tape.leaf(3.0)
        (g,) = tape.gradient(theta * theta, [theta])
        assert g == 6.0

    def test_constant_output(self):
        tape = Tape()
        theta = tape.leaf(3.0)
        c = tape.constant(2.5)
        (g,) = tape.gradient(c * 1.0 + 0.0 * theta, [theta])
        assert g == 0.0

    def test_unrelated_leaf_gets_zero(self):
        tape = Tape()
        a, b = tape.leaf(1.0), tape.leaf(np.ones(3))
        (ga, gb) = tape.gradient(a * 2.0, [a, b])
        assert ga == 2.0
        assert np.array_equal(gb, np.zeros(3))

    def test_repeated_backward_does_not_accumulate(self):
        tape = Tape()
        theta = tape.leaf(2.0)
        out = theta**3
        first = tape.gradient(out, [theta])[0]
        second = tape.gradient(out, [theta])[0]
        assert first == second == 12.0

    def test_output_from_other_tape(self):
        t1, t2 = Tape(), Tape()
        x = t1.leaf(1.0)
        with pytest.raises(StructuralError):
            t2.gradient(x * 2.0, [x])

    def test_mixing_tapes(self):
        with pytest.raises(StructuralError):
            Tape().leaf(1.0) + Tape().leaf(2.0)

    def test_non_scalar_output(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ArgumentError):
            tape.gradient(x * 2.0, [x])

    def test_topological_violation_detected(self):
        tape = Tape()
        x = tape.leaf(1.0)
        y = x * 2.0
        # forge a dependency on a later node
        z = x * 3.0
        y.parents = (z,)
        out = ad.sum_all(y)
        with pytest.raises(StructuralError):
            tape.gradient(out, [x])


PRIMITIVES = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "pow": lambda a, b: (a * a + 1.0) ** 1.7 + b,
    "exp": lambda a, b: ad.exp(a) * b,
    "log": lambda a, b: ad.log(a * a + 1.0) + b,
    "softplus": lambda a, b: ad.softplus(a) * b,
    "silu": lambda a, b: ad.silu(a) + b,
    "relu": lambda a, b: ad.relu(a) * b,
    "abs": lambda a, b: ad.absolute(a) + b,
    "einsum": lambda a, b: ad.einsum("i,i->i", a, b),
    "concat": lambda a, b: ad.concat([a, b])[1:4] * 2.0,
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_difference(name):
    op = PRIMITIVES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(100):
        a0 = rng.normal(size=3)
        if name in ("relu", "abs"):
            a0 = np.where(np.abs(a0) < 1e-3, 0.5, a0)  # keep away from the kink
        b0 = rng.normal(size=3)
        w = rng.normal(size=3)

        def f(a, b):
            tape = Tape()
            return float(ad.sum_all(op(tape.leaf(a), tape.leaf(b)) * w).value)

        tape = Tape()
        a, b = tape.leaf(a0), tape.leaf(b0)
        ga, gb = tape.gradient(ad.sum_all(op(a, b) * w), [a, b])
        assert_fd_close(ga, central_difference(lambda x: f(x, b0), a0))
        assert_fd_close(gb, central_difference(lambda x: f(a0, x), b0))


def test_broadcast_gradients_reduce_to_operand_shape():
    tape = Tape()
    a = tape.leaf(np.ones((4, 3)))
    b = tape.leaf(np.arange(3.0))
    (ga, gb) = tape.gradient(ad.sum_all(a * b), [a, b])
    assert ga.shape == (4, 3) and gb.shape == (3,)
    assert np.array_equal(gb, np.full(3, 4.0))


def _loss_fn(model, X):
    def f(flat):
        params, off = [], 0
        for p in model.parameters:
            params.append(flat[off : off + p.size].reshape(p.shape))
            off += p.size
        return float(np.sum(model.with_parameters(params).predict(X)))

    return f


@pytest.mark.parametrize("kind,arch", [("mlp", {"widths": [2, 4, 1]}), ("kan", {"widths": [2, 2, 1]})])
def test_network_parameter_gradients(kind, arch):
    model = init_model(kind, arch, seed=3)
    rng = np.random.default_rng(0)
    X = rng.random((5, 2))
    tape = Tape()
    nodes = model.param_nodes(tape)
    grads = tape.gradient(ad.sum_all(model.forward(tape, X, nodes)), nodes)
    flat = np.concatenate([g.ravel() for g in grads])
    numeric = central_difference(_loss_fn(model, X), model.flat_parameters())
    assert_fd_close(flat, numeric)


class TestInputSensitivity:
    class Linear:
        def __init__(self, w):
            self.w = np.asarray(w, dtype=np.float64)
            self.parameters = [self.w]

        def param_nodes(self, tape, requires_grad=True):
            return [tape.leaf(self.w, requires_grad)]

        def forward(self, tape, X, params, masks=None):
            return ad.einsum("bi,i->b", tape.lift(X), params[0])

    def test_linear(self):
        m = self.Linear([3.0, 1.0])
        assert ad.input_sensitivity(m, [0.2, 0.7], 0) == 3.0

    def test_independent_feature(self):
        m = self.Linear([3.0, 0.0])
        assert ad.input_sensitivity(m, [0.2, 0.7], 1) == 0.0

    def test_out_of_range(self):
        with pytest.raises(ArgumentError):
            ad.input_sensitivity(self.Linear([1.0, 1.0]), [0.1, 0.2], 2)

    def test_small_kan_matches_finite_difference(self):
        model = init_model("kan", {"widths": [3, 2, 1]}, seed=5)
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.uniform(0.05, 0.95, size=3)
            numeric = central_difference(lambda v: float(model.predict(v)[0]), x)
            analytic = np.array([ad.input_sensitivity(model, x, j) for j in range(3)])
            assert_fd_close(analytic, numeric)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = [np.array([1.0, -2.0])]
        new, state = adam_step(p, [np.zeros(2)], AdamState.zeros_like(p), 1e-3)
        assert np.array_equal(new[0], p[0])
        assert state.step_count == 1

    def test_first_step(self):
        # m = 0.05, v = 2.5e-4; bias-corrected 0.5 / (sqrt(0.25) + 1e-8)
        p = [np.array([0.0])]
        new, state = adam_step(p, [np.array([0.5])], AdamState.zeros_like(p), 1e-3)
        assert new[0][0] == pytest.approx(-0.0009999999800000003, rel=1e-12)
        assert state.second_moment[0][0] >= 0.0

    def test_non_finite_gradient_rejected_with_index(self):
        p = [np.zeros(2), np.zeros(3)]
        g = [np.zeros(2), np.array([0.0, np.nan, 0.0])]
        with pytest.raises(NumericalError, match="index 3"):
            adam_step(p, g, AdamState.zeros_like(p), 1e-3)

    def test_inputs_not_mutated(self):
        p = [np.ones(2)]
        state = AdamState.zeros_like(p)
        adam_step(p, [np.ones(2)], state, 1e-2)
        assert np.array_equal(p[0], np.ones(2)) and state.step_count == 0

    def test_deterministic_trace(self):
        def run():
            rng = np.random.default_rng(11)
            p = [rng.normal(size=4)]
            s = AdamState.zeros_like(p)
            trace = []
            for _ in range(50):
                p, s = adam_step(p, [2 * p[0] + rng.normal(size=4)], s, 1e-2)
                trace.append(p[0].copy())
            return np.array(trace)

        assert np.array_equal(run(), run())


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        mask = draw_dropout_mask(x.shape, 0.0, np.random.default_rng(0))
        assert np.array_equal(apply_dropout(x, mask), x)

    def test_evaluation_mode_is_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        mask = draw_dropout_mask(x.shape, 0.7, np.random.default_rng(0))
        assert np.array_equal(apply_dropout(x, mask, training=False), x)

    def test_kept_entries_rescaled(self):
        x = np.ones((50, 40))
        mask = draw_dropout_mask(x.shape, 0.25, np.random.default_rng(2))
        out = apply_dropout(x, mask)
        assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}

    def test_kept_fraction(self):
        mask = draw_dropout_mask((10_000,), 0.5, np.random.default_rng(4))
        assert abs(mask.keep.mean() - 0.5) <= 0.02

    def test_invalid_rate(self):
        with pytest.raises(ArgumentError):
            draw_dropout_mask((3,), 1.0, np.random.default_rng(0))

    def test_shape_mismatch(self):
        mask = draw_dropout_mask((3,), 0.5, np.random.default_rng(0))
        with pytest.raises(ArgumentError):
            apply_dropout(np.ones(4), mask)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-3, 3),
    st.floats(-3, 3),
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
)
def test_backward_is_linear(a, b, x0):
    x0 = np.array(x0)

    def grad(build):
        tape = Tape()
        x = tape.leaf(x0)
        return tape.gradient(build(x), [x])[0]

    f = lambda x: ad.sum_all(ad.softplus(x) * x)
    g = lambda x: ad.sum_all(ad.silu(x * 2.0))
    combined = grad(lambda x: a * f(x) + b * g(x))
    np.testing.assert_allclose(combined, a * grad(f) + b * grad(g), rtol=1e-12, atol=1e-12)
