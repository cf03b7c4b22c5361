import json

import numpy as np
import pytest

from fusionkan.errors import ArgumentError, CheckpointError, TrainingError
from fusionkan.network import (
    TrainConfig,
    dataset_loss,
    default_architecture,
    init_model,
    kan_widths,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    train,
)
from fusionkan.physics import NO_PHYSICS


@pytest.fixture
def small_kan():
    return init_model("kan", {"widths": [16, 6, 4, 1]}, seed=1)


def toy_data(n=60, d=16, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    return X, np.sin(3 * X[:, 0]) + X[:, 1] ** 2


class TestInit:
    def test_seeded(self):
        a = init_model("mlp", None, seed=3).flat_parameters()
        b = init_model("mlp", None, seed=3).flat_parameters()
        assert np.array_equal(a, b)
        assert not np.array_equal(a, init_model("mlp", None, seed=4).flat_parameters())

    def test_mlp_parameter_count(self):
        # 16*71+71 + 2*(71*71+71) + 71+1
        m = init_model("mlp", None, 0)
        assert m.n_params == 16 * 71 + 71 + 2 * (71 * 71 + 71) + 71 + 1 == 11503
        assert parameter_count("mlp", default_architecture("mlp")) == 11503

    def test_kan_layer_dimensions(self):
        m = init_model("kan", {"widths": [16, 71, 1]}, 0)
        assert m.coefficients[0].shape == (16, 71, 8)
        assert m.spline_weights[0].shape == m.base_weights[0].shape == (16, 71)
        assert m.coefficients[0].size + 2 * m.spline_weights[0].size == 16 * 71 * 10

    def test_kan_default_architecture(self):
        arch = default_architecture("kan")
        assert len(arch["widths"]) - 1 == 7
        assert arch["widths"][0] == 16 and set(arch["widths"][1:-1]) == {71}
        m = init_model("kan", None, 0)
        assert m.n_params == parameter_count("kan", arch)

    def test_mlp_glorot_bounds(self):
        m = init_model("mlp", None, 0)
        assert np.abs(m.weights[0]).max() <= np.sqrt(6 / (16 + 71))
        assert not np.any(m.biases[0])

    def test_bad_widths(self):
        with pytest.raises(ArgumentError):
            init_model("mlp", {"widths": [16, 8, 2]}, 0)
        with pytest.raises(ArgumentError):
            init_model("transformer", None, 0)

    def test_kan_widths_helper(self):
        assert kan_widths(3, 32) == [16, 32, 32, 1]


class TestForward:
    def test_zero_mlp(self):
        m = init_model("mlp", None, 0)
        zero = m.with_parameters([np.zeros_like(p) for p in m.parameters])
        assert np.all(zero.predict(np.random.default_rng(0).random((5, 16))) == 0.0)

    def test_zero_kan(self, small_kan):
        zero = small_kan.with_parameters([np.zeros_like(p) for p in small_kan.parameters])
        assert np.all(zero.predict(np.random.default_rng(0).random((5, 16))) == 0.0)

    def test_pure(self, small_kan):
        X = np.random.default_rng(1).random((7, 16))
        assert np.array_equal(small_kan.predict(X), small_kan.predict(X))

    def test_non_finite_input(self, small_kan):
        with pytest.raises(ArgumentError):
            small_kan.predict(np.full((1, 16), np.nan))

    def test_kan_continuous_in_one_coordinate(self, small_kan):
        x = np.random.default_rng(2).random(16)
        t = np.linspace(-0.2, 1.2, 4001)
        X = np.tile(x, (t.size, 1))
        X[:, 4] = t
        f = small_kan.predict(X)
        jumps = np.abs(np.diff(f))
        slope = np.abs(np.gradient(f, t)) * (t[1] - t[0])
        local = np.maximum(slope[1:], slope[:-1])
        assert np.all(jumps <= 10 * local + 1e-9)


class TestTrain:
    def test_zero_learning_rate(self, small_kan):
        X, y = toy_data()
        res = train(small_kan, X, y, TrainConfig(learning_rate=0.0, max_epochs=1))
        assert len(res.loss_trace) == 1
        assert np.array_equal(res.model.flat_parameters(), small_kan.flat_parameters())

    def test_learns_identity(self):
        rng = np.random.default_rng(3)
        X = rng.random((200, 2))
        y = X[:, 0].copy()
        model = init_model("mlp", {"widths": [2, 8, 1]}, 0)
        cfg = TrainConfig(max_epochs=2000, dropout_rate=0.0, learning_rate=1e-2, early_stop_patience=100)
        res = train(model, X, y, cfg)
        assert np.mean((res.model.predict(X) - y) ** 2) < 1e-3

    def test_deterministic(self, small_kan):
        X, y = toy_data()
        cfg = TrainConfig.for_kind("kan", max_epochs=5)
        a, b = train(small_kan, X, y, cfg), train(small_kan, X, y, cfg)
        assert a.loss_trace == b.loss_trace
        assert np.array_equal(a.model.flat_parameters(), b.model.flat_parameters())

    def test_pil_deterministic(self):
        X, y = toy_data()
        m = init_model("mlp", {"widths": [16, 8, 1]}, 2)
        cfg = TrainConfig.for_kind("mlp_pil", max_epochs=3)
        assert train(m, X, y, cfg).loss_trace == train(m, X, y, cfg).loss_trace

    def test_returns_best_parameters(self, small_kan):
        X, y = toy_data()
        res = train(small_kan, X, y, TrainConfig.for_kind("kan", max_epochs=15))
        assert dataset_loss(res.model, X, y, NO_PHYSICS) == res.best_loss
        assert res.best_loss == min([dataset_loss(small_kan, X, y, NO_PHYSICS)] + res.loss_trace)

    def test_early_stopping(self):
        X, y = toy_data()
        m = init_model("mlp", {"widths": [16, 4, 1]}, 0)
        res = train(m, X, y, TrainConfig(learning_rate=0.0, max_epochs=50, early_stop_patience=3))
        assert res.epochs_run == 3 and res.stopped_early

    def test_divergence_reports_epoch(self):
        X, _ = toy_data()
        m = init_model("mlp", {"widths": [16, 4, 1]}, 0)
        with pytest.raises(TrainingError) as err, np.errstate(over="ignore"):
            train(m, X, np.full(X.shape[0], 1e200), TrainConfig(max_epochs=2))
        assert err.value.epoch is not None

    def test_empty_training_set(self, small_kan):
        with pytest.raises(ArgumentError):
            train(small_kan, np.zeros((0, 16)), np.zeros(0), TrainConfig())

    @pytest.mark.parametrize(
        "kw", [dict(dropout_rate=1.0), dict(learning_rate=-1.0), dict(gamma1=-0.1), dict(loss_kind="huber")]
    )
    def test_invalid_config(self, kw):
        with pytest.raises(ArgumentError):
            TrainConfig(**kw)

    def test_table_defaults(self):
        mlp, kan = TrainConfig.for_kind("mlp"), TrainConfig.for_kind("kan")
        assert (mlp.learning_rate, mlp.batch_size, mlp.max_epochs, mlp.dropout_rate) == (1e-3, 11, 3000, 0.1)
        assert (kan.learning_rate, kan.batch_size, kan.max_epochs, kan.dropout_rate) == (1e-3, 11, 500, 0.2)
        assert TrainConfig.for_kind("mlp_pil").loss_kind == "mse_plus_physics"
        assert not mlp.physics.active and TrainConfig.for_kind("mlp_pil").physics.active


class TestGridExtension:
    def test_outputs_preserved(self, small_kan):
        X = np.random.default_rng(4).random((50, 16))
        ext = small_kan.extend_grid(10)
        assert ext.grid.grid_size == 10
        # the hidden grids are refined as well; interior points barely move
        np.testing.assert_allclose(ext.predict(X), small_kan.predict(X), atol=1e-3)

    def test_shrink_rejected(self, small_kan):
        with pytest.raises(ArgumentError):
            small_kan.extend_grid(3)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, small_kan):
        path = tmp_path / "m.json"
        save_checkpoint(small_kan, path, metadata={"seed": 1})
        ck = load_checkpoint(path)
        X = np.random.default_rng(5).random((100, 16))
        assert np.array_equal(ck.model.predict(X), small_kan.predict(X))
        assert ck.metadata == {"seed": 1}

    def test_mlp_round_trip(self, tmp_path):
        m = init_model("mlp", None, 9)
        save_checkpoint(m, tmp_path / "m.json")
        assert np.array_equal(load_checkpoint(tmp_path / "m.json").model.flat_parameters(), m.flat_parameters())

    def test_extended_kan_round_trip(self, tmp_path, small_kan):
        ext = small_kan.extend_grid(8)
        save_checkpoint(ext, tmp_path / "m.json")
        X = np.random.default_rng(6).random((20, 16))
        assert np.array_equal(load_checkpoint(tmp_path / "m.json").model.predict(X), ext.predict(X))

    def test_bytes_deterministic(self, tmp_path, small_kan):
        save_checkpoint(small_kan, tmp_path / "a.json")
        save_checkpoint(small_kan, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_field_order(self, tmp_path, small_kan):
        save_checkpoint(small_kan, tmp_path / "m.json")
        doc = json.loads((tmp_path / "m.json").read_text())
        assert list(doc) == ["version", "kind", "architecture", "features", "normalizer", "parameters", "metadata"]

    def test_corrupted_parameter_count(self, tmp_path, small_kan):
        path = tmp_path / "m.json"
        save_checkpoint(small_kan, path)
        doc = json.loads(path.read_text())
        doc["parameters"] = doc["parameters"][:-1]
        path.write_text(json.dumps(doc))
        with pytest.raises(CheckpointError, match="parameters"):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path, small_kan):
        path = tmp_path / "m.json"
        save_checkpoint(small_kan, path)
        doc = json.loads(path.read_text())
        doc["version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path, small_kan):
        path = tmp_path / "m.json"
        save_checkpoint(small_kan, path)
        path.write_text(path.read_text()[:200])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_recorded_loss_reproduced(self, tmp_path, small_kan):
        X, y = toy_data()
        res = train(small_kan, X, y, TrainConfig.for_kind("kan", max_epochs=4))
        save_checkpoint(res.model, tmp_path / "m.json", metadata={"final_loss": res.best_loss})
        ck = load_checkpoint(tmp_path / "m.json")
        assert abs(dataset_loss(ck.model, X, y, NO_PHYSICS) - ck.metadata["final_loss"]) <= 1e-12
