"""Graph assembly, shape algebra, SGD semantics, and trainer behavior."""

import numpy as np
import pytest

from xldv.ctdnn import CTDNNConfig, build_phone_blind
from xldv.errors import InvalidArgumentError, NumericError, StateError
from xldv.nn import LayerSpec, NetworkGraph, TrainState, sgd_step, softmax_xent, train

SMALL = CTDNNConfig(
    n_speakers=4, conv1_channels=4, conv2_channels=6, bottleneck_dim=16,
    td_hidden=8, feature_dim=10,
)


class TestGraphBuild:
    def test_shape_record_consistent(self):
        g = build_phone_blind(SMALL, seed=1)
        for (prev, nxt), layer in zip(g.shape_record, g.layers):
            assert prev is not None and nxt is not None
        assert g.output_shape == ("vec", 4)

    def test_inconsistent_shapes_fail_at_build(self):
        with pytest.raises(InvalidArgumentError, match="pnorm"):
            NetworkGraph(
                [LayerSpec("affine", dim=5), LayerSpec("pnorm", group=2)], ("vec", 3)
            )

    def test_parameter_count_reproducible_from_specs(self):
        g1 = build_phone_blind(SMALL, seed=1)
        g2 = build_phone_blind(SMALL, seed=99)
        assert g1.n_parameters == g2.n_parameters

    def test_deterministic_init(self):
        g1 = build_phone_blind(SMALL, seed=7)
        g2 = build_phone_blind(SMALL, seed=7)
        for (_, _, a), (_, _, b) in zip(g1.parameters(), g2.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_backward_before_forward_is_state_error(self):
        g = build_phone_blind(SMALL, seed=1)
        with pytest.raises(StateError):
            g.backward(np.zeros((1, 3, 4)))

    def test_checkpoint_round_trip(self, tmp_path):
        g = build_phone_blind(SMALL, seed=3).astype(np.float64)
        path = tmp_path / "g.nnck"
        g.save(path, extra_header={"variant": "phone-blind"})
        g2, header = NetworkGraph.from_checkpoint(path)
        assert header["variant"] == "phone-blind"
        x = np.random.default_rng(0).normal(size=(1, 6, 40, 9))
        np.testing.assert_array_equal(g.forward(x), g2.forward(x))


class TestBackwardProperties:
    def test_zero_loss_gradient_gives_zero_param_gradients(self):
        g = build_phone_blind(SMALL, seed=2).astype(np.float64)
        x = np.random.default_rng(1).normal(size=(1, 5, 40, 9))
        g.forward(x, want_cache=True)
        grads, _ = g.backward(np.zeros((1, 5, 4)))
        for gd in grads:
            for arr in gd.values():
                assert np.all(arr == 0.0)

    def test_single_affine_closed_form(self):
        g = NetworkGraph([LayerSpec("affine", dim=3)], ("vec", 2), dtype=np.float64)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 4, 2))
        delta = rng.normal(size=(2, 4, 3))
        g.forward(x, want_cache=True)
        grads, _ = g.backward(delta)
        np.testing.assert_allclose(
            grads[0]["W"], x.reshape(-1, 2).T @ delta.reshape(-1, 3), atol=1e-12
        )
        np.testing.assert_allclose(grads[0]["b"], delta.reshape(-1, 3).sum(0), atol=1e-12)


class TestSgdStep:
    def _graph(self):
        g = NetworkGraph([LayerSpec("affine", dim=2)], ("vec", 1), dtype=np.float64)
        g.layers[0].params["W"] = np.zeros((1, 2))
        g.layers[0].params["b"] = np.zeros(2)
        return g

    def test_plain_step(self):
        g = self._graph()
        velocity = [dict()]
        sgd_step(g, [{"W": np.array([[1.0, 2.0]]), "b": np.zeros(2)}], velocity, 1.0, 0.0)
        np.testing.assert_array_equal(g.layers[0].params["W"], [[-1.0, -2.0]])

    def test_zero_gradient_no_change(self):
        g = self._graph()
        velocity = [dict()]
        sgd_step(g, [{"W": np.zeros((1, 2)), "b": np.zeros(2)}], velocity, 1.0, 0.0)
        np.testing.assert_array_equal(g.layers[0].params["W"], np.zeros((1, 2)))

    def test_momentum_accumulates(self):
        g = self._graph()
        velocity = [dict()]
        grad = [{"W": np.ones((1, 2)), "b": np.zeros(2)}]
        sgd_step(g, grad, velocity, 0.1, 0.9)
        sgd_step(g, grad, velocity, 0.1, 0.9)
        # v1 = -0.1; v2 = 0.9*v1 - 0.1 = -0.19; theta = v1+v2 = -0.29
        np.testing.assert_allclose(g.layers[0].params["W"], -0.29 * np.ones((1, 2)))


class _ToyData:
    """Linearly separable 2-class problem on 2-d inputs."""

    def __init__(self, seed=0, n=64):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, n)
        x = rng.normal(size=(n, 1, 2)) + np.where(labels[:, None, None] > 0, 2.0, -2.0)
        self.x = x.astype(np.float64)
        self.labels = labels
        self.val_batches = [(self.x, None, self.labels)]

    def train_batch(self, rng):
        idx = rng.integers(0, len(self.labels), 16)
        return self.x[idx], None, self.labels[idx]


class TestTrainer:
    def _graph(self):
        return NetworkGraph(
            [LayerSpec("affine", dim=2), LayerSpec("softmax-xent")],
            ("vec", 2),
            seed=5,
            dtype=np.float64,
        )

    def test_toy_problem_beats_chance_bound(self):
        g = self._graph()
        data = _ToyData()
        state = TrainState(learning_rate=0.5, max_epochs=10, batches_per_epoch=20, seed=1)
        result = train(g, data, state)
        assert result.val_loss < np.log(2)
        assert result.val_accuracy > 0.95

    def test_zero_epochs_leaves_parameters_at_init(self):
        g = self._graph()
        before = {k: v.copy() for k, v in g.tensors().items()}
        state = TrainState(learning_rate=0.5, max_epochs=0)
        train(g, _ToyData(), state)
        for k, v in g.tensors().items():
            np.testing.assert_array_equal(v, before[k])

    def test_identical_seeds_identical_trajectories(self):
        results = []
        for _ in range(2):
            g = self._graph()
            state = TrainState(learning_rate=0.5, max_epochs=3, batches_per_epoch=10, seed=9)
            train(g, _ToyData(), state)
            results.append({k: v.copy() for k, v in g.tensors().items()})
        for k in results[0]:
            np.testing.assert_array_equal(results[0][k], results[1][k])

    def test_nan_loss_aborts_with_layer_diagnostics(self):
        g = self._graph()
        g.layers[0].params["W"][0, 0] = np.nan
        state = TrainState(learning_rate=0.5, max_epochs=1, batches_per_epoch=1)
        with pytest.raises(NumericError, match="0:affine"):
            train(g, _ToyData(), state)

    def test_lr_must_be_positive(self):
        with pytest.raises(InvalidArgumentError):
            TrainState(learning_rate=0.0)

    def test_lr_halves_on_stall_and_stops_after_three(self):
        class FlatData(_ToyData):
            """Validation loss cannot improve: labels are random coin flips."""

            def __init__(self):
                rng = np.random.default_rng(0)
                self.x = rng.normal(size=(32, 1, 2))
                self.labels = rng.integers(0, 2, 32)
                self.val_batches = [(self.x, None, self.labels)]

        g = self._graph()
        state = TrainState(learning_rate=1e-9, max_epochs=50, batches_per_epoch=1, seed=2)
        result = train(g, FlatData(), state)
        assert result.epochs_run <= 5  # 3 consecutive stalls stop training early
        lrs = [h["lr"] for h in state.history]
        assert lrs[-1] <= lrs[0] / 2
