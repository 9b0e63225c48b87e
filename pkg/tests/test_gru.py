import tempfile
import unittest
from pathlib import Path

import numpy as np

from flunow.errors import ModelError
from flunow.gru import (
    gru_backward,
    gru_forward,
    init_gru,
    load_checkpoint,
    predict_gru,
    saliency,
    saliency_maps,
    save_checkpoint,
    train_gru,
)
from flunow.models import GruParameters, TrainConfig

EPS = 1e-5


def close(analytic, numeric, rtol=1e-4, atol=1e-8):
    return abs(analytic - numeric) <= rtol * max(abs(analytic), abs(numeric)) + atol


class TestForward(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(4)
        self.params = init_gru(3, 5, 2, seed=1)

    def test_init_shapes_and_range(self):
        print("\n Testing GRU initialization ")
        p = self.params
        self.assertEqual(p.w_z.shape, (5, 3))
        self.assertEqual(p.u_h.shape, (5, 5))
        self.assertEqual(p.w_o.shape, (2, 5))
        self.assertTrue((np.abs(p.w_z) <= 1 / np.sqrt(3)).all())
        self.assertTrue((np.abs(p.u_r) <= 1 / np.sqrt(5)).all())
        np.testing.assert_array_equal(p.b_z, np.zeros(5))
        again = init_gru(3, 5, 2, seed=1)
        for name in GruParameters.NAMES:
            np.testing.assert_array_equal(getattr(p, name), getattr(again, name))
        with self.assertRaises(ValueError):
            init_gru(0, 5, 2, seed=1)

    def test_zero_network(self):
        zero = GruParameters(**{name: np.zeros_like(arr) for name, arr in self.params.arrays().items()})
        result = gru_forward(zero, self.rng.normal(size=(6, 3)))
        np.testing.assert_array_equal(result.hidden, np.zeros((6, 5)))
        np.testing.assert_array_equal(result.output, np.zeros(2))

    def test_hidden_state_is_bounded(self):
        big = self.params.copy()
        for name in ("w_z", "w_h", "u_h"):
            getattr(big, name)[...] *= 50.0
        result = gru_forward(big, 10.0 * self.rng.normal(size=(20, 3)))
        self.assertTrue((np.abs(result.hidden) <= 1.0).all())

    def test_matches_step_by_step_equations(self):
        """Batched forward equals a direct transcription of the cell equations."""
        print("\n Testing GRU forward against the cell equations ")
        p = self.params
        seq = self.rng.normal(size=(4, 3))
        sig = lambda a: 1.0 / (1.0 + np.exp(-a))
        h = np.zeros(5)
        for x in seq:
            z = sig(p.w_z @ x + p.u_z @ h + p.b_z)
            r = sig(p.w_r @ x + p.u_r @ h + p.b_r)
            c = np.tanh(p.w_h @ x + p.u_h @ (r * h) + p.b_h)
            h = (1 - z) * h + z * c
        expected = p.w_o @ h + p.b_o
        result = gru_forward(p, seq)
        print(result.output, expected)
        np.testing.assert_allclose(result.output, expected, atol=1e-12)
        np.testing.assert_allclose(result.hidden[-1], h, atol=1e-12)
        np.testing.assert_allclose(predict_gru(p, seq[None]), expected[None], atol=1e-12)

    def test_unit_mask_changes_nothing(self):
        seq = self.rng.normal(size=(4, 3))
        np.testing.assert_array_equal(gru_forward(self.params, seq, np.ones(5)).output,
                                      gru_forward(self.params, seq).output)

    def test_rejects_bad_input(self):
        with self.assertRaises(ValueError):
            predict_gru(self.params, np.zeros((2, 4, 2)))
        with self.assertRaises(ValueError):
            predict_gru(self.params, np.full((1, 2, 3), np.nan))


class TestGradients(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(17)
        self.params = init_gru(4, 5, 3, seed=2)
        for name in ("b_z", "b_r", "b_h", "b_o"):
            getattr(self.params, name)[...] = 0.1 * rng.normal(size=getattr(self.params, name).shape)
        self.inputs = rng.normal(size=(2, 3, 4))
        self.targets = rng.normal(size=(2, 3))
        self.masks = np.array([[2.0, 0.0, 2.0, 2.0, 0.0], [0.0, 2.0, 2.0, 0.0, 2.0]])

    def numeric(self, name, index, masks):
        plus, minus = self.params.copy(), self.params.copy()
        getattr(plus, name)[index] += EPS
        getattr(minus, name)[index] -= EPS
        up = gru_backward(plus, self.inputs, self.targets, masks).loss
        down = gru_backward(minus, self.inputs, self.targets, masks).loss
        return (up - down) / (2 * EPS)

    def test_parameter_gradients(self):
        """Every parameter entry against central differences, with and without dropout masks."""
        print("\n Testing BPTT gradients against finite differences ")
        for masks in (None, self.masks):
            grads = gru_backward(self.params, self.inputs, self.targets, masks)
            checked = 0
            for name in GruParameters.NAMES:
                for index in np.ndindex(getattr(self.params, name).shape):
                    a = grads.params[name][index]
                    n = self.numeric(name, index, masks)
                    self.assertTrue(close(a, n), f"{name}{index}: analytic {a}, numeric {n}")
                    checked += 1
            print(f"checked {checked} entries")
            self.assertGreaterEqual(checked, 100)

    def test_input_gradients(self):
        grads = gru_backward(self.params, self.inputs, self.targets)
        for index in np.ndindex(self.inputs.shape):
            plus, minus = self.inputs.copy(), self.inputs.copy()
            plus[index] += EPS
            minus[index] -= EPS
            n = (gru_backward(self.params, plus, self.targets).loss
                 - gru_backward(self.params, minus, self.targets).loss) / (2 * EPS)
            self.assertTrue(close(grads.inputs[index], n))

    def test_perfect_fit_has_no_gradient(self):
        targets = predict_gru(self.params, self.inputs)
        grads = gru_backward(self.params, self.inputs, targets)
        self.assertEqual(grads.loss, 0.0)
        for g in grads.params.values():
            np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_duplicated_batch(self):
        once = gru_backward(self.params, self.inputs, self.targets)
        twice = gru_backward(self.params, np.concatenate([self.inputs] * 2), np.concatenate([self.targets] * 2))
        self.assertAlmostEqual(once.loss, twice.loss, places=12)
        for name in GruParameters.NAMES:
            np.testing.assert_allclose(twice.params[name], once.params[name], rtol=1e-10, atol=1e-14)


class TestTraining(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(23)
        self.inputs = rng.random((64, 4, 1))
        self.targets = self.inputs[:, -1, :].copy()  # only the latest step matters
        self.params = init_gru(1, 5, 1, seed=3)

    def test_zero_learning_rate(self):
        print("\n Testing training with learning rate 0 ")
        config = TrainConfig(learning_rate=0.0, epochs=5, dropout_rate=0.0, batch_size=16, seed=0)
        result = train_gru(self.params, self.inputs, self.targets, config)
        print(result.loss_trace)
        for name in GruParameters.NAMES:
            np.testing.assert_array_equal(getattr(result.params, name), getattr(self.params, name))
        for loss in result.loss_trace:
            self.assertAlmostEqual(loss, result.loss_trace[0], places=12)

    def test_loss_decreases(self):
        config = TrainConfig(learning_rate=0.1, epochs=200, dropout_rate=0.0, batch_size=8, seed=0)
        result = train_gru(self.params, self.inputs, self.targets, config)
        print(f"loss {result.loss_trace[0]:.4f} -> {result.loss_trace[-1]:.4f}")
        self.assertLess(result.loss_trace[-1], result.loss_trace[0])
        self.assertEqual(len(result.loss_trace), 200)

    def test_seeded_training_is_deterministic(self):
        config = TrainConfig(learning_rate=0.05, epochs=20, dropout_rate=0.3, batch_size=16, seed=9)
        a = train_gru(self.params, self.inputs, self.targets, config)
        b = train_gru(self.params, self.inputs, self.targets, config)
        self.assertEqual(a.loss_trace, b.loss_trace)
        for name in GruParameters.NAMES:
            np.testing.assert_array_equal(getattr(a.params, name), getattr(b.params, name))

    def test_input_is_not_mutated(self):
        before = self.params.copy()
        train_gru(self.params, self.inputs, self.targets, TrainConfig(learning_rate=0.1, epochs=2, seed=0))
        for name in GruParameters.NAMES:
            np.testing.assert_array_equal(getattr(self.params, name), getattr(before, name))

    def test_divergence_is_reported(self):
        blown = self.params.copy()
        blown.w_o[...] = 1e200
        with self.assertRaisesRegex(ModelError, "epoch 1"):
            train_gru(blown, self.inputs, self.targets, TrainConfig(learning_rate=0.1, epochs=3, seed=0))

    def test_saliency_concentrates_on_latest_step(self):
        print("\n Testing saliency on a planted last-step problem ")
        config = TrainConfig(learning_rate=0.1, epochs=300, dropout_rate=0.0, batch_size=8, seed=1)
        trained = train_gru(self.params, self.inputs, self.targets, config).params
        mass = np.zeros(4)
        for seq in self.inputs[:16]:
            mass += saliency(trained, seq, 0).values[:, 0]
        print(mass)
        self.assertEqual(int(np.argmax(mass)), 3)


class TestSaliency(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(29)
        self.params = init_gru(3, 4, 2, seed=5)
        self.seq = rng.normal(size=(5, 3))

    def test_matches_finite_differences(self):
        print("\n Testing saliency against finite differences ")
        maps = saliency_maps(self.params, self.seq)
        self.assertEqual(maps.shape, (2, 5, 3))
        for k in range(2):
            for index in np.ndindex(self.seq.shape):
                plus, minus = self.seq.copy(), self.seq.copy()
                plus[index] += EPS
                minus[index] -= EPS
                n = abs(gru_forward(self.params, plus).output[k] - gru_forward(self.params, minus).output[k]) / (2 * EPS)
                self.assertTrue(close(maps[k][index], n), f"output {k} at {index}")

    def test_zero_weights_give_zero_map(self):
        zero = GruParameters(**{name: np.zeros_like(arr) for name, arr in self.params.arrays().items()})
        np.testing.assert_array_equal(saliency_maps(zero, self.seq), np.zeros((2, 5, 3)))

    def test_labels(self):
        attribution = saliency(self.params, self.seq, 1, "loc01", 2, True, ("epi:a", "epi:b", "query:q"))
        self.assertEqual(attribution.values.shape, (5, 3))
        self.assertEqual(attribution.row_labels[-1], "step5")
        self.assertEqual(attribution.name, "GRU_q_h2_loc01")
        self.assertTrue((attribution.values >= 0).all())
        with self.assertRaises(IndexError):
            saliency(self.params, self.seq, 2)

    def test_precomputed_maps(self):
        maps = saliency_maps(self.params, self.seq)
        for k in range(2):
            reused = saliency(self.params, self.seq, k, maps=maps)
            np.testing.assert_array_equal(reused.values, saliency(self.params, self.seq, k).values)
            np.testing.assert_array_equal(reused.values, maps[k])


class TestCheckpoint(unittest.TestCase):
    def test_round_trip_is_exact(self):
        print("\n Testing checkpoint round trip ")
        params = init_gru(3, 4, 2, seed=6)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(params, Path(tmp) / "sub" / "gru.json", 6, horizon=4, retrain="full")
            loaded, seed = load_checkpoint(path)
        self.assertEqual(seed, 6)
        for name in GruParameters.NAMES:
            np.testing.assert_array_equal(getattr(loaded, name), getattr(params, name))


if __name__ == "__main__":
    unittest.main()
