import math

import numpy as np
import pytest

from smallnet import netcore as nc
from smallnet import trainer
from smallnet.dataio import LabeledImageSet
from smallnet.trainer import AdamState, TrainConfig

from .gradcheck import numeric_gradient, relative_errors


def synthetic_set(n, seed=0):
    """Digit-like blobs: class c lights a different 7x7 patch."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n).astype(np.uint8)
    images = (rng.random((n, 28, 28)) * 40).astype(np.uint8)
    for k, c in enumerate(labels):
        r, col = divmod(int(c), 4)
        images[k, 7 * r:7 * r + 7, 7 * col:7 * col + 7] = 230
    return LabeledImageSet(images, labels)


class TestInit:
    def test_deterministic(self):
        assert np.array_equal(trainer.init_params(5).to_vector(), trainer.init_params(5).to_vector())

    def test_zero_biases(self):
        p = trainer.init_params(2)
        assert p.conv1.bias == 0 and p.conv2.bias == 0 and not p.dense.biases.any()

    def test_glorot_bounds(self):
        p = trainer.init_params(3)
        bound = math.sqrt(6 / 8)
        assert np.all(np.abs(p.conv1.kernel) <= bound) and np.all(np.abs(p.conv2.kernel) <= bound)
        assert np.all(np.abs(p.dense.weights) <= math.sqrt(6 / 59))


class TestLoss:
    def test_half_at_target(self):
        s = np.full(10, 0.2)
        s[4] = 0.5
        assert trainer.cross_entropy_loss(s, np.eye(10)[4]) == pytest.approx(math.log(2), abs=1e-12)

    def test_clipped_one(self):
        s = np.zeros(10)
        s[2] = 1.0
        assert trainer.cross_entropy_loss(s, np.eye(10)[2]) == pytest.approx(1e-7, rel=1e-3)

    def test_random_against_direct_sum(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            s = rng.uniform(0.01, 0.99, 10)
            y = int(rng.integers(10))
            t = np.eye(10)[y]
            direct = -sum(t[i] * math.log(s[i]) for i in range(10))
            assert trainer.cross_entropy_loss(s, t) == pytest.approx(direct, abs=1e-12)
            normed = -math.log(s[y] / sum(s))
            assert trainer.cross_entropy_loss(s, t, normalize=True) == pytest.approx(normed, abs=1e-12)

    def test_bounds(self):
        rng = np.random.default_rng(1)
        s = rng.random((500, 10))
        t = np.eye(10)[rng.integers(0, 10, 500)]
        losses = trainer.cross_entropy_loss(s, t)
        assert np.all(losses >= 0) and np.all(losses <= 10 * -math.log(1e-7))


class TestBackward:
    @pytest.mark.parametrize("normalize", [True, False])
    def test_matches_finite_differences(self, normalize):
        rng = np.random.default_rng(11)
        params = trainer.init_params(21)
        image = rng.random((28, 28))
        label = 6
        _, grads = trainer.backward(image, np.eye(10)[label], params, normalize)
        numeric = numeric_gradient(params, image, label, normalize)
        assert relative_errors(grads.to_vector(), numeric).max() <= 1e-4

    def test_stationary_point_has_zero_slope(self):
        # zero dense weights make the scores independent of both conv layers
        params = nc.NetworkParams.zeros()
        image = np.random.default_rng(2).random((28, 28))
        numeric = numeric_gradient(params, image, 3, normalize=True)
        assert np.allclose(numeric[:10], 0.0, atol=1e-10)
        _, grads = trainer.backward(image, np.eye(10)[3], params)
        assert np.allclose(grads.to_vector()[:10], 0.0, atol=1e-12)

    def test_duplicate_images_same_gradient(self):
        params = trainer.init_params(1)
        img = np.random.default_rng(3).random((28, 28))
        _, g1 = trainer.batch_gradient(img[None], [2], params)
        _, g2 = trainer.batch_gradient(np.stack([img, img]), [2, 2], params)
        np.testing.assert_allclose(g1.to_vector(), g2.to_vector(), rtol=1e-12, atol=1e-15)

    def test_batch_gradient_is_mean(self):
        params = trainer.init_params(4)
        imgs = np.random.default_rng(4).random((3, 28, 28))
        labels = [1, 5, 9]
        _, gb = trainer.batch_gradient(imgs, labels, params)
        singles = [trainer.batch_gradient(imgs[i:i + 1], labels[i:i + 1], params)[1].to_vector() for i in range(3)]
        np.testing.assert_allclose(gb.to_vector(), np.mean(singles, axis=0), rtol=1e-10, atol=1e-15)


class TestAdam:
    cfg = TrainConfig()

    def test_zero_gradient(self):
        p = trainer.init_params(0)
        new, state = trainer.adam_step(p, nc.NetworkParams.zeros(), AdamState(), self.cfg)
        assert np.array_equal(new.to_vector(), p.to_vector()) and state.t == 1

    def test_single_step(self):
        p = nc.NetworkParams.zeros()
        g = nc.NetworkParams.from_vector(np.ones(510))
        new, state = trainer.adam_step(p, g, AdamState(), self.cfg)
        # t=1: m_hat = g, v_hat = g^2, step = lr * 1 / (1 + eps)
        assert new.to_vector()[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
        assert state.m[0] == pytest.approx(0.1) and state.v[0] == pytest.approx(0.001)

    def test_constant_gradient_steady_state(self):
        p = nc.NetworkParams.zeros()
        g = nc.NetworkParams.from_vector(np.full(510, -3.0))
        state = AdamState()
        for _ in range(2000):
            prev = p.to_vector()
            p, state = trainer.adam_step(p, g, state, self.cfg)
        step = p.to_vector() - prev
        np.testing.assert_allclose(step, 0.001, rtol=1e-6)


class TestTrain:
    def test_loss_drops_in_first_epoch(self):
        data = synthetic_set(1000)
        _, history = trainer.train(data, TrainConfig(epochs=1, holdout=100, seed=3))
        assert history[1].loss < history[0].loss

    def test_deterministic(self):
        data = synthetic_set(300)
        cfg = TrainConfig(epochs=2, holdout=50, seed=7)
        p1, h1 = trainer.train(data, cfg)
        p2, h2 = trainer.train(data, cfg)
        assert np.array_equal(p1.to_vector(), p2.to_vector())
        assert [r.loss for r in h1] == [r.loss for r in h2]

    def test_batch_one_equals_sequential_updates(self):
        data = synthetic_set(20, seed=1)
        cfg = TrainConfig(epochs=1, batch_size=1, holdout=0, seed=9)
        trained, _ = trainer.train(data, cfg)

        init_seq, shuffle_seq = np.random.SeedSequence(9).spawn(2)
        params = trainer.init_params(int(init_seq.generate_state(1)[0]))
        order = np.random.default_rng(shuffle_seq).permutation(20)
        state = AdamState()
        x = data.normalized()
        for i in order:
            _, g = trainer.backward(x[i], np.eye(10)[data.labels[i]], params)
            params, state = trainer.adam_step(params, g, state, cfg)
        assert np.array_equal(trained.to_vector(), params.to_vector())

    def test_learns_synthetic_classes(self):
        data = synthetic_set(3000, seed=2)
        params, history = trainer.train(data, TrainConfig(epochs=4, holdout=500, seed=0, learning_rate=0.01))
        assert history[-1].val_accuracy > 0.6

    def test_empty_rejected(self):
        empty = LabeledImageSet(np.zeros((0, 28, 28), np.uint8), np.zeros(0, np.uint8))
        with pytest.raises(ValueError):
            trainer.train(empty, TrainConfig())
        with pytest.raises(ValueError):
            trainer.evaluate(trainer.init_params(0), empty)

    @pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"batch_size": 0}, {"learning_rate": 0.0}])
    def test_bad_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestEvaluate:
    def test_always_class_zero(self):
        data = LabeledImageSet(np.zeros((20, 28, 28), np.uint8), np.zeros(20, np.uint8))
        assert trainer.evaluate(nc.NetworkParams.zeros(), data) == 1.0

    def test_random_params_near_chance(self, mnist_dir):
        data = LabeledImageSet.load(mnist_dir / "t10k-images-idx3-ubyte",
                                    mnist_dir / "t10k-labels-idx1-ubyte").subset(0, 1000)
        accs = [trainer.evaluate(trainer.init_params(s), data) for s in range(5)]
        assert abs(np.mean(accs) - 0.1) <= 0.05

    def test_permutation_invariant(self):
        data = synthetic_set(200, seed=4)
        params = trainer.init_params(6)
        perm = np.random.default_rng(0).permutation(200)
        shuffled = LabeledImageSet(data.images[perm], data.labels[perm])
        assert trainer.evaluate(params, data) == trainer.evaluate(params, shuffled)
