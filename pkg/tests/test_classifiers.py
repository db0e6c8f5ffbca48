import math

import numpy as np
import pytest

from patchbalance.classifiers import (
    MLPParams,
    PatchMLPClassifier,
    cross_entropy_loss,
    finite_difference_check,
    load_checkpoint,
    loss_and_grad,
    predict,
    predict_from_logits,
    save_checkpoint,
    train,
)
from patchbalance.exceptions import DataError, TrainingError


def blobs(rng, n, d, sep):
    """Two unit-variance Gaussian classes whose means differ by ``sep`` along one axis."""
    y = np.r_[np.zeros(n // 2), np.ones(n - n // 2)].astype(int)
    X = rng.normal(size=(n, d))
    X[:, 0] += sep * (y - 0.5)
    return X, y


class TestLoss:
    def test_perfect(self):
        assert cross_entropy_loss([1 - 1e-12], [1]) < 1e-11

    def test_half(self):
        assert abs(cross_entropy_loss([0.5] * 6, [0, 1, 1, 0, 1, 0]) - math.log(2)) < 1e-12

    def test_hand_batch(self):
        expected = 0.5 * (-math.log(0.9) - math.log(0.8))
        assert abs(cross_entropy_loss([0.9, 0.2], [1, 0]) - expected) < 1e-12
        assert abs(expected - 0.1643) < 1e-4


class TestPrediction:
    def test_tie_goes_to_zero(self):
        p = predict_from_logits([[2.0, 2.0]])
        np.testing.assert_allclose(p.softmax, [[0.5, 0.5]])
        assert p.labels.tolist() == [0]

    def test_softmax_arithmetic(self):
        p = predict_from_logits([[0.0, math.log(3.0)]])
        np.testing.assert_allclose(p.softmax, [[0.25, 0.75]], atol=1e-15)
        assert p.labels.tolist() == [1]

    def test_encoding_length(self, rng):
        X, y = blobs(rng, 40, 5, 2.0)
        m = train(X, y, hidden=7, batch_size=8, learning_rate=0.1, epochs=2)
        assert predict(m, X).encoding.shape == (40, 7)


class TestGradient:
    @pytest.mark.parametrize("d,h", [(1, 1), (3, 2), (8, 16), (32, 64)])
    def test_fresh_model(self, rng, d, h):
        params = MLPParams.glorot(d, h, rng)
        X = rng.normal(size=(16, d))
        y = rng.integers(0, 2, 16)
        assert finite_difference_check(params, X, y, n_params=40) < 1e-4

    def test_zero_weights(self):
        d, h = 4, 3
        params = MLPParams(np.zeros((d, h)), np.zeros(h), np.zeros((h, 2)), np.zeros(2))
        X = np.vstack([np.ones(d), -np.ones(d)])
        y = np.array([1, 0])
        _, g = loss_and_grad(params, X, y)
        step = 1e-6
        for i in range(len(params.flat())):
            bumped = params.flat()
            bumped[i] += step
            up = loss_and_grad(MLPParams.from_flat(bumped, d, h), X, y)[0]
            bumped[i] -= 2 * step
            down = loss_and_grad(MLPParams.from_flat(bumped, d, h), X, y)[0]
            assert abs((up - down) / (2 * step) - g.flat()[i]) < 1e-6

    def test_symmetric_perturbation(self, rng):
        params = MLPParams.glorot(4, 5, rng)
        X, y = rng.normal(size=(10, 4)), rng.integers(0, 2, 10)
        base = loss_and_grad(params, X, y)[0]
        for delta in (1e-3, 1e-4):
            flat = params.flat()
            flat[3] += delta
            up = loss_and_grad(MLPParams.from_flat(flat, 4, 5), X, y)[0]
            flat[3] -= 2 * delta
            down = loss_and_grad(MLPParams.from_flat(flat, 4, 5), X, y)[0]
            assert abs((up - base) + (down - base)) < 50 * delta ** 2


class TestTraining:
    def test_separable_blobs(self, rng):
        X, y = blobs(rng, 800, 8, 6.0)
        m = train(X, y, batch_size=32, learning_rate=0.1, epochs=10)
        assert m.log.accuracy[-1] >= 0.98

    def test_null_signal(self):
        accs = []
        for seed in range(5):
            r = np.random.default_rng(seed)
            X, y = blobs(r, 2000, 8, 0.0)
            Xt, yt = blobs(r, 2000, 8, 0.0)
            m = train(X, y, batch_size=32, learning_rate=0.1, epochs=10, seed=seed)
            accs.append(np.mean(predict(m, Xt).labels == yt))
        assert abs(np.mean(accs) - 0.5) <= 0.05

    def test_deterministic(self, rng):
        X, y = blobs(rng, 200, 4, 2.0)
        a = train(X, y, batch_size=16, learning_rate=0.1, epochs=3, seed=4)
        b = train(X, y, batch_size=16, learning_rate=0.1, epochs=3, seed=4)
        np.testing.assert_array_equal(a.params.flat(), b.params.flat())

    def test_single_class(self):
        with pytest.raises(TrainingError):
            train(np.zeros((4, 2)), np.zeros(4))


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        X, y = blobs(rng, 50, 3, 2.0)
        m = train(X, y, hidden=4, batch_size=10, learning_rate=0.1, epochs=1)
        save_checkpoint(m, tmp_path / "m.pbmd")
        back = load_checkpoint(tmp_path / "m.pbmd")
        np.testing.assert_array_equal(back.params.flat(), m.params.flat())

    def test_truncated(self, rng, tmp_path):
        X, y = blobs(rng, 50, 3, 2.0)
        save_checkpoint(train(X, y, hidden=4, epochs=1), tmp_path / "m.pbmd")
        raw = (tmp_path / "m.pbmd").read_bytes()
        (tmp_path / "m.pbmd").write_bytes(raw[:-8])
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "m.pbmd")


def test_estimator(rng):
    X, y = blobs(rng, 300, 4, 5.0)
    clf = PatchMLPClassifier(hidden=8, batch_size=16, learning_rate=0.1).fit(X, y)
    assert clf.score(X, y) > 0.95
    np.testing.assert_allclose(clf.predict_proba(X).sum(axis=1), 1.0)
    assert clf.transform(X).shape == (300, 8)
