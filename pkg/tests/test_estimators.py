import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline

from lssl import HippoTransformer, LSSLClassifier, LSSLRegressor
from lssl.estimators import check_sequence_targets, check_sequences
from lssl.tasks import legs_memory, make_delay_task

SMALL = dict(H=4, N=8, depth=1, epochs=8, lr=2e-2, batch_size=16)


def two_class(rng, n=60, L=16):
    y = rng.choice(np.array(["down", "up"]), size=n)
    X = rng.normal(size=(n, L)) + np.where(y == "up", 1.0, -1.0)[:, None]
    return X, y


class TestValidation:
    def test_adds_feature_axis(self):
        assert check_sequences(np.zeros((2, 5))).shape == (2, 5, 1)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            check_sequences(np.array([[1.0, np.nan]]))

    def test_rejects_4d(self):
        with pytest.raises(ValueError):
            check_sequences(np.zeros((1, 2, 3, 4)))

    def test_target_shapes(self):
        X = np.zeros((3, 4, 1))
        assert check_sequence_targets(np.zeros(3), X).shape == (3,)
        with pytest.raises(ValueError):
            check_sequence_targets(np.zeros((3, 5)), X)
        with pytest.raises(ValueError):
            check_sequence_targets(np.zeros(2), X)


class TestClassifier:
    def test_params_and_clone(self):
        clf = LSSLClassifier(H=7, norm="pre")
        assert clf.get_params()["H"] == 7
        twin = clone(clf)
        assert twin.get_params() == clf.get_params() and twin is not clf

    def test_fit_predict(self, rng):
        X, y = two_class(rng)
        clf = LSSLClassifier(**SMALL).fit(X, y)
        assert list(clf.classes_) == ["down", "up"]
        assert clf.score(X, y) >= 0.9
        proba = clf.predict_proba(X)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)
        np.testing.assert_array_equal(clf.predict(X), clf.classes_[proba.argmax(axis=1)])
        assert len(clf.history_) > 0

    def test_reproducible(self, rng):
        X, y = two_class(rng, n=30)
        a = LSSLClassifier(**SMALL, random_state=3).fit(X, y).predict_proba(X)
        b = LSSLClassifier(**SMALL, random_state=3).fit(X, y).predict_proba(X)
        np.testing.assert_array_equal(a, b)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            LSSLClassifier().predict(np.zeros((1, 4)))

    def test_feature_count_checked(self, rng):
        X, y = two_class(rng, n=20)
        clf = LSSLClassifier(**SMALL).fit(X, y)
        with pytest.raises(ValueError):
            clf.predict(np.zeros((2, 16, 3)))

    def test_unpooled_rejected(self, rng):
        X, y = two_class(rng, n=10)
        with pytest.raises(ValueError):
            LSSLClassifier(pooling="none").fit(X, y)


class TestRegressor:
    def test_per_step_targets(self):
        ds = make_delay_task(32, 2, 64, seed=0)
        reg = LSSLRegressor(H=8, N=16, depth=1, epochs=15, lr=2e-2, batch_size=16).fit(ds.X, ds.y)
        assert reg.per_step_
        pred = reg.predict(ds.X)
        assert pred.shape == ds.y.shape
        assert np.mean((pred - ds.y) ** 2) < np.var(ds.y)

    def test_pooled_targets(self, rng):
        X = rng.normal(size=(40, 12))
        y = X.mean(axis=1)
        reg = LSSLRegressor(**SMALL).fit(X, y)
        assert reg.predict(X).shape == (40,) and not reg.per_step_
        assert reg.score(X, y) > 0.0

    def test_pooling_mismatch(self, rng):
        with pytest.raises(ValueError):
            LSSLRegressor(pooling="mean").fit(rng.normal(size=(4, 6)), rng.normal(size=(4, 6)))


class TestHippoTransformer:
    def test_matches_memory(self, rng):
        X = rng.normal(size=(3, 40, 2))
        Z = HippoTransformer(N=5).fit_transform(X)
        assert Z.shape == (3, 10)
        np.testing.assert_allclose(Z[1, 5:], legs_memory(X[1, :, 1], 5), atol=1e-13)

    def test_pipeline(self, rng):
        n, L = 80, 50
        y = rng.integers(0, 2, size=n)
        X = rng.normal(size=(n, L))
        X[y == 1, :10] += 2.0  # class signal early in the sequence
        pipe = make_pipeline(HippoTransformer(N=16), LogisticRegression(max_iter=1000)).fit(X, y)
        assert pipe.score(X, y) >= 0.9

    def test_bad_order(self):
        with pytest.raises(ValueError):
            HippoTransformer(N=0).fit(np.zeros((1, 4)))

    def test_feature_count_checked(self):
        tr = HippoTransformer(N=3).fit(np.zeros((2, 5)))
        with pytest.raises(ValueError):
            tr.transform(np.zeros((2, 5, 2)))
