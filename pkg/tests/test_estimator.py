import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from uncertainty_da import UncertaintyDomainAdapter, gen_two_moons

FAST = dict(epochs=2, n_mc_passes=3, batch_size=20, feature_layers=(16, 8))


@pytest.fixture(scope="module")
def moons():
    src = gen_two_moons(100, 0.1, seed=0)
    tgt = gen_two_moons(80, 0.1, seed=1)
    return src.features, src.labels, tgt.features @ np.array([[0.8, -0.6], [0.6, 0.8]])


@pytest.fixture(scope="module")
def fitted(moons):
    X, y, Xt = moons
    return UncertaintyDomainAdapter(**FAST).fit(X, y, Xt)


def test_params_round_trip():
    est = UncertaintyDomainAdapter(uncertainty_threshold=0.3, feature_layers=(4,))
    assert est.get_params()["uncertainty_threshold"] == 0.3
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    twin.set_params(mode="source_only")
    assert est.mode == "uncertainty_full"


def test_outputs(fitted, moons):
    X, y, Xt = moons
    proba = fitted.predict_proba(Xt)
    assert proba.shape == (80, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert set(fitted.predict(Xt)) <= {0, 1}
    u = fitted.predict_uncertainty(Xt)
    assert u.shape == (80,) and ((u >= 0) & (u <= 1)).all()
    assert fitted.transform(X).shape == (100, 8)
    assert 0 <= fitted.score(X, y) <= 1


def test_string_labels(moons):
    X, y, _ = moons
    names = np.array(["cat", "dog"])[y]
    est = UncertaintyDomainAdapter(mode="source_only", **FAST).fit(X, names)
    assert set(est.predict(X)) <= {"cat", "dog"}
    assert list(est.classes_) == ["cat", "dog"]


def test_needs_target(moons):
    X, y, _ = moons
    with pytest.raises(ValueError, match="X_target"):
        UncertaintyDomainAdapter(**FAST).fit(X, y)


def test_width_checks(fitted, moons):
    X, y, _ = moons
    with pytest.raises(ValueError):
        fitted.predict(np.ones((3, 5)))
    with pytest.raises(ValueError):
        UncertaintyDomainAdapter(**FAST).fit(X, y, np.ones((4, 3)))


def test_rejects_nan(moons):
    X, y, Xt = moons
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        UncertaintyDomainAdapter(**FAST).fit(bad, y, Xt)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        UncertaintyDomainAdapter().predict(np.ones((2, 2)))


def test_deterministic(moons, fitted):
    X, y, Xt = moons
    again = UncertaintyDomainAdapter(**FAST).fit(X, y, Xt)
    np.testing.assert_array_equal(again.predict_proba(Xt), fitted.predict_proba(Xt))


def test_variance_metric(moons):
    X, y, Xt = moons
    est = UncertaintyDomainAdapter(uncertainty_metric="variance", **FAST).fit(X, y, Xt)
    assert est.bundle_.uncertainty_dim == 2
    assert (est.predict_uncertainty(Xt) >= 0).all()


def test_save_load(fitted, moons, tmp_path):
    _, _, Xt = moons
    fitted.save(tmp_path / "m.ckpt")
    back = UncertaintyDomainAdapter.load(tmp_path / "m.ckpt")
    assert back.get_params() == fitted.get_params()
    np.testing.assert_array_equal(back.predict_proba(Xt), fitted.predict_proba(Xt))


def test_epoch_callback(moons):
    X, y, Xt = moons
    seen = []
    UncertaintyDomainAdapter(**FAST).fit(X, y, Xt, epoch_callback=lambda e, r: seen.append((e, len(r))))
    assert seen == [(0, 5), (1, 5)]
