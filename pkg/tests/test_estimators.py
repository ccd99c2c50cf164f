import numpy as np
import pytest
from sklearn.base import clone

from firecastnet import data
from firecastnet.estimators import (
    FireCastNetClassifier,
    RecurrentBaselineClassifier,
    check_grid_input,
    patch_sequences,
)


def _arrays(cube, n):
    ss = data.make_samples(cube, 6, 1, 6, data.TRAIN_YEARS)
    X = np.stack([ss.input_at(k) for k in range(n)])
    y = np.stack([ss[k].target for k in range(n)]).astype(int)
    return ss, X, y


def test_params_and_clone():
    est = FireCastNetClassifier(mesh_hidden=8, epochs=2)
    params = est.get_params()
    assert params["mesh_hidden"] == 8 and params["epochs"] == 2
    c = clone(est)
    assert c.get_params() == params and c is not est
    r = RecurrentBaselineClassifier(kind="gru").set_params(hidden=5)
    assert clone(r).hidden == 5


def test_input_validation():
    with pytest.raises(ValueError):
        check_grid_input(np.zeros((2, 6, 13, 4, 4)))
    with pytest.raises(ValueError):
        check_grid_input(np.full((1, 6, 14, 4, 4), np.nan))
    with pytest.raises(ValueError):
        FireCastNetClassifier().fit(np.zeros((2, 6, 14, 16, 32)), np.zeros((2, 16, 16)))


def test_firecastnet_classifier_fit_predict(small_cube):
    _, X, y = _arrays(small_cube, 3)
    est = FireCastNetClassifier(
        mesh_level=1, embed_channels=4, mesh_hidden=4, processor_layers=1,
        epochs=2, sgdr_cycles=(1, 1), mask=small_cube.land_mask(),
    )
    est.fit(X, y, X[:1], y[:1])
    p = est.predict_proba(X)
    assert p.shape == (3, 16, 32)
    assert np.all((p > 0) & (p < 1))
    assert set(np.unique(est.predict(X))) <= {0, 1}
    assert 0 <= est.score(X, y) <= 1
    assert len(est.history_) == 2
    with pytest.raises(ValueError):
        est.predict_proba(X[:, :5])


@pytest.mark.parametrize("kind", ["gru", "convlstm"])
def test_recurrent_classifier(small_cube, kind):
    ss, _, _ = _arrays(small_cube, 1)
    land = np.argwhere(small_cube.land_mask())[:40]
    X = patch_sequences(ss, 0, land[:, 0], land[:, 1], radius=1)
    y = np.arange(40) % 2
    if kind == "gru":
        X = X[:, :, :, 1, 1]
    est = RecurrentBaselineClassifier(kind=kind, hidden=4, kernel=3, epochs=2, batch_size=16)
    est.fit(X, y)
    proba = est.predict_proba(X)
    assert proba.shape == (40, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert 0 <= est.score(X, y) <= 1
    assert len(est.loss_curve_) == 2


def test_patch_sequences_wrap_longitude(small_cube):
    ss, _, _ = _arrays(small_cube, 1)
    x = ss.input_at(0)
    p = patch_sequences(ss, 0, [5], [0], radius=1)
    assert p.shape == (1, 6, 14, 3, 3)
    np.testing.assert_array_equal(p[0, :, :, 1, 0], x[:, :, 5, 31])
    p = patch_sequences(ss, 0, [0], [4], radius=1)
    assert np.all(p[0, :, :, 0, :] == 0)
