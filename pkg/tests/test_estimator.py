import copy

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from afire_mind.afire import ResponseSequence, TokenSequence, make_windows
from afire_mind.errors import InvalidShape, UnknownSubject
from afire_mind.estimator import MINDRegressor, purge_overlaps
from afire_mind.synthgen import generate

FAST = dict(n_experts=3, top_k=2, win=20, stride=10, epochs=3, random_state=0)


@pytest.fixture(scope="module")
def data():
    ds = generate(d=4, o=3, n_experts=3, n_subjects=2, n_episodes=2, n_tr=80, seed=0)
    return ds.arrays()


@pytest.fixture(scope="module")
def fitted(data):
    X, Y, S, E = data
    return MINDRegressor(**FAST).fit(X, Y, S, E)


def test_get_params_and_clone():
    est = MINDRegressor(**FAST)
    assert est.get_params()["n_experts"] == 3
    c = clone(est).set_params(top_k=1)
    assert c.top_k == 1 and est.top_k == 2


def test_not_fitted():
    with pytest.raises(NotFittedError):
        MINDRegressor().predict(np.zeros((5, 2)))


def test_fit_predict_shapes(fitted, data):
    X, Y, S, _ = data
    preds = fitted.predict(X, S)
    assert [p.shape for p in preds] == [y.shape for y in Y]
    single = fitted.predict(X[0], S[0])
    np.testing.assert_array_equal(single, preds[0])
    assert len(fitted.history_) == 3
    for rec in fitted.history_:
        assert rec["expert_calls_min"] == rec["expert_calls_max"] == 2


def test_route_sparsity(fitted, data):
    X, _, S, _ = data
    W = fitted.route(X[0], S[0])
    assert W.shape == (80, 3)
    assert np.all(np.count_nonzero(W, axis=1) <= 2)
    np.testing.assert_allclose(W.sum(1), 1.0, atol=1e-12)


def test_unknown_subject(fitted, data):
    with pytest.raises(UnknownSubject):
        fitted.predict(data[0][0], 5)


def test_evaluate_and_score(fitted, data):
    X, Y, S, E = data
    rep = fitted.evaluate(X, Y, S, E)
    assert set(rep.subject_means) == {0, 1}
    assert fitted.score(X, Y, S) == pytest.approx(rep.global_means["r"])


def test_fit_is_deterministic(data):
    X, Y, S, E = data
    a = MINDRegressor(**FAST).fit(X, Y, S, E)
    b = MINDRegressor(**FAST).fit(X, Y, S, E)
    for key in a.net_.store:
        np.testing.assert_array_equal(a.net_.store[key], b.net_.store[key])


def test_input_validation():
    with pytest.raises(InvalidShape):
        MINDRegressor(**FAST).fit([np.zeros((30, 2))], [np.zeros((29, 1))])
    with pytest.raises(ValueError):
        MINDRegressor(**FAST).fit([np.full((30, 2), np.nan)], [np.zeros((30, 1))])


def test_purge_overlaps():
    Z = np.zeros((50, 1))
    ws = make_windows(TokenSequence("e", 0, Z), ResponseSequence("e", 0, Z), 20, 10)
    val = [ws[1]]  # covers TRs 10..29
    train = purge_overlaps([w for w in ws if w is not ws[1]], val)
    assert [w.start for w in train] == [30]


def test_split_keeps_val_windows_out_of_train(data):
    X, Y, S, E = data
    train, val = MINDRegressor(**FAST).split(X, Y, S, E)
    for t in train:
        for v in val:
            if (t.subject_id, t.episode_id) == (v.subject_id, v.episode_id):
                assert t.start + 20 <= v.start or v.start + 20 <= t.start


def test_fallback_subject(fitted):
    est = copy.deepcopy(fitted)
    rp = est.net_.router
    e1 = rp.e_subj[1].copy()
    est.set_fallback_subject(0, [1])
    np.testing.assert_array_equal(rp.e_subj[0], e1)
    assert not rp.B[0].any()
