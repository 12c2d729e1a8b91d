import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cplab.data import CorpusConfig, generate_corpus
from cplab.estimator import PseudoLabelCTC
from cplab.validation import check_sequences, check_transcripts

FAST = dict(conv_channels=12, hidden_dims=(12,), C=4, K=60, max_steps=90, batch_size=4,
            warmup_steps=20)


@pytest.fixture(scope="module")
def data():
    c = generate_corpus(CorpusConfig(n_labeled=16, n_unlabeled=32, n_dev=16, n_test=4))
    lab, unl, dev = c.split("labeled"), c.split("unlabeled"), c.split("dev")
    X = [u.features for u in lab + unl]
    y = [u.golden for u in lab] + [None] * len(unl)
    return X, y, [u.features for u in dev], [u.golden for u in dev]


def test_params_round_trip():
    est = PseudoLabelCTC(C=8, lam=3.0)
    params = est.get_params()
    assert params["C"] == 8 and params["lam"] == 3.0
    assert clone(est).get_params() == params
    est.set_params(M=5)
    assert est.M == 5


def test_fit_predict_score(data):
    X, y, Xd, yd = data
    est = PseudoLabelCTC(n_tokens=8, **FAST).fit(X, y)
    assert est.n_features_in_ == 16 and est.n_tokens_ == 8 and est.blank_ == 8
    assert est.n_labeled_ == 16 and est.n_unlabeled_ == 32
    assert est.status_ in ("OK", "DV") and len(est.records_) == est.state_.step
    preds = est.predict(Xd)
    assert len(preds) == len(Xd) and all(all(0 <= t < 8 for t in p) for p in preds)
    s = est.score(Xd, yd)
    assert s <= 1.0
    post = est.transform(Xd[:2])
    assert post[0].shape[1] == 9 and np.allclose(post[0].sum(1), 1)


def test_fit_is_reproducible(data):
    X, y, Xd, _ = data
    a = PseudoLabelCTC(random_state=4, **FAST).fit(X, y)
    b = PseudoLabelCTC(random_state=4, **FAST).fit(X, y)
    assert np.array_equal(a.state_.theta, b.state_.theta)
    assert a.predict(Xd) == b.predict(Xd)


def test_all_labeled_is_supervised(data):
    X, y, _, _ = data
    est = PseudoLabelCTC(**FAST).fit(X[:16], y[:16])
    assert all(r.phase == "pt" for r in est.records_)
    assert est.n_tokens_ == max(max(t) for t in y[:16]) + 1


def test_not_fitted():
    with pytest.raises(NotFittedError):
        PseudoLabelCTC().predict([np.zeros((20, 16))])


def test_input_validation(data):
    X, y, _, _ = data
    est = PseudoLabelCTC(**FAST)
    with pytest.raises(ValueError):
        est.fit(X, y[:-1])
    with pytest.raises(ValueError):
        est.fit(X, [None] * len(X))
    with pytest.raises(ValueError):
        est.fit([np.zeros((3, 16))], [[1]])
    with pytest.raises(ValueError):
        PseudoLabelCTC(n_tokens=2, **FAST).fit(X, y)
    bad = [x.copy() for x in X]
    bad[0][0, 0] = np.nan
    with pytest.raises(ValueError):
        est.fit(bad, y)


def test_check_sequences():
    out = check_sequences(np.zeros((3, 10, 4)))
    assert len(out) == 3 and out[0].dtype == np.float64
    with pytest.raises(ValueError):
        check_sequences([np.zeros((10, 4)), np.zeros((10, 5))])
    with pytest.raises(ValueError):
        check_sequences([np.zeros(10)])
    with pytest.raises(ValueError):
        check_sequences([])
    with pytest.raises(TypeError):
        check_sequences("abc")
    with pytest.raises(ValueError):
        check_sequences([np.zeros((10, 4))], n_features=3)


def test_check_transcripts():
    assert check_transcripts(None, 2) == [None, None]
    assert check_transcripts([[1, 2], None, np.array([3])], 3) == [[1, 2], None, [3]]
    with pytest.raises(ValueError):
        check_transcripts([[1.5]], 1)
    with pytest.raises(ValueError):
        check_transcripts([[-1]], 1)
    with pytest.raises(ValueError):
        check_transcripts([None], 1, allow_missing=False)
    with pytest.raises(ValueError):
        check_transcripts([[9]], 1, n_tokens=5)
