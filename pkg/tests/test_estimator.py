import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from flexdepth.data import SynthTaskConfig, gen_dataset
from flexdepth.estimator import (DynamicDepthCTC, check_label_sequences,
                                 check_sequences)


def toy_xy(n=24):
    cfg = SynthTaskConfig(vocab_size=5, feature_dim=6, label_len=(2, 4),
                          train_size=n, dev_size=4, test_size=10)
    splits = gen_dataset(cfg, seed=0)
    X = [u.features for u in splits["train"]]
    y = [u.labels for u in splits["train"]]
    Xt = [u.features for u in splits["test"]]
    yt = [u.labels for u in splits["test"]]
    return X, y, Xt, yt


def tiny_estimator(**kw):
    base = dict(subnet_layers=(8, 4), blocks=2, dim=8, ff_dim=16, heads=2,
                conv_kernel=3, subsample=2, total_steps=12, iterations=2,
                batch_size=3, seed=0)
    base.update(kw)
    return DynamicDepthCTC(**base)


def test_check_sequences_validation():
    with pytest.raises(ValueError, match="T, F"):
        check_sequences([np.zeros((3,))])
    with pytest.raises(ValueError, match="feature dim"):
        check_sequences([np.zeros((3, 4)), np.zeros((3, 5))])
    with pytest.raises(ValueError, match="non-finite"):
        check_sequences([np.full((2, 3), np.nan)])
    with pytest.raises(ValueError, match="at least one"):
        check_sequences([])
    out = check_sequences(np.zeros((3, 4)))
    assert len(out) == 1 and out[0].dtype == np.float64


def test_check_labels_validation():
    with pytest.raises(ValueError, match="blank"):
        check_label_sequences([[0, 1]])
    with pytest.raises(ValueError, match="label sequences"):
        check_label_sequences([[1]], n=2)
    assert check_label_sequences([[1, 2]]) == [[1, 2]]


def test_get_params_set_params_clone():
    est = tiny_estimator()
    params = est.get_params()
    assert params["subnet_layers"] == (8, 4)
    assert params["method"] == "simple_topk"
    est.set_params(layer_dropout=0.1)
    assert est.layer_dropout == 0.1
    dup = clone(est)
    assert dup.get_params() == est.get_params()


def test_predict_before_fit_raises():
    with pytest.raises(NotFittedError):
        tiny_estimator().predict([np.zeros((4, 6))])


def test_fit_predict_score():
    X, y, Xt, yt = toy_xy()
    est = tiny_estimator().fit(X, y)
    assert est.sizes_ == (8, 4)
    assert len(est.metrics_) == est.total_steps
    hyps = est.predict(Xt)
    assert len(hyps) == len(Xt)
    assert all(isinstance(h, list) for h in hyps)
    score = est.score(Xt, yt)
    assert score <= 1.0
    small = est.predict(Xt, size=4)
    assert len(small) == len(Xt)
    with pytest.raises(ValueError, match="available"):
        est.predict(Xt, size=5)


def test_parameter_count_monotone():
    X, y, _, _ = toy_xy()
    est = tiny_estimator().fit(X, y)
    full = est.parameter_count()
    assert est.parameter_count(size=8) == full
    assert est.parameter_count(size=4) < full


def test_fit_is_deterministic():
    X, y, Xt, _ = toy_xy()
    a = tiny_estimator().fit(X, y)
    b = tiny_estimator().fit(X, y)
    assert a.scores_.tobytes() == b.scores_.tobytes()
    for name, v in a.params_.items():
        assert b.params_[name].tobytes() == v.tobytes()
