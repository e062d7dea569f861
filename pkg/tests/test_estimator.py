import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ssvc import StarGANConverter
from ssvc.features import SynthConfig, synth_dataset


@pytest.fixture(scope="module")
def data():
    return synth_dataset(SynthConfig(n_domains=3, n_mcep=8, n_frames=8, train_per_domain=4, eval_per_domain=2, seed=5))


def small(**kw):
    base = dict(epochs=2, batch_size=3, steps_per_epoch=2, channels=(2, 2, 2), d_e=8, dtype="float64", random_state=3)
    base.update(kw)
    return StarGANConverter(**base)


def test_params_round_trip():
    est = small(lambda1=0.05)
    params = est.get_params()
    assert params["lambda1"] == 0.05 and params["lr_g"] == 1e-3
    assert clone(est).get_params() == params
    est.set_params(lambda2=0.2)
    assert est.lambda2 == 0.2


def test_fit_transform_score(data):
    est = small().fit(data.train.X, data.train.domains, prototypes=data.prototypes, X_val=data.eval.X, y_val=data.eval.domains)
    assert len(est.history_) == 2 and np.isfinite(est.stability_)
    y = est.transform(data.eval.X, source=data.eval.domains, target=2)
    assert y.shape == data.eval.X.shape
    assert np.array_equal(y, est.transform(data.eval.X, source=data.eval.domains, target=2))
    assert est.score(data.eval.X, data.eval.domains) < 0
    assert est.score(data.eval.X, data.eval.domains, target=1) < 0


def test_same_seed_same_model(data):
    a = small().fit(data.train.X, data.train.domains)
    b = small().fit(data.train.X, data.train.domains)
    assert a.generator_.checksum() == b.generator_.checksum()


def test_default_prototypes_are_speaker_means(data):
    est = small(epochs=1).fit(data.train.X, data.train.domains)
    np.testing.assert_allclose(est.prototypes_[1], data.train.X[data.train.domains == 2].mean(axis=0), atol=1e-6)


def test_errors(data):
    with pytest.raises(NotFittedError):
        small().transform(data.eval.X, source=1)
    with pytest.raises(ValueError):
        small().fit(data.train.X[:, :, 0], data.train.domains)
    with pytest.raises(ValueError):
        small().fit(data.train.X, data.train.domains[:-1])
    est = small(epochs=1).fit(data.train.X, data.train.domains)
    with pytest.raises(ValueError):
        est.transform(data.eval.X)
