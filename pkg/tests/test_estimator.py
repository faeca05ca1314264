import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from odformer.data import RegionGraph, generate_synthetic, log_normalize
from odformer.estimator import LogNormalizer, NeighborImputer, ODformerForecaster, OutlierClipper, PeriodicityExtractor
from odformer.exceptions import LengthError, ShapeError


def test_get_params_and_clone():
    est = ODformerForecaster(alpha=0.25, max_epochs=3)
    p = est.get_params()
    assert p["alpha"] == 0.25 and p["max_epochs"] == 3 and p["learning_rate"] == 1e-4
    c = clone(est).set_params(alpha=0.75)
    assert c.alpha == 0.75 and est.alpha == 0.25


def test_clipper():
    x = np.arange(100.0).reshape(100, 1, 1)
    x[3, 0, 0] = np.nan
    clip = OutlierClipper(50).fit(x)
    out = clip.transform(x)
    assert out.shape == x.shape
    assert np.nanmax(out) == clip.threshold_
    assert np.isnan(out[3, 0, 0])


def test_clipper_not_fitted():
    with pytest.raises(NotFittedError):
        OutlierClipper().transform(np.ones((2, 2, 2)))


def test_imputer():
    g = RegionGraph.ring(3)
    x = np.ones((4, 3, 3))
    x[1, 0, 0] = np.nan
    imp = NeighborImputer(g, g).fit(x)
    out = imp.transform(x)
    assert not np.isnan(out).any() and imp.imputed_cells_ == 1
    assert out[1, 0, 0, 0] == pytest.approx(1.0)


def test_log_normalizer_round_trip():
    x = np.random.default_rng(0).exponential(size=(5, 2, 2, 1))
    n = LogNormalizer().fit(x)
    np.testing.assert_allclose(n.inverse_transform(n.transform(x)), x, rtol=1e-12)
    with pytest.raises(ValueError):
        n.transform(-x)


def test_periodicity_extractor():
    s = generate_synthetic(2, 2, 96, [12], noise=0.05, seed=1)
    assert PeriodicityExtractor(max_k=1).fit(s.values).periods_ == [12]
    assert PeriodicityExtractor().fit(np.ones((40, 2, 2))).periods_ == []


def test_rank_checked():
    with pytest.raises(ShapeError):
        LogNormalizer().fit(np.ones((4, 4)))


@pytest.fixture(scope="module")
def fitted():
    s = log_normalize(generate_synthetic(2, 2, 90, [8], noise=0.1, seed=0))
    est = ODformerForecaster(input_length=16, output_length=8, d_model=8, d_ff=16, max_heads=2, d_attn=4,
                             learning_rate=3e-3, max_epochs=2, batch_size=8,
                             origin_graph=s.origin_graph, destination_graph=s.destination_graph)
    return est.fit(s.values[:70], X_val=s.values[70:]), s.values


def test_fit_predict_score(fitted):
    est, v = fitted
    assert est.n_features_in_ == 4 and len(est.history_["train_loss"]) == 2
    single = est.predict(v[40:56])
    assert single.shape == (8, 2, 2, 1)
    batch = est.predict(np.stack([v[40:56], v[50:66]]))
    np.testing.assert_allclose(batch[0], single, atol=1e-12)
    # unbatched rank-3 input gets the feature axis
    np.testing.assert_allclose(est.predict(v[40:56, ..., 0]), single, atol=1e-12)
    assert est.score(v[40:56], v[56:64]) <= 0
    assert est.periods_


def test_predict_short_history(fitted):
    est, v = fitted
    with pytest.raises(LengthError):
        est.predict(v[:5])


def test_predict_wrong_regions(fitted):
    est, _ = fitted
    with pytest.raises(ShapeError):
        est.predict(np.zeros((16, 3, 3, 1)))


def test_checkpoint_round_trip(fitted, tmp_path):
    est, v = fitted
    est.save(tmp_path / "m.ckpt")
    back = ODformerForecaster.from_checkpoint(tmp_path / "m.ckpt")
    assert back.get_params()["d_model"] == 8
    np.testing.assert_allclose(back.predict(v[40:56]), est.predict(v[40:56]), atol=1e-12)


def test_fit_too_short():
    with pytest.raises(LengthError):
        ODformerForecaster(input_length=16, output_length=8).fit(np.ones((10, 2, 2)))
