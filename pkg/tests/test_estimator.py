import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dualseg.estimator import DualInputSegmenter, check_images, check_masks, stack_inputs


@pytest.fixture(scope="module")
def xy(small_splits):
    pairs = [p for v in small_splits["train"].values() for p in v][:6]
    X = stack_inputs(np.stack([p.real_rgb for p in pairs]), np.stack([p.sim_mask for p in pairs]))
    y = np.stack([p.gt_mask for p in pairs])
    return X, y


@pytest.fixture(scope="module")
def fitted(xy):
    X, y = xy
    return DualInputSegmenter(width_factor=0.0625, max_steps=3, val_every=1, batch_size=2).fit(X, y)


def test_params_round_trip_through_clone():
    est = DualInputSegmenter(width_factor=0.0625, lr=0.01)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(max_steps=7).max_steps == 7


def test_stack_inputs_layout(xy):
    X, _ = xy
    assert X.shape == (6, 64, 96, 4) and X.dtype == np.uint8
    assert set(np.unique(X[..., 3])) <= {0, 255}


@pytest.mark.parametrize("shape", [(2, 64, 96, 3), (64, 96, 4), (2, 60, 96, 4), (0, 64, 96, 4)])
def test_check_images_rejects_bad_shapes(shape):
    with pytest.raises(ValueError):
        check_images(np.zeros(shape))


def test_check_images_rejects_out_of_range():
    with pytest.raises(ValueError):
        check_images(np.full((1, 32, 32, 4), 300.0))


def test_check_masks_normalizes_and_validates():
    y = np.array([[[0, 1], [1, 0]]])
    np.testing.assert_array_equal(check_masks(y, 1, (2, 2)), y * 255)
    with pytest.raises(ValueError):
        check_masks(np.full((1, 2, 2), 7), 1, (2, 2))
    with pytest.raises(ValueError):
        check_masks(y, 2, (2, 2))


def test_unfitted_predict_raises(xy):
    with pytest.raises(NotFittedError):
        DualInputSegmenter().predict(xy[0])


def test_fit_predict_score(fitted, xy):
    X, y = xy
    assert fitted.n_steps_ == 3 and len(fitted.history_) == 3
    proba = fitted.predict_proba(X)
    assert proba.shape == (6, 64, 96) and 0 <= proba.min() and proba.max() <= 1
    pred = fitted.predict(X)
    assert pred.dtype == np.uint8 and set(np.unique(pred)) <= {0, 1}
    np.testing.assert_array_equal(pred, (proba >= fitted.threshold).astype(np.uint8))
    assert 0.0 <= fitted.score(X, y) <= 1.0


def test_predict_rejects_other_sizes(fitted):
    with pytest.raises(ValueError, match="fitted on"):
        fitted.predict(np.zeros((1, 32, 32, 4), np.uint8))
