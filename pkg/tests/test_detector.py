from pathlib import Path

import numpy as np
import pytest

from ki67_calib import storage
from ki67_calib.detector import (
    ARCHITECTURE,
    FEATURE_CHANNELS,
    PARAMETER_COUNT,
    MiniDetector,
    conv2d,
    forward,
    load_checkpoint,
    normalize_input,
    pooled_features,
    predict,
    save_checkpoint,
)
from ki67_calib.models import RgbImage
from ki67_calib.training import huber_loss


def _masks(model: MiniDetector, x: np.ndarray):
    _, cache = model.forward_batch(x)
    return [z > 0.0 for z in cache.preactivations[:-1]]


def _loss(model: MiniDetector, x: np.ndarray, target: np.ndarray) -> float:
    pred, _ = model.forward_batch(x)
    return huber_loss(pred, target)[0]


def test_parameter_count() -> None:
    model = MiniDetector.initialize(0)
    assert model.parameter_count == PARAMETER_COUNT
    assert MiniDetector.zeros().parameter_count == PARAMETER_COUNT


def test_rejects_wrong_weight_shapes() -> None:
    weights = MiniDetector.zeros().weights
    weights[0] = np.zeros((8, 3, 5, 5))
    with pytest.raises(ValueError):
        MiniDetector(weights)


def test_forward_shapes_and_range(random_patch: RgbImage) -> None:
    hm, feats = forward(MiniDetector.initialize(1), random_patch)
    assert hm.neg_channel.shape == (16, 16)
    assert feats.shape == (16, 16, FEATURE_CHANNELS)
    stacked = hm.stacked()
    assert np.all((stacked > 0.0) & (stacked < 1.0))
    assert pooled_features(MiniDetector.initialize(1), random_patch).shape == (FEATURE_CHANNELS,)


def test_zero_model_predicts_one_half(random_patch: RgbImage) -> None:
    hm, _ = forward(MiniDetector.zeros(), random_patch)
    assert np.allclose(hm.stacked(), 0.5)


def test_conv2d_one_by_one_is_a_matmul() -> None:
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 6, 3))
    w = rng.normal(size=(4, 3, 1, 1))
    b = rng.normal(size=4)
    assert np.allclose(conv2d(x, w, b), x @ w[:, :, 0, 0].T + b)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed: int) -> None:
    rng = np.random.default_rng(seed)
    model = MiniDetector.initialize(seed)
    x = normalize_input(RgbImage(rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)))[None]
    target = rng.uniform(0.0, 1.0, size=(1, 16, 16, 2))

    pred, cache = model.forward_batch(x)
    _, dpred = huber_loss(pred, target)
    grads = model.backward(cache, dpred)
    base_masks = _masks(model, x)

    eps = 1e-4
    attempted = checked = 0
    for ti, tensor in enumerate(model.weights):
        for flat in rng.choice(tensor.size, size=min(6, tensor.size), replace=False):
            idx = np.unravel_index(flat, tensor.shape)
            plus, minus = model.copy(), model.copy()
            plus.weights[ti][idx] += eps
            minus.weights[ti][idx] -= eps
            attempted += 1
            # a ReLU switching inside the step makes the difference meaningless
            if any(not np.array_equal(a, b) for m in (plus, minus) for a, b in zip(_masks(m, x), base_masks)):
                continue
            numeric = (_loss(plus, x, target) - _loss(minus, x, target)) / (2 * eps)
            assert grads[ti][idx] == pytest.approx(numeric, rel=1e-4, abs=1e-9)
            checked += 1
    assert checked >= attempted * 3 // 4


def test_tiled_prediction_equals_whole_image() -> None:
    rng = np.random.default_rng(4)
    img = RgbImage(rng.integers(0, 256, size=(37, 29, 3), dtype=np.uint8))
    model = MiniDetector.initialize(3)
    whole = predict(model, img, tile=512).stacked()
    for tile in (5, 8, 16):
        assert np.allclose(predict(model, img, tile=tile).stacked(), whole, rtol=0.0, atol=1e-12)
    with pytest.raises(ValueError):
        predict(model, img, tile=0)


def test_checkpoint_round_trip(tmp_path: Path) -> None:
    model = MiniDetector.initialize(9)
    path = save_checkpoint(tmp_path / "m.ckpt", model, seed=9, regime="gs", parent_sha256="ab" * 32)
    loaded, header = load_checkpoint(path)
    assert header["architecture"] == ARCHITECTURE
    assert (header["seed"], header["regime"], header["parent_sha256"]) == (9, "gs", "ab" * 32)
    for a, b in zip(model.weights, loaded.weights):
        assert np.array_equal(a.astype(np.float32).astype(np.float64), b)


def test_checkpoint_rejects_other_architecture_and_garbage(tmp_path: Path) -> None:
    model = MiniDetector.zeros()
    other = storage.write_checkpoint(tmp_path / "other.ckpt", model.weights, {"architecture": "resnet"})
    with pytest.raises(ValueError):
        load_checkpoint(other)
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(junk)
