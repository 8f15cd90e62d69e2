from dataclasses import replace

import numpy as np
import pytest
from scipy.ndimage import binary_dilation
from scipy.stats import norm
from skimage.color import lab2rgb
from skimage.draw import disk

from ki67_calib.core import rgb_to_lab
from ki67_calib.errors import EmptyTissueError
from ki67_calib.ihcch import (
    BSplit,
    IhcchConfig,
    StainMasks,
    adaptive_radius_maxima,
    detect_nuclei,
    histogram_valley,
    ihcch_pipeline,
    separate_stains,
    subtract_background,
    tissue_fraction,
    vector_median_filter,
)
from ki67_calib.metrics import MatchConfig, score_image
from ki67_calib.models import NucleusClass, RgbImage
from ki67_calib.synth import SOURCE_PRESET, gen_patch

BACKGROUND = (244, 244, 241)


def _lab_rgb(lab) -> np.ndarray:
    return np.clip(np.rint(lab2rgb(np.asarray(lab, dtype=np.float64)[None, None, :])[0, 0] * 255), 0, 255)


def _two_nuclei_patch() -> RgbImage:
    arr = np.empty((48, 48, 3), dtype=np.uint8)
    arr[...] = BACKGROUND
    arr[disk((12, 12), 4.5, shape=(48, 48))] = _lab_rgb(SOURCE_PRESET.blue_stain_lab)
    arr[disk((34, 34), 4.5, shape=(48, 48))] = _lab_rgb(SOURCE_PRESET.brown_stain_lab)
    return RgbImage(arr)


def test_vector_median_filter_keeps_constant_image(blank_patch: RgbImage) -> None:
    out = vector_median_filter(blank_patch, 3)
    assert np.array_equal(out.data, blank_patch.data)


def test_vector_median_filter_removes_isolated_outlier() -> None:
    arr = np.full((9, 9, 3), 120, dtype=np.uint8)
    arr[4, 4] = (255, 0, 0)
    out = vector_median_filter(RgbImage(arr), 3)
    assert tuple(out.data[4, 4]) == (120, 120, 120)


def test_vector_median_filter_output_comes_from_input_palette(random_patch: RgbImage) -> None:
    out = vector_median_filter(random_patch, 3)
    palette = {tuple(p) for p in random_patch.data.reshape(-1, 3)}
    assert all(tuple(p) in palette for p in out.data.reshape(-1, 3))


def test_vector_median_filter_rejects_even_window(random_patch: RgbImage) -> None:
    with pytest.raises(ValueError):
        vector_median_filter(random_patch, 4)


def test_subtract_background_marks_only_stain(blank_patch: RgbImage) -> None:
    cfg = IhcchConfig()
    assert tissue_fraction(subtract_background(rgb_to_lab(blank_patch), cfg)) == 0.0
    img = _two_nuclei_patch()
    tissue = subtract_background(rgb_to_lab(img), cfg)
    assert tissue[12, 12] and tissue[34, 34]
    assert not tissue[0, 0]


def test_histogram_valley_bimodal_and_unimodal() -> None:
    q = norm.ppf(np.linspace(0.001, 0.999, 1000))
    bimodal = np.concatenate([q * 3 - 30, q * 3 + 30])
    threshold, found = histogram_valley(bimodal)
    assert found
    assert -20 < threshold < 20
    _, found = histogram_valley(2 * norm.ppf(np.linspace(0.001, 0.999, 5000)))
    assert not found
    assert histogram_valley(np.array([])) == (0.0, False)


def test_separate_stains_masks_are_disjoint() -> None:
    img = _two_nuclei_patch()
    lab = rgb_to_lab(img)
    cfg = IhcchConfig()
    masks = separate_stains(lab, subtract_background(lab, cfg), cfg)
    assert not np.any(masks.blue_mask & masks.brown_mask)
    assert masks.blue_mask[12, 12] and masks.brown_mask[34, 34]


def test_separate_stains_fixed_zero_split() -> None:
    img = _two_nuclei_patch()
    lab = rgb_to_lab(img)
    cfg = IhcchConfig(b_split=BSplit.FIXED_ZERO)
    masks = separate_stains(lab, subtract_background(lab, cfg), cfg)
    assert masks.b_threshold_used == 0.0
    assert masks.brown_mask[34, 34]


def test_separate_stains_needs_tissue(blank_patch: RgbImage) -> None:
    lab = rgb_to_lab(blank_patch)
    cfg = IhcchConfig()
    with pytest.raises(EmptyTissueError):
        separate_stains(lab, subtract_background(lab, cfg), cfg)


def test_adaptive_radius_splits_touching_nuclei() -> None:
    mask = np.zeros((40, 40), dtype=bool)
    mask[disk((20, 14), 5.5, shape=mask.shape)] = True
    mask[disk((20, 25), 5.5, shape=mask.shape)] = True
    seeds = adaptive_radius_maxima(mask, 2.5, 12.0)
    assert len(seeds) == 2
    cols = sorted(c for _, c in seeds)
    assert abs(cols[0] - 14) <= 1 and abs(cols[1] - 25) <= 1


def test_adaptive_radius_one_seed_per_disc_and_drops_debris() -> None:
    mask = np.zeros((30, 30), dtype=bool)
    mask[disk((15, 15), 5.5, shape=mask.shape)] = True
    mask[2, 2] = True
    seeds = adaptive_radius_maxima(mask, 2.5, 12.0)
    assert len(seeds) == 1
    assert abs(seeds[0][0] - 15) <= 1 and abs(seeds[0][1] - 15) <= 1
    assert adaptive_radius_maxima(np.zeros((5, 5), dtype=bool), 2.5, 12.0) == []


def test_ihcch_pipeline_finds_both_classes() -> None:
    cs = ihcch_pipeline(_two_nuclei_patch(), IhcchConfig())
    neg = cs.points(NucleusClass.KI67_NEG)
    pos = cs.points(NucleusClass.KI67_POS)
    assert len(neg) == 1 and len(pos) == 1
    assert np.hypot(*(neg[0] - (12.5, 12.5))) <= 1.5
    assert np.hypot(*(pos[0] - (34.5, 34.5))) <= 1.5


def test_ihcch_config_validation_and_hash() -> None:
    with pytest.raises(ValueError):
        IhcchConfig(median_window=4)
    with pytest.raises(ValueError):
        IhcchConfig(min_nucleus_radius_px=5, max_nucleus_radius_px=4)
    a = IhcchConfig()
    assert a.config_hash() == IhcchConfig().config_hash()
    assert a.config_hash() != IhcchConfig(background_l_threshold=80.0).config_hash()
    assert a.to_dict()["b_split"] == "valley"


def _mean_f1(params, seeds) -> float:
    scores = []
    for seed in seeds:
        img, gt = gen_patch(params, 10.0 + 15.0 * (seed % 5), seed)
        scores.append(score_image(str(seed), ihcch_pipeline(img), gt.centroids, MatchConfig()).f1_pooled)
    return float(np.mean(scores))


def test_ihcch_recovers_planted_nuclei_without_noise() -> None:
    params = replace(SOURCE_PRESET, sensor_noise_sigma=0.0, artifact_rate=0.0)
    assert _mean_f1(params, range(50)) >= 0.90


def test_ihcch_recovers_planted_nuclei_under_sensor_noise() -> None:
    params = replace(SOURCE_PRESET, sensor_noise_sigma=4.0, artifact_rate=0.0)
    assert _mean_f1(params, range(50)) >= 0.75


def test_blue_only_image_has_no_brown_mask() -> None:
    arr = np.empty((64, 64, 3), dtype=np.uint8)
    arr[...] = BACKGROUND
    disks = np.zeros((64, 64), dtype=bool)
    for centre in ((12, 12), (12, 45), (40, 20), (50, 50)):
        disks[disk(centre, 6.5, shape=disks.shape)] = True
    arr[disks] = _lab_rgb(SOURCE_PRESET.blue_stain_lab)
    lab = rgb_to_lab(RgbImage(arr))
    cfg = IhcchConfig()
    masks = separate_stains(lab, subtract_background(lab, cfg), cfg)
    assert not masks.brown_mask.any()
    jaccard = np.count_nonzero(masks.blue_mask & disks) / np.count_nonzero(masks.blue_mask | disks)
    assert jaccard >= 0.9


def test_adding_a_disjoint_disk_never_lowers_the_count() -> None:
    rng = np.random.default_rng(11)
    cfg = IhcchConfig()
    for _ in range(25):
        blue = np.zeros((64, 64), dtype=bool)
        for _ in range(rng.integers(1, 7)):
            blue[disk(tuple(rng.integers(4, 60, size=2)), rng.uniform(3.0, 8.0), shape=blue.shape)] = True
        brown = np.zeros_like(blue)
        before = len(detect_nuclei(StainMasks(blue, brown, 0.0), cfg))

        # place a new disk that does not touch the existing components
        near = binary_dilation(blue, iterations=2)
        for _ in range(50):
            extra = np.zeros_like(blue)
            extra[disk(tuple(rng.integers(4, 60, size=2)), rng.uniform(3.0, 8.0), shape=blue.shape)] = True
            if not (extra & near).any():
                after = len(detect_nuclei(StainMasks(blue | extra, brown, 0.0), cfg))
                assert after >= before
                break
