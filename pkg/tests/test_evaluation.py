import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairrank.evaluation import (
    DICE_THRESHOLDS,
    ROBUSTNESS_TRANSFORMS,
    UndefinedCorrelationError,
    auc,
    binarize,
    dice,
    dice_sweep,
    evaluate,
    normalize_map,
    pearson_r,
    predicted_change,
    render_overlay,
    robustness_sweep,
    upsample,
    weighted_cam,
    write_report,
)
from pairrank.data.augment import AugmentParams


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


# -- pearson ---------------------------------------------------------------------
def test_pearson_examples():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert pearson_r(x, 2 * x + 1) == 1.0
    assert pearson_r(x, -x) == -1.0
    assert abs(pearson_r(x, [1.0, 3.0, 2.0, 4.0]) - 0.8) < 1e-12


def test_pearson_undefined():
    with pytest.raises(UndefinedCorrelationError):
        pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(UndefinedCorrelationError):
        pearson_r([1.0], [2.0])
    with pytest.raises(ValueError):
        pearson_r([1.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=50)
@given(seed=st.integers(0, 10**6), a=st.floats(0.01, 100), b=st.floats(-100, 100))
def test_pearson_affine_invariance(seed, a, b):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal(20), r.standard_normal(20)
    assert abs(pearson_r(a * x + b, y) - pearson_r(x, y)) < 1e-12


# -- auc -------------------------------------------------------------------------------
def test_auc_examples():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc([0.1, 0.2, 0.9, 0.95], [0, 0, 1, 1]) == 1.0
    assert auc([3.0] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    labels = np.array([1, 0, 0, 1, 1])
    assert auc(labels.astype(float), labels) == 1.0


def test_auc_errors_and_exclusion():
    with pytest.raises(ValueError, match="both"):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError, match="both"):
        auc([0.1, 0.2, 0.3], [1, 0, 1], exclude=[False, True, False])
    assert auc([0.9, 0.1, 0.5], [1, 0, 0], exclude=[False, False, True]) == 1.0


@settings(max_examples=150)
@given(data=st.data(), n=st.integers(2, 200))
def test_auc_equals_brute_force(data, n):
    scores = data.draw(st.lists(st.sampled_from([-1.0, 0.0, 0.25, 0.5, 2.0]) | st.floats(-5, 5), min_size=n,
                                max_size=n))
    labels = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    if len(set(labels)) < 2:
        labels[0], labels[-1] = 0, 1
    assert auc(scores, labels) == brute_auc(scores, labels)


@settings(max_examples=40)
@given(seed=st.integers(0, 10**6))
def test_auc_monotone_invariance(seed):
    r = np.random.default_rng(seed)
    s = r.standard_normal(30)
    lab = np.r_[0, 1, r.integers(0, 2, 28)]
    assert auc(s, lab) == auc(np.exp(3 * s) + 2, lab)


# -- dice -----------------------------------------------------------------------------
def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[0, :4] = True
    b = np.zeros((4, 4), bool)
    b[0, 2:] = True
    b[1, :2] = True
    assert dice(a, b) == 0.5
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError, match="shape"):
        dice(a, np.zeros((3, 3)))


@settings(max_examples=40)
@given(seed=st.integers(0, 10**6))
def test_dice_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((6, 6)) > 0.5, r.random((6, 6)) > 0.3
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


def test_binarize_and_thresholds():
    assert len(DICE_THRESHOLDS) == 7 and DICE_THRESHOLDS[0] == 0.6 and DICE_THRESHOLDS[-1] == 0.9
    assert binarize(np.array([0.5, 0.7, 0.9]), 0.7).tolist() == [False, True, True]
    with pytest.raises(ValueError):
        binarize(np.zeros(2), 1.0)


# -- maps ----------------------------------------------------------------------------------
def test_normalize_and_upsample():
    assert np.all(normalize_map(np.full((3, 3), 4.0)) == 0.0)
    m = normalize_map(np.array([[1.0, 3.0], [2.0, 5.0]]))
    assert m.min() == 0.0 and m.max() == 1.0
    up = upsample(np.array([[0.0, 1.0], [2.0, 3.0]]), (4, 4))
    assert up.shape == (4, 4) and up[0, 0] == 0.0 and up[-1, -1] == 3.0
    np.testing.assert_allclose(upsample(np.full((2, 2), 7.0), (5, 5)), 7.0)


def test_cam_zero_for_identical_pair(lite32, small_tumor):
    x = small_tumor.samples[0].image
    cam = weighted_cam(lite32, x, x)
    assert np.all(cam.weights == 0.0) and np.all(cam.raw == 0.0) and np.all(cam.normalized == 0.0)
    assert cam.normalized.shape == (32, 32)


def test_cam_weights_swap_invariant(lite32, small_tumor):
    a, b = small_tumor.samples[0].image, small_tumor.samples[1].image
    assert np.array_equal(weighted_cam(lite32, a, b).weights, weighted_cam(lite32, b, a).weights)
    m = weighted_cam(lite32, a, b).normalized
    assert m.min() == 0.0 and m.max() == 1.0


def test_predicted_change_properties(lite32, small_tumor):
    a, b = small_tumor.samples[0].image, small_tumor.samples[1].image
    for method in ("pairnet", "csr"):
        assert predicted_change(lite32, a, a, method) == 0.0
        assert predicted_change(lite32, a, b, method) == -predicted_change(lite32, b, a, method)
    with pytest.raises(ValueError):
        predicted_change(lite32, a, b, "lvae")


# -- overlays -------------------------------------------------------------------------------
def test_overlay_zero_map_is_grayscale(tmp_path, rng):
    from PIL import Image

    img = rng.uniform(0, 1, (16, 16))
    render_overlay(img, np.zeros((16, 16)), tmp_path / "o.png")
    out = np.asarray(Image.open(tmp_path / "o.png"))
    gray = np.round(img * 255).astype(np.uint8)
    assert all(np.array_equal(out[..., c], gray) for c in range(3))


def test_overlay_deterministic_and_pure_colormap(tmp_path, rng):
    from PIL import Image

    m = rng.uniform(0.01, 1, (16, 16))
    render_overlay(np.zeros((16, 16)), m, tmp_path / "a.png", alpha=1.0)
    render_overlay(np.zeros((16, 16)), m, tmp_path / "b.png", alpha=1.0)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    out = np.asarray(Image.open(tmp_path / "a.png")).astype(float) / 255
    warm = np.stack([np.clip(3 * m, 0, 1), np.clip(3 * m - 1, 0, 1), np.clip(3 * m - 2, 0, 1)], -1)
    assert np.abs(out - warm).max() <= 0.5 / 255 + 1e-9


def test_overlay_errors(tmp_path):
    with pytest.raises(OSError):
        render_overlay(np.zeros((4, 4)), np.zeros((4, 4)), tmp_path / "missing" / "x.png")
    with pytest.raises(ValueError):
        render_overlay(np.zeros((4, 4)), np.full((4, 4), 2.0), tmp_path / "x.png")


# -- dataset-level ---------------------------------------------------------------------------
def test_evaluate_report_and_files(tmp_path, lite32, small_tumor):
    rep = evaluate(lite32, small_tumor, method="pairnet", dice_thresholds=DICE_THRESHOLDS)
    assert -1 <= rep.pearson_r <= 1 and 0 <= rep.auc <= 1
    assert len(rep.dice_curve) == 7 and all(0 <= v <= 1 for _, v in rep.dice_curve)
    assert rep.n_pairs == len(rep.pairs) > 0
    assert all(p["gt_delta"] > 0 for p in rep.pairs)
    write_report(rep, tmp_path)
    assert {"report.json", "pairs.csv", "dice.csv"} <= {p.name for p in tmp_path.iterdir()}
    csr = evaluate(lite32, small_tumor, method="csr")
    assert csr.mse is not None and csr.mse >= 0


def test_dice_sweep_needs_masks(lite32, small_starmen):
    with pytest.raises(ValueError, match="mask"):
        dice_sweep(lite32, small_starmen)


def test_robustness_identity_reproduces_clean(lite32, small_tumor):
    out = robustness_sweep(lite32, small_tumor, transforms={"identity": AugmentParams()})
    assert out["identity"] == out["clean"]
    assert len(ROBUSTNESS_TRANSFORMS) == 10
