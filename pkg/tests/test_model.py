import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairrank.model import (
    CHECKPOINT_MAGIC,
    PRESETS,
    BackboneConfig,
    csr_change,
    csr_predict,
    feature_extract,
    features,
    freeze_backbone,
    init_weights,
    load_checkpoint,
    parameter_vector,
    rank_prob,
    rank_score,
    save_checkpoint,
    score_from_features,
    sigmoid_value,
)

TINY = BackboneConfig.preset("tiny")


def images(seed, n=3, cfg=TINY):
    return np.random.default_rng(seed).uniform(0, 1, (n, cfg.input_channels, cfg.input_size, cfg.input_size))


def test_presets_feature_dims():
    assert BackboneConfig.preset("lite").feature_dim == 64
    assert BackboneConfig.preset("resnet18-like").feature_dim == 512
    assert BackboneConfig.preset("lite").final_map_size == 8
    assert set(PRESETS) >= {"lite", "resnet18-like"}


def test_unknown_preset_and_bad_config():
    with pytest.raises(ValueError, match="preset"):
        BackboneConfig.preset("huge")
    with pytest.raises(ValueError):
        BackboneConfig(stage_widths=(4, 8), blocks_per_stage=(1,), stage_strides=(2, 2))


def test_lite_param_count():
    m = init_weights(BackboneConfig.preset("lite"), seed=0)
    assert parameter_vector(m, m.backbone_names() + ["rank.w"]).size == 174737 - 65


def test_same_seed_same_init():
    a, b = init_weights(TINY, seed=3), init_weights(TINY, seed=3)
    assert a.same_as(b)
    assert not a.same_as(init_weights(TINY, seed=4))


def test_feature_extract_pooling_identity_and_determinism(tiny_model):
    x = images(0, 4)
    out1, out2 = feature_extract(tiny_model, x), feature_extract(tiny_model, x)
    np.testing.assert_array_equal(out1.feature.data, out2.feature.data)
    assert out1.feature.shape == (4, TINY.feature_dim)
    assert out1.activations.shape[:2] == (4, TINY.feature_dim)
    np.testing.assert_allclose(out1.feature.data, out1.activations.data.mean(axis=(2, 3)), atol=1e-15)


def test_zero_backbone_gives_zero_feature(tiny_model):
    for k in tiny_model.backbone_names():
        tiny_model.params[k].data[...] = 0.0
    f = features(tiny_model, np.zeros((1, 1, 12, 12)))
    assert np.all(f == 0.0)


def test_feature_extract_shape_error(tiny_model):
    with pytest.raises(ValueError, match="images must be"):
        feature_extract(tiny_model, np.zeros((1, 1, 13, 13)))


@settings(max_examples=30)
@given(model_seed=st.integers(0, 10**6), img_seed=st.integers(0, 10**6))
def test_ranking_properties(model_seed, img_seed):
    m = init_weights(TINY, seed=model_seed)
    a, b, c = images(img_seed)
    rab, rba = rank_score(m, a, b), rank_score(m, b, a)
    assert abs(rank_score(m, a, a)) < 1e-9
    assert abs(rab + rba) < 1e-9
    assert abs(rank_prob(m, a, b) + rank_prob(m, b, a) - 1.0) < 1e-9
    assert abs(rank_score(m, a, c) - rab - rank_score(m, b, c)) < 1e-8
    if rab >= 0 and rank_score(m, b, c) >= 0:
        assert rank_score(m, a, c) >= -1e-12


def test_identical_images_prob_half(tiny_model):
    x = images(1, 1)[0]
    assert rank_prob(tiny_model, x, x) == 0.5


def test_large_logit_probability():
    assert sigmoid_value(50.0) > 1 - 1e-9
    assert sigmoid_value(-800.0) >= 0.0


def test_rank_score_batch_invariant(tiny_model):
    x = images(2, 6)
    f = features(tiny_model, x)
    alone = rank_score(tiny_model, x[1], x[4])
    batched = score_from_features(tiny_model.params["rank.w"].data, f[1], f[4])
    assert abs(alone - batched) < 1e-9


def test_csr_change(tiny_model):
    a, b, _ = images(3)
    assert csr_change(tiny_model, a, a) == 0.0
    assert csr_change(tiny_model, a, b) == -csr_change(tiny_model, b, a)
    no_head = init_weights(TINY, seed=0, csr_head=False)
    with pytest.raises(ValueError, match="CSR"):
        csr_predict(no_head, a)


def test_checkpoint_round_trip(tmp_path, tiny_model):
    tiny_model.meta = {"task": "supervised", "lr": 0.001}
    tiny_model.buffers[next(iter(tiny_model.buffers))][...] = 0.25
    p = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, p)
    assert p.read_bytes().startswith(CHECKPOINT_MAGIC)
    back = load_checkpoint(p)
    assert back.same_as(tiny_model) and back.meta == tiny_model.meta and back.config == tiny_model.config
    a, b, _ = images(4)
    assert rank_score(back, a, b) == rank_score(tiny_model, a, b)
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == p.read_bytes()


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"hello\n{}\n")
    with pytest.raises(ValueError, match="checkpoint"):
        load_checkpoint(p)


def test_freeze_backbone(tiny_model):
    frozen = freeze_backbone(tiny_model)
    assert frozen.frozen and not tiny_model.frozen
    assert frozen.trainable_names("rank") == ["rank.w"]
    assert frozen.params["rank.w"] is tiny_model.params["rank.w"]
    # frozen models ignore training mode, so running statistics stay put
    before = {k: v.copy() for k, v in frozen.buffers.items()}
    feature_extract(frozen, images(5, 4), training=True, grad=True)
    assert all(np.array_equal(before[k], frozen.buffers[k]) for k in before)


def test_standardized_input_ignores_brightness_and_contrast():
    cfg = BackboneConfig.preset("tiny", standardize_input=True)
    m = init_weights(cfg, seed=3)
    x = images(11, n=1, cfg=cfg)[0]
    mu = x.mean()
    shifted = 0.5 * (1.3 * (x - mu) + mu)  # contrast about the mean, then brightness
    assert abs(rank_score(m, x, shifted)) < 1e-9
    flat = np.full_like(x, 0.4)
    np.testing.assert_allclose(features(m, flat[None]), features(m, np.zeros_like(x)[None]), atol=1e-12)


def test_standardize_flag_survives_checkpoint(tmp_path):
    m = init_weights(BackboneConfig.preset("tiny", standardize_input=True), seed=0)
    save_checkpoint(m, tmp_path / "m.ckpt")
    assert load_checkpoint(tmp_path / "m.ckpt").config.standardize_input
