# tests/test_encoder.py

import numpy as np
import pytest

from agrg.core.autodiff import finite_diff_check
from agrg.core.encoder import (
    ENCODER_KINDS, EncoderConfig, PretrainModel, VisualEncoder, batch_bce, encode_volume, multilabel_scores, patchify,
    predict_multilabel, pretrain_epoch, stack_batch,
)
from agrg.core.optim import Adam
from agrg.errors import ConfigError, ShapeError

SMALL = EncoderConfig(patch=4, d_h=8, layers=1)


def test_patchify_layout():
    volume = np.arange(4 * 4 * 4, dtype=np.float64).reshape(1, 4, 4, 4)
    tokens = patchify(volume, 2)
    assert tokens.shape == (1, 8, 8)
    # first patch is the 2x2x2 corner cube, row-major inside the patch
    np.testing.assert_array_equal(tokens[0, 0], volume[0, :2, :2, :2].ravel())
    np.testing.assert_array_equal(tokens[0, -1], volume[0, 2:, 2:, 2:].ravel())


def test_patchify_accepts_single_volume():
    assert patchify(np.zeros((4, 4, 4)), 4).shape == (1, 1, 64)


def test_patchify_rejects_indivisible_shape():
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 5, 4, 4)), 2)


def test_odd_width_rejected(rng):
    with pytest.raises(ConfigError):
        VisualEncoder(EncoderConfig(patch=4, d_h=7, layers=1), rng)


def test_encoder_output_shape(rng, tiny_cases):
    encoder = VisualEncoder(SMALL, rng)
    volumes = np.stack([case.volume for case in tiny_cases[:3]])
    assert encoder(volumes).shape == (3, SMALL.d_h)
    assert encode_volume(tiny_cases[0].volume, encoder).shape == (SMALL.d_h,)


def test_features_ignore_patch_order(rng):
    encoder = VisualEncoder(EncoderConfig(patch=2, d_h=8, layers=1), rng)
    volume = rng.normal(size=(4, 4, 4))
    # swapping whole patch-sized cubes permutes patch tokens only
    swapped = volume.copy()
    swapped[:2, :2, :2], swapped[2:, 2:, 2:] = volume[2:, 2:, 2:], volume[:2, :2, :2]
    np.testing.assert_allclose(encode_volume(volume, encoder), encode_volume(swapped, encoder), atol=1e-12)


def test_same_seed_same_weights():
    a = PretrainModel(SMALL, 3, np.random.default_rng(7))
    b = PretrainModel(SMALL, 3, np.random.default_rng(7))
    for (name_a, p_a), (name_b, p_b) in zip(a.named_parameters(), b.named_parameters()):
        assert name_a == name_b
        np.testing.assert_array_equal(p_a.data, p_b.data)


def test_weights_are_float32_representable(rng):
    model = PretrainModel(SMALL, 3, rng)
    for param in model.parameters():
        np.testing.assert_array_equal(param.data, param.data.astype(np.float32).astype(np.float64))


def test_head_emits_one_logit_per_label(rng):
    model = PretrainModel(SMALL, 3, rng)
    assert predict_multilabel(np.zeros((2, SMALL.d_h)), model.psi).shape == (2, 3)


def test_pretraining_reduces_loss(rng, tiny_cases):
    model = PretrainModel(SMALL, 3, rng)
    optimizer = Adam(model.named_parameters(), lr=1e-2)
    losses = [pretrain_epoch(tiny_cases, model, optimizer, batch_size=3, seed=0, epoch=epoch) for epoch in range(15)]
    assert all(np.isfinite(losses))
    assert losses[-1] < losses[0]
    scores = multilabel_scores(tiny_cases, model)
    assert scores.shape == (len(tiny_cases), 3)
    assert np.all((scores > 0) & (scores < 1))


def test_empty_dataset_rejected(rng):
    model = PretrainModel(SMALL, 3, rng)
    with pytest.raises(ConfigError):
        pretrain_epoch([], model, Adam(model.named_parameters(), lr=1e-2))


def test_wrong_volume_shape(rng):
    encoder = VisualEncoder(SMALL, rng)
    with pytest.raises(ShapeError):
        encoder(np.zeros((1, 6, 6, 6)))


@pytest.mark.parametrize("kind", ENCODER_KINDS)
def test_every_encoder_kind_yields_features(kind, rng, tiny_cases):
    config = EncoderConfig(kind=kind, patch=4, d_h=8, layers=1)
    encoder = VisualEncoder(config, rng)
    volumes = np.stack([case.volume for case in tiny_cases[:3]])
    h = encoder(volumes)
    assert h.shape == (3, config.d_h)
    assert np.all(np.isfinite(h.data))


def test_attention_kind_adds_a_pooling_score(rng):
    mixer = dict(VisualEncoder(EncoderConfig(kind="mixer", patch=2, d_h=4, layers=1), rng).named_parameters())
    attention = dict(VisualEncoder(EncoderConfig(kind="attention", patch=2, d_h=4, layers=1), rng).named_parameters())
    assert set(attention) - set(mixer) == {"pool.score.weight", "pool.score.bias"}


@pytest.mark.parametrize("kind", ENCODER_KINDS)
def test_encoder_gradients_match_finite_differences(kind, rng):
    model = PretrainModel(EncoderConfig(kind=kind, patch=2, d_h=4, layers=1), 2, rng)
    volumes = rng.uniform(-1, 1, size=(2, 4, 4, 4))
    labels = np.array([[1.0, 0.0], [0.0, 1.0]])
    named = dict(model.named_parameters())
    leaves = ["encoder.patch_embed.weight", "encoder.blocks.0.expand.weight", "psi.linear.weight"]
    if kind == "attention":
        leaves.append("encoder.pool.score.weight")
    for name in leaves:
        assert finite_diff_check(lambda: batch_bce(model, volumes, labels), named[name]) < 1e-4, name


@pytest.mark.parametrize("kind", ENCODER_KINDS)
def test_pooling_ignores_patch_order(kind, rng):
    encoder = VisualEncoder(EncoderConfig(kind=kind, patch=2, d_h=8, layers=1), rng)
    volume = rng.normal(size=(4, 4, 4))
    swapped = volume.copy()
    swapped[:2, 2:, :2], swapped[2:, :2, 2:] = volume[2:, :2, 2:], volume[:2, 2:, :2]
    np.testing.assert_allclose(encode_volume(volume, encoder), encode_volume(swapped, encoder), atol=1e-12)


def test_batch_loss_is_mean_of_single_case_losses(rng, tiny_cases):
    model = PretrainModel(SMALL, 3, rng)
    volumes, labels = stack_batch(tiny_cases[:3])
    batched = batch_bce(model, volumes, labels).item()
    singles = [batch_bce(model, volumes[i:i + 1], labels[i:i + 1]).item() for i in range(3)]
    np.testing.assert_allclose(batched, np.mean(singles), rtol=0, atol=1e-10)
