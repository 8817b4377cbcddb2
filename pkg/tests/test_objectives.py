import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from stagedvit import (
    ClsHead,
    MaskPattern,
    ReconHead,
    SegHead,
    assemble_patch_grid,
    classify_loss,
    disassemble_patch_grid,
    mim_loss,
    predict_trimap,
    sample_mask,
    segment_logits,
    segment_loss,
    stack_masks,
)
from stagedvit.backbone import VisionEncoder


def test_sample_mask_popcount_exact(rng):
    for _ in range(200):
        pat = sample_mask(rng, 64, 0.5)
        assert pat.mask.sum() == 32
        assert pat.mask.dtype == np.bool_
        assert pat.mask.shape == (64,)


@given(
    n=st.integers(1, 200),
    ratio=st.floats(0.0, 1.0, allow_nan=False),
    seed=st.integers(0, 2**32 - 1),
)
def test_sample_mask_popcount_property(n, ratio, seed):
    pat = sample_mask(np.random.default_rng(seed), n, ratio)
    assert int(pat.mask.sum()) == round(ratio * n)
    assert pat.ratio == ratio


def test_sample_mask_ratio_validation(rng):
    with pytest.raises(ValueError):
        sample_mask(rng, 64, 1.5)
    with pytest.raises(ValueError):
        sample_mask(rng, 64, -0.1)


def test_sample_mask_covers_all_positions(rng):
    """Every position should get masked eventually; the draw is not degenerate."""
    hits = np.zeros(16, dtype=int)
    for _ in range(500):
        hits += sample_mask(rng, 16, 0.25).mask
    assert (hits > 0).all()


def test_stack_masks(rng):
    pats = [sample_mask(rng, 9, 1 / 3) for _ in range(5)]
    stacked = stack_masks(pats)
    assert stacked.shape == (5, 9)
    assert stacked.dtype == np.bool_
    for row, pat in zip(stacked, pats):
        assert (row == pat.mask).all()


def test_mim_loss_hand_value():
    pred = torch.zeros(1, 4, 3)
    target = torch.tensor([[[1.0, -1.0, 2.0], [9.0, 9.0, 9.0], [0.5, 0.5, 0.5], [7.0, 7.0, 7.0]]])
    mask = np.array([[True, False, True, False]])
    # masked pixels: |1| + |-1| + |2| + 3*|0.5| over 6 pixels
    want = (1 + 1 + 2 + 1.5) / 6
    got = mim_loss(pred, target, mask)
    assert math.isclose(got.item(), want, rel_tol=0, abs_tol=1e-7)


def test_mim_loss_ignores_unmasked_bit_exactly(rng):
    pred = torch.randn(2, 8, 12)
    target = torch.randn(2, 8, 12)
    mask = np.zeros((2, 8), dtype=bool)
    mask[0, [1, 4]] = True
    mask[1, [0, 7]] = True
    base = mim_loss(pred, target, mask)

    noisy_pred, noisy_target = pred.clone(), target.clone()
    noisy_pred[~torch.from_numpy(mask)] = 1e6
    noisy_target[~torch.from_numpy(mask)] = -1e6
    assert torch.equal(mim_loss(noisy_pred, noisy_target, mask), base)


def test_mim_loss_accepts_pattern_and_vector(rng):
    pat = sample_mask(rng, 8, 0.5)
    pred = torch.randn(8, 12)
    target = torch.randn(8, 12)
    a = mim_loss(pred, target, pat)
    b = mim_loss(pred, target, pat.mask)
    assert torch.equal(a, b)


def test_mim_loss_validation(rng):
    pred = torch.randn(2, 8, 12)
    with pytest.raises(ValueError):
        mim_loss(pred, torch.randn(2, 8, 11), np.ones((2, 8), bool))
    with pytest.raises(ValueError):
        mim_loss(pred, pred, np.ones((2, 7), bool))
    with pytest.raises(ValueError):
        mim_loss(pred, pred, np.zeros((2, 8), bool))  # empty mask


def test_classify_loss_uniform_head_is_log_num_classes(tiny_config):
    head = ClsHead(tiny_config, num_classes=6)
    with torch.no_grad():
        head.proj.weight.zero_()
        head.proj.bias.zero_()
    features = torch.randn(4, tiny_config.num_tokens, tiny_config.dim)
    loss = classify_loss(features, head, [0, 1, 2, 5])
    assert math.isclose(loss.item(), math.log(6), rel_tol=0, abs_tol=1e-6)


def test_classify_loss_uses_class_token_row_only(tiny_config):
    gen = torch.Generator().manual_seed(0)
    head = ClsHead(tiny_config, num_classes=6, generator=gen)
    features = torch.randn(3, tiny_config.num_tokens, tiny_config.dim, generator=gen)
    scrambled = features.clone()
    scrambled[:, 1:, :] = 0.0  # only the cls row may matter
    a = classify_loss(features, head, [1, 2, 3])
    b = classify_loss(scrambled, head, [1, 2, 3])
    assert torch.equal(a, b)


def test_classify_loss_label_validation(tiny_config):
    head = ClsHead(tiny_config, num_classes=6)
    features = torch.randn(2, tiny_config.num_tokens, tiny_config.dim)
    with pytest.raises(ValueError):
        classify_loss(features, head, [0, 6])
    with pytest.raises(ValueError):
        classify_loss(features, head, [-1, 0])


def test_assemble_layout_against_loop():
    p, g, k = 2, 3, 2
    values = torch.arange(g * g * p * p * k, dtype=torch.float32).reshape(g * g, p * p * k)
    grid = assemble_patch_grid(values, p)
    assert grid.shape == (g * p, g * p, k)
    for y in range(g * p):
        for x in range(g * p):
            for ch in range(k):
                patch = (y // p) * g + (x // p)
                inner = ((y % p) * p + (x % p)) * k + ch
                assert grid[y, x, ch] == values[patch, inner]


@given(
    batch=st.integers(1, 3),
    grid=st.integers(1, 4),
    patch=st.sampled_from([1, 2, 3]),
    channels=st.integers(1, 4),
)
def test_assemble_disassemble_roundtrip(batch, grid, patch, channels):
    values = torch.randn(batch, grid * grid, patch * patch * channels)
    back = disassemble_patch_grid(assemble_patch_grid(values, patch), patch)
    assert torch.equal(back, values)


def test_assemble_validation():
    with pytest.raises(ValueError):
        assemble_patch_grid(torch.randn(4, 7), 2)  # 7 not multiple of patch^2
    with pytest.raises(ValueError):
        assemble_patch_grid(torch.randn(3, 8), 2)  # 3 patches not square
    with pytest.raises(ValueError):
        disassemble_patch_grid(torch.randn(4, 6, 1), 2)  # non-square grid


def test_segment_logits_shape(tiny_config):
    model = VisionEncoder(tiny_config)
    head = SegHead(tiny_config)
    feats = model(torch.rand(2, 3, tiny_config.image_size, tiny_config.image_size))
    logits = segment_logits(feats, head)
    assert logits.shape == (2, tiny_config.image_size, tiny_config.image_size, 3)


def test_segment_loss_uniform_logits_is_log3():
    logits = torch.zeros(2, 8, 8, 3)
    truth = np.random.default_rng(0).integers(0, 3, size=(2, 8, 8))
    loss = segment_loss(logits, truth)
    assert math.isclose(loss.item(), math.log(3), rel_tol=0, abs_tol=1e-6)


def test_segment_loss_perfect_prediction_goes_to_zero():
    truth = np.random.default_rng(1).integers(0, 3, size=(1, 4, 4))
    logits = torch.full((1, 4, 4, 3), -50.0)
    for y in range(4):
        for x in range(4):
            logits[0, y, x, truth[0, y, x]] = 50.0
    assert segment_loss(logits, truth).item() < 1e-6


def test_segment_loss_validation():
    logits = torch.zeros(1, 4, 4, 3)
    with pytest.raises(ValueError):
        segment_loss(logits, np.full((1, 4, 4), 3))
    with pytest.raises(ValueError):
        segment_loss(logits, np.zeros((1, 4, 5), dtype=int))


def test_predict_trimap_ties_go_to_lowest_index():
    logits = np.zeros((2, 2, 3))           # full three-way tie
    assert (predict_trimap(logits) == 0).all()
    logits[0, 0] = [1.0, 2.0, 2.0]          # tie between classes 1 and 2
    assert predict_trimap(logits)[0, 0] == 1
    logits[1, 1] = [0.0, 0.0, 5.0]
    out = predict_trimap(torch.as_tensor(logits))
    assert out.dtype == np.uint8
    assert out[1, 1] == 2


def test_recon_head_shapes(tiny_config):
    head = ReconHead(tiny_config)
    out = head(torch.randn(2, tiny_config.num_tokens, tiny_config.dim))
    assert out.shape == (2, tiny_config.num_patches, tiny_config.patch_dim)
    assert head.mask_token.shape == (tiny_config.dim,)
