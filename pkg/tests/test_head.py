import math

import numpy as np
import pytest

from imted.config import HeadConfig
from imted.head import (MFM, ConvHead, DecoderHead, assign_levels, detection_losses, mfm_modulate,
                        multilevel_roi_align, roi_align, select_fpn_level)
from imted.numerics import DimensionError, Tensor, grad_check, precision
from imted.proposals import Box


def bilinear_point(fm, y, x):
    H, W = fm.shape[1:]
    if y < -1.0 or y > H or x < -1.0 or x > W:
        return np.zeros(fm.shape[0])
    y, x = max(y, 0.0), max(x, 0.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    if y0 >= H - 1:
        y0 = y1 = H - 1
        y = float(y0)
    else:
        y1 = y0 + 1
    if x0 >= W - 1:
        x0 = x1 = W - 1
        x = float(x0)
    else:
        x1 = x0 + 1
    ly, lx = y - y0, x - x0
    return ((1 - ly) * (1 - lx) * fm[:, y0, x0] + (1 - ly) * lx * fm[:, y0, x1]
            + ly * (1 - lx) * fm[:, y1, x0] + ly * lx * fm[:, y1, x1])


def dense_roi_align(fm, box, out, stride, s=2):
    x1, y1, x2, y2 = (c / stride for c in box)
    x1, y1 = x1 - 0.5, y1 - 0.5
    bw, bh = max(x2 - 0.5 - x1, 1e-3) / out, max(y2 - 0.5 - y1, 1e-3) / out
    res = np.zeros((fm.shape[0], out, out))
    for i in range(out):
        for j in range(out):
            acc = np.zeros(fm.shape[0])
            for a in range(s):
                for b in range(s):
                    acc += bilinear_point(fm, y1 + (i + (a + 0.5) / s) * bh, x1 + (j + (b + 0.5) / s) * bw)
            res[:, i, j] = acc / (s * s)
    return res


def head_cfg(**kw):
    base = dict(decoder_depth=1, decoder_dim=16, decoder_heads=2, conv_dim=8, num_convs=1, fc_dim=16,
                num_fcs=1)
    base.update(kw)
    return HeadConfig(**base)


@pytest.mark.parametrize("seed", range(100))
def test_roi_align_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    H, W = rng.integers(2, 9, size=2)
    stride = int(rng.choice([4, 8, 16]))
    fm = rng.normal(size=(3, H, W))
    xy = rng.uniform(-stride, stride * W, size=2)
    wh = rng.uniform(0.5, stride * 4, size=2)
    box = [xy[0], xy[1], xy[0] + wh[0], xy[1] + wh[1]]
    with precision("double"):
        got = roi_align(Tensor(fm), [box], output_size=3, stride=stride).data[0]
    np.testing.assert_allclose(got, dense_roi_align(fm, box, 3, stride), atol=1e-5)


def test_roi_align_constant_map():
    fm = np.full((1, 2, 6, 6), 3.5)
    with precision("double"):
        out = roi_align(Tensor(fm), [[0, 4, 4, 20, 16]], output_size=7, stride=4).data
    np.testing.assert_allclose(out, 3.5)


def test_roi_align_accepts_box_and_batch_index(rng):
    fm = rng.normal(size=(2, 3, 5, 5))
    with precision("double"):
        a = roi_align(Tensor(fm), Box(2, 2, 12, 14), stride=4).data
        b = roi_align(Tensor(fm), [[1, 2, 2, 12, 14]], stride=4).data
    np.testing.assert_allclose(a[0], dense_roi_align(fm[0], [2, 2, 12, 14], 7, 4), atol=1e-10)
    np.testing.assert_allclose(b[0], dense_roi_align(fm[1], [2, 2, 12, 14], 7, 4), atol=1e-10)
    assert roi_align(Tensor(fm), np.zeros((0, 5))).shape == (0, 3, 7, 7)


def test_roi_align_gradient_ten_instances():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        rois = np.array([[0, 1.5, 2.0, 11.0, 9.5], [0, -3.0, 4.0, 6.0, 15.0]])
        w = rng.normal(size=(2, 2, 3, 3))
        with precision("double"):
            err = grad_check(lambda f: (roi_align(f, rois, 3, 4) * Tensor(w)).sum(), rng.normal(size=(1, 2, 4, 4)))
        assert err <= 1e-5


@pytest.mark.parametrize("side,level", [(224, 2), (1, 0), (56, 0), (112, 1), (448, 3), (5000, 3)])
def test_level_selection(side, level):
    assert select_fpn_level(Box(0, 0, side, side)) == level


def test_multilevel_keeps_roi_order(rng):
    pyramid = [Tensor(rng.normal(size=(1, 2, 16 // s, 16 // s))) for s in (1, 2, 4, 8)]
    rois = np.array([[0, 0, 0, 60, 60], [0, 0, 0, 4, 4], [0, 2, 2, 30, 30]], float)
    levels = assign_levels(rois[:, 1:], canonical_size=16)
    out = multilevel_roi_align(pyramid, rois, levels, strides=(1, 2, 4, 8)).data
    for r in range(3):
        lv = levels[r]
        ref = roi_align(pyramid[lv], rois[r:r + 1], stride=(1, 2, 4, 8)[lv]).data[0]
        np.testing.assert_array_equal(out[r], ref)


def test_mfm_examples(rng):
    f_ss, f_ms = rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(2, 3, 7, 7))
    with precision("double"):
        zero = mfm_modulate(Tensor(f_ss), Tensor(f_ms), Tensor(np.zeros(3))).data
        ones = mfm_modulate(Tensor(f_ss), Tensor(f_ms), Tensor(np.array([1.0, 0.0, 2.0]))).data
    np.testing.assert_array_equal(zero, f_ss)
    np.testing.assert_allclose(ones, f_ss + np.array([1, 0, 2])[None, :, None, None] * f_ms)
    with pytest.raises(DimensionError):
        mfm_modulate(Tensor(f_ss), Tensor(f_ms[:, :2]), Tensor(np.zeros(3)))
    with pytest.raises(DimensionError):
        mfm_modulate(Tensor(f_ss), Tensor(f_ms), Tensor(np.zeros(2)))


def test_mfm_starts_as_identity_and_alpha_gets_gradient(rng):
    with precision("double"):
        mfm = MFM(4, 6, np.random.default_rng(0))
        f_ss, f_ms = Tensor(rng.normal(size=(2, 4, 3, 3))), Tensor(rng.normal(size=(2, 6, 3, 3)))
        out = mfm(f_ss, f_ms)
        np.testing.assert_array_equal(out.data, f_ss.data)
        out.sum().backward()
    assert np.abs(mfm.alpha.grad).max() > 0


def test_mfm_alpha_gradient_ten_instances():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        with precision("double"):
            mfm = MFM(4, 6, rng)
            f_ss, f_ms = Tensor(rng.normal(size=(2, 4, 3, 3))), Tensor(rng.normal(size=(2, 6, 3, 3)))
            w = Tensor(rng.normal(size=(2, 4, 3, 3)))

            def f(a):
                mfm.alpha = a
                return (mfm(f_ss, f_ms) * w).sum()
            assert grad_check(f, rng.normal(size=4)) <= 1e-5


def test_decoder_head_gradient_ten_instances():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        with precision("double"):
            head = DecoderHead(5, head_cfg(roi_size=3), 3, rng)
            # unit-scale outputs; the tiny default init leaves gradients at roundoff level
            for layer in (head.cls_score, head.bbox_pred):
                layer.weight.data[...] = rng.normal(size=layer.weight.shape) / 4
            w = Tensor(rng.normal(size=(2, 4)))
            err = grad_check(lambda x: (head(x)[0] * w).sum() + head(x)[1].sum(), rng.normal(size=(2, 5, 3, 3)))
        assert err <= 1e-5


@pytest.mark.parametrize("kind", ["decoder", "conv"])
def test_zero_output_layer_gives_uniform_posterior(kind, rng):
    cls = DecoderHead if kind == "decoder" else ConvHead
    head = cls(5, head_cfg(roi_size=3), 3, rng)
    head.cls_score.weight.data[...] = 0
    head.cls_score.bias.data[...] = 0
    logits, deltas = head(Tensor(rng.normal(size=(4, 5, 3, 3))))
    assert logits.shape == (4, 4) and deltas.shape == (4, 4)
    p = np.exp(logits.data) / np.exp(logits.data).sum(1, keepdims=True)
    np.testing.assert_allclose(p, 0.25)


@pytest.mark.parametrize("kind", ["decoder", "conv"])
def test_heads_are_per_roi(kind, rng):
    cls = DecoderHead if kind == "decoder" else ConvHead
    with precision("double"):
        head = cls(5, head_cfg(roi_size=3, class_agnostic=False), 3, rng)
        x = rng.normal(size=(5, 5, 3, 3))
        perm = rng.permutation(5)
        a, da = head(Tensor(x))
        b, db = head(Tensor(x[perm]))
    assert da.shape == (5, 12)
    np.testing.assert_allclose(b.data, a.data[perm], atol=1e-12)
    np.testing.assert_allclose(db.data, da.data[perm], atol=1e-12)


def test_losses_uniform_logits_and_half_offset():
    with precision("double"):
        logits = Tensor(np.zeros((1, 4)))
        deltas = Tensor(np.array([[0.5, 0.0, 0.0, 0.0]]))
        out = detection_losses(logits, deltas, [1], np.zeros((1, 4)), num_classes=3)
    assert float(out["cls"].data) == pytest.approx(math.log(4))
    assert float(out["reg"].data) == pytest.approx(0.125)


def test_losses_background_only_has_zero_regression():
    with precision("double"):
        out = detection_losses(Tensor(np.zeros((3, 4))), Tensor(np.ones((3, 4))), [3, 3, 3],
                               np.zeros((3, 4)), num_classes=3)
    assert float(out["reg"].data) == 0.0


def test_class_specific_regression_picks_label_column():
    deltas = np.zeros((1, 12))
    deltas[0, 4:8] = [0.5, 0, 0, 0]
    with precision("double"):
        out = detection_losses(Tensor(np.zeros((1, 4))), Tensor(deltas), [1], np.zeros((1, 4)), 3)
    assert float(out["reg"].data) == pytest.approx(0.125)


def test_mfm_one_hot_alpha_changes_one_channel(rng):
    f_ss, f_ms = rng.normal(size=(1, 4, 3, 3)), rng.normal(size=(1, 4, 3, 3))
    with precision("double"):
        out = mfm_modulate(Tensor(f_ss), Tensor(f_ms), Tensor(np.eye(4)[2])).data
    diff = out - f_ss
    assert np.all(diff[:, [0, 1, 3]] == 0)
    np.testing.assert_allclose(diff[:, 2], f_ms[:, 2])


def test_mfm_alpha_gradient_is_channel_sum(rng):
    f_ms = rng.normal(size=(2, 4, 3, 3))
    with precision("double"):
        alpha = Tensor(np.zeros(4), requires_grad=True)
        mfm_modulate(Tensor(rng.normal(size=(2, 4, 3, 3))), Tensor(f_ms), alpha).sum().backward()
    np.testing.assert_allclose(alpha.grad, f_ms.sum(axis=(0, 2, 3)))


def test_decoder_with_zero_blocks_is_normalised_embedding(rng):
    from imted.numerics import ops
    head = DecoderHead(5, head_cfg(roi_size=3, decoder_depth=2), 3, rng)
    for name, p in head.named_parameters():
        if name.startswith("blocks.") and ("attn.proj" in name or "mlp.fc2" in name):
            p.data[...] = 0
    roi = rng.normal(size=(2, 5, 3, 3))
    with precision("double"):
        tokens = head.tokens(Tensor(roi)).data
        x = head.decoder_embed(Tensor(roi.reshape(2, 5, 9).transpose(0, 2, 1))) + Tensor(head.pos_embed)
        expect = ops.layer_norm(x, head.norm.weight, head.norm.bias).data
    np.testing.assert_allclose(tokens, expect, atol=1e-12)


def test_mean_pooling_ignores_token_order_without_position_embedding(rng):
    head = DecoderHead(5, head_cfg(roi_size=3), 3, rng)
    head.pos_embed = np.zeros_like(head.pos_embed)
    roi = rng.normal(size=(2, 5, 3, 3))
    perm = rng.permutation(9)
    shuffled = roi.reshape(2, 5, 9)[:, :, perm].reshape(2, 5, 3, 3)
    with precision("double"):
        a = head(Tensor(roi))[0].data
        b = head(Tensor(shuffled))[0].data
    np.testing.assert_allclose(a, b, atol=1e-12)
