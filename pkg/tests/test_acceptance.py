"""The twelve acceptance criteria, one test each, at their stated tolerances.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""
import time
import zlib

import numpy as np
import pytest

from _toy import toy_config, toy_source
from imted.backbone import resize_pos_embed
from imted.config import TrainConfig, ViTConfig, desk_config, full_baseline, full_config, full_imted
from imted.detector import Detector
from imted.harness.data import SyntheticSpec, filter_occluded, gen_synthetic_dataset
from imted.harness.evaluate import evaluate
from imted.harness.mae import MaeConfig, pretrain_mae
from imted.harness.train import train
from imted.head import MFM, DecoderHead, roi_align
from imted.config import HeadConfig
from imted.migration.accounting import count_params, decoder_layer_flops, estimate_flops, scratch_reduction
from imted.migration.checkpoint import CheckpointArchive, load_checkpoint, save_checkpoint
from imted.migration.migrate import migrate
from imted.numerics import Tensor, grad_check, precision
from imted.proposals import decode_boxes, encode_boxes, match_boxes, nms
from test_harness import brute_occluded_ids
from test_head import dense_roi_align
from test_numerics import DIFF_OPS, _case
from test_proposals import brute_match, brute_nms, random_boxes


def within(value, target, tol=0.15):
    return abs(value - target) <= tol * target


@pytest.mark.criterion(1, "scratch-parameter accounting")
def test_scratch_parameter_accounting():
    t0 = time.perf_counter()
    base = count_params(full_baseline("S"))["scratch"]
    imted = count_params(full_imted("S"))["scratch"]
    red = scratch_reduction(full_baseline("S"), full_imted("S"))
    print(f"baseline scratch {base / 1e6:.3f}M, imTED scratch {imted / 1e6:.3f}M, reduction {100 * red:.2f}%")
    assert within(base, 17.7e6) and within(imted, 3.3e6)
    assert 0.75 <= red <= 0.87
    assert time.perf_counter() - t0 < 1.0


@pytest.mark.criterion(2, "ablation params column")
def test_ablation_params_column():
    t0 = time.perf_counter()
    conv = count_params(full_config("S", "conv", True, False))["total"]
    row2 = count_params(full_config("S", "decoder_random", True, False))["total"]
    row3 = count_params(full_config("S", "decoder_pretrained", True, False))["total"]
    print(f"conv {conv / 1e6:.2f}M, decoder rows {row2 / 1e6:.2f}M / {row3 / 1e6:.2f}M")
    assert row2 == row3 and conv > row2
    assert within(conv, 42.6e6) and within(row2, 30.1e6)
    assert time.perf_counter() - t0 < 1.0


@pytest.mark.criterion(3, "FLOPs increments")
def test_flops_increments():
    t0 = time.perf_counter()
    per_layer = decoder_layer_flops(256, 49, 512)
    print(f"per decoder layer {per_layer / 1e9:.2f} GFLOPs")
    assert within(per_layer, 20e9)
    depth = [estimate_flops(full_config("S", decoder_depth=d, use_mfm=False))["total"] for d in range(1, 9)]
    assert all(b > a for a, b in zip(depth, depth[1:]))
    step = np.diff(depth)
    assert np.allclose(step, per_layer)
    for d in (2, 4, 6):
        off = estimate_flops(full_config("S", decoder_depth=d, use_mfm=False))["total"]
        on = estimate_flops(full_config("S", decoder_depth=d, use_mfm=True))["total"]
        assert on > off
    assert time.perf_counter() - t0 < 1.0


@pytest.mark.criterion(4, "MFM zero-init equivalence")
def test_mfm_zero_init_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    images = rng.uniform(0, 1, size=(20, 3, 64, 64)).astype(np.float32)
    xy = rng.uniform(0, 40, size=(60, 2))
    rois = np.concatenate([np.repeat(np.arange(20), 3)[:, None], xy, xy + rng.uniform(6, 24, size=(60, 2))], 1)
    with_mfm = Detector(desk_config(use_mfm=True), seed=0).eval()
    without = Detector(desk_config(use_mfm=False), seed=0).eval()
    with precision("single"):
        a_cls, a_reg = with_mfm.forward_rois(images, rois)
        b_cls, b_reg = without.forward_rois(images, rois)
    assert a_cls.dtype == np.float32
    assert a_cls.data.tobytes() == b_cls.data.tobytes()
    assert a_reg.data.tobytes() == b_reg.data.tobytes()
    assert time.perf_counter() - t0 < 10.0


@pytest.mark.criterion(5, "oracle equivalences")
def test_oracle_equivalences():
    t0 = time.perf_counter()
    for seed in range(100):
        r = np.random.default_rng(seed)
        n = int(r.integers(0, 40))
        boxes, scores, thr = random_boxes(r, n), r.integers(0, 10, n).astype(float), float(r.uniform(0.1, 0.9))
        assert nms(boxes, scores, thr).tolist() == brute_nms(boxes, scores, thr)
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(10_000 + seed)
        H, W = r.integers(2, 9, size=2)
        stride = int(r.choice([4, 8, 16]))
        fm = r.normal(size=(3, H, W))
        xy = r.uniform(-stride, stride * W, size=2)
        box = [*xy, *(xy + r.uniform(0.5, 4 * stride, size=2))]
        with precision("double"):
            got = roi_align(Tensor(fm), [box], output_size=4, stride=stride).data[0]
        worst = max(worst, np.abs(got - dense_roi_align(fm, box, 4, stride)).max())
    assert worst <= 1e-5
    r = np.random.default_rng(7)
    ref, tgt = random_boxes(r, 1000), random_boxes(r, 1000)
    stds = (0.1, 0.1, 0.2, 0.2)
    assert np.abs(decode_boxes(ref, encode_boxes(ref, tgt, stds), stds, clamp=np.inf) - tgt).max() <= 1e-5
    for seed in range(50):
        r = np.random.default_rng(20_000 + seed)
        boxes, gt = random_boxes(r, int(r.integers(5, 30))), random_boxes(r, int(r.integers(1, 5)))
        np.testing.assert_array_equal(match_boxes(boxes, gt, 0.5, 0.3), brute_match(boxes, gt, 0.5, 0.3))
    assert time.perf_counter() - t0 < 30.0


@pytest.mark.criterion(6, "gradient checks")
def test_gradient_checks():
    t0 = time.perf_counter()
    worst = {}
    with precision("double"):
        for kind in DIFF_OPS:
            r = np.random.default_rng(zlib.crc32(kind.encode()))
            worst[kind] = max(grad_check(f, Tensor(x)) for f, x in (_case(kind, r) for _ in range(10)))
        for i in range(10):
            r = np.random.default_rng(100 + i)
            mfm = MFM(4, 6, r)
            f_ss, f_ms = Tensor(r.normal(size=(2, 4, 3, 3))), Tensor(r.normal(size=(2, 6, 3, 3)))
            w = Tensor(r.normal(size=(2, 4, 3, 3)))

            def f_alpha(a):
                mfm.alpha = a
                return (mfm(f_ss, f_ms) * w).sum()
            worst["mfm_alpha"] = max(worst.get("mfm_alpha", 0), grad_check(f_alpha, r.normal(size=4)))

            head = DecoderHead(5, HeadConfig(decoder_depth=1, decoder_dim=8, decoder_heads=2, roi_size=3), 2, r)
            for layer in (head.cls_score, head.bbox_pred):
                layer.weight.data[...] = r.normal(size=layer.weight.shape) / 4
            wc = Tensor(r.normal(size=(2, 3)))
            err = grad_check(lambda x: (head(x)[0] * wc).sum() + head(x)[1].sum(), r.normal(size=(2, 5, 3, 3)))
            worst["decoder_block"] = max(worst.get("decoder_block", 0), err)

            rois = np.array([[0, 1.5, 2.0, 11.0, 9.5], [1, -3.0, 4.0, 6.0, 15.0]])
            wr = Tensor(r.normal(size=(2, 2, 3, 3)))
            err = grad_check(lambda fm: (roi_align(fm, rois, 3, 4) * wr).sum(), r.normal(size=(2, 2, 4, 4)))
            worst["roi_align_features"] = max(worst.get("roi_align_features", 0), err)
    bad = {k: v for k, v in worst.items() if not v <= 1e-5}
    print(f"largest relative error {max(worst.values()):.2e} over {len(worst)} checks")
    assert not bad, bad
    assert time.perf_counter() - t0 < 120.0


@pytest.mark.criterion(7, "positional-embedding resize")
def test_pos_embed_resize():
    r = np.random.default_rng(7)
    pos = r.normal(size=(12, 16))
    assert resize_pos_embed(pos, (3, 4), (3, 4)).tobytes() == pos.tobytes()
    four = r.normal(size=(4, 16))
    assert np.abs(resize_pos_embed(four, (2, 2), (3, 3))[4] - four.mean(0)).max() <= 1e-6


@pytest.mark.criterion(8, "d/4 taps")
def test_taps():
    assert ViTConfig(depth=12).tap_blocks == [3, 6, 9, 12]
    assert ViTConfig(depth=4, embed_dim=64, num_heads=4).tap_blocks == [1, 2, 3, 4]


@pytest.mark.criterion(9, "occluded filter")
def test_occluded_filter():
    t0 = time.perf_counter()
    ds = gen_synthetic_dataset(SyntheticSpec(n_images=200, occlusion_rate=0.3, seed=21))
    selected = filter_occluded(ds).ids.tolist()
    print(f"{len(selected)} of 200 images selected")
    assert selected == brute_occluded_ids(ds) and selected
    assert time.perf_counter() - t0 < 5.0


@pytest.mark.slow
@pytest.mark.criterion(10, "desk-scale end-to-end training")
def test_desk_end_to_end_training():
    t0 = time.process_time()
    train_ds = gen_synthetic_dataset(SyntheticSpec(n_images=500, seed=1))
    val_ds = gen_synthetic_dataset(SyntheticSpec(n_images=100, seed=2))
    mae_ds = gen_synthetic_dataset(SyntheticSpec(n_images=2000, seed=123))
    tcfg = TrainConfig()
    results = {}
    for name, cfg in (("conv baseline", desk_config("conv", True, False)), ("imTED", desk_config())):
        if cfg.head.head_kind == "conv":
            det = Detector(cfg, seed=tcfg.seed)
        else:
            source, _ = pretrain_mae(mae_ds.images, cfg.vit, MaeConfig())
            det, _ = migrate(source, cfg, seed=tcfg.seed)
        log = train(det, train_ds, tcfg)
        first, last = log.epoch_means[0]["total"], log.epoch_means[-1]["total"]
        ap50 = evaluate(det, val_ds)["AP50"]
        results[name] = (first, last, ap50)
        print(f"{name}: loss {first:.4f} -> {last:.4f}, val AP50 {ap50:.3f}")
    cpu = time.process_time() - t0
    print(f"cpu time {cpu:.0f} s")
    for name, (first, last, ap50) in results.items():
        assert last < first, name
        assert ap50 >= 0.5, name
    assert cpu <= 15 * 60


@pytest.mark.criterion(11, "migration integrity")
def test_migration_integrity(tmp_path):
    t0 = time.perf_counter()
    src = toy_source()
    for kind, fpn, mfm in (("conv", True, False), ("decoder_random", True, False),
                           ("decoder_pretrained", True, False), ("decoder_pretrained", False, True)):
        det, rep = migrate(src, toy_config(kind, fpn, mfm))
        targets = [t for _, t, _ in rep.mapped] + [t for t, _, _ in rep.scratch]
        names = [n for n, _ in det.named_parameters()]
        assert sorted(targets) == sorted(names) and len(set(targets)) == len(names)
        params = dict(det.named_parameters())
        assert all(src.shape(s) == params[t].shape == shape for s, t, shape in rep.mapped)
        if kind == "conv":
            assert not any(s.startswith("decoder") for s, _, _ in rep.mapped)
    save_checkpoint(src, tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert CheckpointArchive.from_bytes(src.to_bytes()).to_bytes() == src.to_bytes()
    assert time.perf_counter() - t0 < 5.0


@pytest.mark.criterion(12, "freeze-backbone contract")
def test_freeze_backbone_contract():
    t0 = time.perf_counter()
    cfg = desk_config()
    det, _ = migrate(toy_source(cfg, decoder_depth=cfg.head.decoder_depth), cfg, seed=0)
    before = {n: p.data.tobytes() for n, p in det.named_parameters()}
    few_shot = gen_synthetic_dataset(SyntheticSpec(n_images=16, seed=30))
    train(det, few_shot, TrainConfig(epochs=2, batch_size=4, decay_epochs=(), freeze_backbone=True))
    after = {n: p.data.tobytes() for n, p in det.named_parameters()}
    encoder = [n for n in before if n.startswith("backbone.")]
    assert encoder and all(after[n] == before[n] for n in encoder)
    assert any(after[n] != before[n] for n in before if n.startswith("roi_head."))
    assert time.perf_counter() - t0 < 120.0
