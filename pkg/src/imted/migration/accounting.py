"""Closed-form parameter and FLOPs counts computed from config shapes only."""
from ..config import DetectorConfig


def _linear(i, o, bias=True):
    return i * o + (o if bias else 0)


def _conv(cin, cout, k, bias=True):
    return cin * cout * k * k + (cout if bias else 0)


def _block(d, mlp_ratio):
    h = int(d * mlp_ratio)
    return 2 * 2 * d + _linear(d, 3 * d) + _linear(d, d) + _linear(d, h) + _linear(h, d)


def _modules(cfg: DetectorConfig):
    v, hd = cfg.vit, cfg.head
    D, F, K, A = v.embed_dim, cfg.fpn_dim, cfg.num_classes, cfg.num_anchors
    counts = {
        "backbone.patch_embed": _conv(3, D, v.patch_size),
        "backbone.blocks": v.depth * _block(D, v.mlp_ratio),
        "backbone.norm": 2 * D if v.final_norm else 0,
        "neck": 3 * (4 * D + D) + 4 * _conv(D, F, 1),
        "fpn": 4 * _conv(F, F, 1) + 4 * _conv(F, F, 3),
        "rpn": _conv(F, F, 3) + _conv(F, A, 1) + _conv(F, 4 * A, 1),
    }
    box_out = 4 if hd.class_agnostic else 4 * K
    in_dim = cfg.roi_in_dim
    if hd.is_decoder:
        Dd = hd.decoder_dim
        counts["roi_head.decoder_embed"] = _linear(in_dim, Dd)
        counts["roi_head.blocks"] = hd.decoder_depth * _block(Dd, hd.decoder_mlp_ratio)
        counts["roi_head.norm"] = 2 * Dd
        counts["roi_head.outputs"] = _linear(Dd, K + 1) + _linear(Dd, box_out)
    else:
        dims = [in_dim] + [hd.conv_dim] * hd.num_convs
        counts["roi_head.convs"] = sum(_conv(a, b, 3) for a, b in zip(dims[:-1], dims[1:]))
        fdims = [dims[-1] * hd.roi_size ** 2] + [hd.fc_dim] * hd.num_fcs
        counts["roi_head.fcs"] = sum(_linear(a, b) for a, b in zip(fdims[:-1], fdims[1:]))
        counts["roi_head.outputs"] = _linear(fdims[-1], K + 1) + _linear(fdims[-1], box_out)
    if hd.use_mfm:
        counts["mfm"] = D + (_linear(F, D) if F != D else 0)
    return counts


def pretrained_modules(cfg):
    """Module keys whose weights come from the pre-trained source checkpoint."""
    keys = ["backbone.patch_embed", "backbone.blocks", "backbone.norm"]
    if cfg.head.head_kind == "decoder_pretrained":
        keys += ["roi_head.blocks", "roi_head.norm"]
        if not cfg.head.use_fpn_in_feature_path:
            keys.append("roi_head.decoder_embed")
    return keys


def count_params(cfg: DetectorConfig):
    """Per-module counts plus the pretrained / scratch split; no weights allocated."""
    modules = _modules(cfg)
    pre_keys = set(pretrained_modules(cfg))
    pretrained = sum(n for k, n in modules.items() if k in pre_keys)
    total = sum(modules.values())
    scratch = total - pretrained
    return {
        "modules": modules,
        "pretrained": pretrained,
        "scratch": scratch,
        "total": total,
        "scratch_fraction": scratch / total if total else 0.0,
    }


def scratch_reduction(baseline_cfg, imted_cfg):
    """Fractional drop in scratch-initialised parameters going from baseline to imTED."""
    b = count_params(baseline_cfg)["scratch"]
    return 1.0 - count_params(imted_cfg)["scratch"] / b


# -- FLOPs ---------------------------------------------------------------------------

def _block_macs(tokens, d, mlp_ratio):
    h = int(d * mlp_ratio)
    proj = tokens * (3 * d * d + d * d + 2 * d * h)
    attn = 2 * tokens * tokens * d  # scores + weighted sum
    return proj + attn


def decoder_layer_flops(dim, tokens, num_rois, mlp_ratio=4.0, flops_per_mac=1):
    return flops_per_mac * num_rois * _block_macs(tokens, dim, mlp_ratio)


def matmul_flops(m, k, n, flops_per_mac=2):
    return flops_per_mac * m * k * n


def estimate_flops(cfg: DetectorConfig, input_hw=(800, 1344), num_rois=512, flops_per_mac=1):
    """Per-stage multiply-accumulate counts scaled by ``flops_per_mac``.

    The default of one FLOP per MAC follows the usual profiler convention;
    pass 2 to count multiplies and adds separately. Stages are ``backbone``,
    ``fpn_mfm`` (adapter, FPN and the per-RoI modulator), ``rpn`` and ``head``.
    RoI-Align sampling and elementwise activations are not counted.
    """
    v, hd = cfg.vit, cfg.head
    H, W = input_hw
    p = v.patch_size
    gh, gw = -(-H // p), -(-W // p)
    N = gh * gw
    D, F, K, A = v.embed_dim, cfg.fpn_dim, cfg.num_classes, cfg.num_anchors
    backbone = N * 3 * p * p * D + v.depth * _block_macs(N, D, v.mlp_ratio)

    grids = [(gh * 4, gw * 4), (gh * 2, gw * 2), (gh, gw), (gh // 2, gw // 2)]
    neck = 4 * D * (gh * gw + 2 * gh * 2 * gw) + 4 * D * gh * gw  # depthwise 2x2 transposed convs
    neck += sum(a * b for a, b in grids) * D * F
    fpn = sum(a * b for a, b in grids) * (F * F + 9 * F * F)
    rpn = sum(a * b for a, b in grids) * (9 * F * F + F * A + 4 * F * A)

    t = hd.roi_size ** 2
    box_out = 4 if hd.class_agnostic else 4 * K
    if hd.is_decoder:
        Dd = hd.decoder_dim
        per_roi = t * cfg.roi_in_dim * Dd + hd.decoder_depth * _block_macs(t, Dd, hd.decoder_mlp_ratio)
        per_roi += Dd * (K + 1 + box_out)
    else:
        dims = [cfg.roi_in_dim] + [hd.conv_dim] * hd.num_convs
        per_roi = sum(t * 9 * a * b for a, b in zip(dims[:-1], dims[1:]))
        fdims = [dims[-1] * t] + [hd.fc_dim] * hd.num_fcs
        per_roi += sum(a * b for a, b in zip(fdims[:-1], fdims[1:]))
        per_roi += fdims[-1] * (K + 1 + box_out)
    head = num_rois * per_roi
    mfm = num_rois * t * (D + (F * D if F != D else 0)) if hd.use_mfm else 0

    stages = {"backbone": backbone, "fpn_mfm": neck + fpn + mfm, "rpn": rpn, "head": head}
    stages = {k: flops_per_mac * int(val) for k, val in stages.items()}
    stages["total"] = sum(stages.values())
    return stages
