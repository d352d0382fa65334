"""Detector heads: RoI-Align, the multi-scale feature modulator, the migrated
transformer-decoder head, the conv baseline head and the detection losses."""
import numpy as np

from .backbone import sincos_pos_embed
from .numerics import ops
from .numerics.nn import Block, Conv2d, LayerNorm, Linear, Module, xavier_uniform, zeros
from .numerics.tensor import DimensionError, Tensor
from .proposals import Box


def _rois_array(boxes):
    if isinstance(boxes, Box):
        return np.array([[0.0, boxes.x1, boxes.y1, boxes.x2, boxes.y2]])
    rois = np.asarray(boxes, dtype=np.float64)
    if rois.ndim == 1:
        rois = rois[None]
    if rois.shape[1] == 4:
        rois = np.concatenate([np.zeros((rois.shape[0], 1)), rois], axis=1)
    return rois


def roi_align_points(rois, output_size=7, stride=16, sampling_ratio=2, min_size=1e-3):
    """Sample locations in feature-cell coordinates, shape (R, out, out, s*s) each."""
    scale = 1.0 / stride
    x1 = rois[:, 1] * scale - 0.5
    y1 = rois[:, 2] * scale - 0.5
    w = np.maximum((rois[:, 3] - rois[:, 1]) * scale, min_size)
    h = np.maximum((rois[:, 4] - rois[:, 2]) * scale, min_size)
    s = sampling_ratio
    grid = np.arange(output_size)[:, None] + (np.arange(s) + 0.5)[None, :] / s  # (out, s)
    fy = grid.reshape(-1)  # fractional bin offsets, ordered (bin, sub)
    ys = y1[:, None] + fy[None, :] * (h / output_size)[:, None]  # (R, out*s)
    xs = x1[:, None] + fy[None, :] * (w / output_size)[:, None]
    R = rois.shape[0]
    ys = ys.reshape(R, output_size, 1, s, 1)
    xs = xs.reshape(R, 1, output_size, 1, s)
    shape = (R, output_size, output_size, s, s)
    ys = np.broadcast_to(ys, shape).reshape(R, output_size, output_size, s * s)
    xs = np.broadcast_to(xs, shape).reshape(R, output_size, output_size, s * s)
    bidx = np.broadcast_to(rois[:, 0].astype(np.int64)[:, None, None, None], ys.shape)
    return bidx, ys, xs


def roi_align(feature_map, boxes, output_size=7, stride=16, sampling_ratio=2):
    """Average of ``sampling_ratio**2`` bilinear samples per output bin.

    ``feature_map`` is (N, C, H, W) or (C, H, W); ``boxes`` are (R, 5) rows of
    (batch, x1, y1, x2, y2) in image pixels, (R, 4) rows for batch 0, or a Box.
    Returns (R, C, out, out), differentiable w.r.t. the feature map.
    """
    single = feature_map.ndim == 3
    if single:
        feature_map = feature_map.reshape(1, *feature_map.shape)
    rois = _rois_array(boxes)
    R = rois.shape[0]
    C = feature_map.shape[1]
    if R == 0:
        return Tensor._wrap(np.zeros((0, C, output_size, output_size), dtype=feature_map.dtype))
    bidx, ys, xs = roi_align_points(rois, output_size, stride, sampling_ratio)
    vals = ops.bilinear_sample(feature_map, bidx.ravel(), ys.ravel(), xs.ravel())
    vals = vals.reshape(R, output_size, output_size, sampling_ratio ** 2, C).mean(axis=3)
    return vals.transpose(0, 3, 1, 2)


def select_fpn_level(box, canonical_size=224.0, canonical_level=2, num_levels=4):
    """Pyramid level index (0 = stride 4) for a box: ``floor(k0 + log2(sqrt(area) / s0))``."""
    boxes = np.atleast_2d(box.as_array() if isinstance(box, Box) else np.asarray(box, dtype=np.float64))
    lv = assign_levels(boxes[:, -4:], canonical_size, canonical_level, num_levels)
    return int(lv[0]) if isinstance(box, Box) or np.ndim(box) == 1 else lv


def assign_levels(boxes, canonical_size=224.0, canonical_level=2, num_levels=4):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scale = np.sqrt(np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None))
    lv = np.floor(canonical_level + np.log2(scale / canonical_size + 1e-8))
    return np.clip(lv, 0, num_levels - 1).astype(np.int64)


def multilevel_roi_align(pyramid, rois, levels, output_size=7, strides=(4, 8, 16, 32)):
    """RoI-Align each RoI on its assigned pyramid level; output keeps RoI order."""
    R = rois.shape[0]
    parts, order = [], []
    for lv, (feat, stride) in enumerate(zip(pyramid, strides)):
        idx = np.flatnonzero(levels == lv)
        if idx.size == 0:
            continue
        parts.append(roi_align(feat, rois[idx], output_size, stride))
        order.append(idx)
    if not parts:
        C = pyramid[0].shape[1]
        return Tensor._wrap(np.zeros((0, C, output_size, output_size), dtype=pyramid[0].dtype))
    out = ops.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    order = np.concatenate(order)
    if np.array_equal(order, np.arange(R)):
        return out
    return out[np.argsort(order, kind="stable")]


def mfm_modulate(f_ss, f_ms, alpha):
    """``F = F_ss + alpha * F_ms`` with one weight per channel."""
    if f_ss.shape != f_ms.shape:
        raise DimensionError(f"mfm_modulate: F_ss {f_ss.shape} vs F_ms {f_ms.shape}")
    C = f_ss.shape[-3]
    if alpha.shape != (C,):
        raise DimensionError(f"mfm_modulate: alpha {alpha.shape} vs {C} channels")
    return f_ss + alpha.reshape(C, 1, 1) * f_ms


class MFM(Module):
    """Channel-wise modulation of single-scale RoI features by FPN RoI features.

    When the FPN width differs from the encoder width, the FPN features are
    first mapped to the encoder width by a per-position linear layer.
    """

    def __init__(self, channels, ms_channels, rng):
        self.alpha = zeros((channels,))
        self.proj = None
        if ms_channels != channels:
            # unit-gain start so alpha receives a usable gradient from the first step
            self.proj = Linear(ms_channels, channels, rng)
            self.proj.weight = xavier_uniform(rng, (channels, ms_channels), ms_channels, channels)

    def forward(self, f_ss, f_ms):
        if self.proj is not None:
            f_ms = self.proj(f_ms.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)
        return mfm_modulate(f_ss, f_ms, self.alpha)


def _output_layers(head, dim, num_classes, class_agnostic, rng):
    head.cls_score = Linear(dim, num_classes + 1, rng, std=0.01)
    head.bbox_pred = Linear(dim, 4 if class_agnostic else 4 * num_classes, rng, std=0.001)


class DecoderHead(Module):
    """Transformer-decoder head over the 7x7 RoI token grid, mean-pooled."""

    def __init__(self, in_dim, cfg, num_classes, rng):
        dim = cfg.decoder_dim
        self.decoder_embed = Linear(in_dim, dim, rng)
        self.blocks = [Block(dim, cfg.decoder_heads, cfg.decoder_mlp_ratio, rng) for _ in range(cfg.decoder_depth)]
        self.norm = LayerNorm(dim)
        _output_layers(self, dim, num_classes, cfg.class_agnostic, rng)
        self.pos_embed = sincos_pos_embed(dim, (cfg.roi_size, cfg.roi_size))

    def tokens(self, roi):
        R, C, H, W = roi.shape
        x = self.decoder_embed(roi.reshape(R, C, H * W).transpose(0, 2, 1))
        x = x + Tensor._wrap(self.pos_embed.astype(x.dtype, copy=False))
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def forward(self, roi):
        pooled = self.tokens(roi).mean(axis=1)
        return self.cls_score(pooled), self.bbox_pred(pooled)


class ConvHead(Module):
    """Baseline head: 3x3 conv stack, fully connected layers, output layers."""

    def __init__(self, in_dim, cfg, num_classes, rng):
        dims = [in_dim] + [cfg.conv_dim] * cfg.num_convs
        self.convs = [Conv2d(a, b, 3, rng, padding=1) for a, b in zip(dims[:-1], dims[1:])]
        flat = dims[-1] * cfg.roi_size * cfg.roi_size
        fdims = [flat] + [cfg.fc_dim] * cfg.num_fcs
        self.fcs = [Linear(a, b, rng) for a, b in zip(fdims[:-1], fdims[1:])]
        _output_layers(self, fdims[-1], num_classes, cfg.class_agnostic, rng)

    def forward(self, roi):
        x = roi
        for conv in self.convs:
            x = ops.relu(conv(x))
        x = x.reshape(x.shape[0], -1)
        for fc in self.fcs:
            x = ops.relu(fc(x))
        return self.cls_score(x), self.bbox_pred(x)


def decoder_head_forward(roi, head):
    return head(roi)


def conv_head_forward(roi, head):
    return head(roi)


def detection_losses(logits, deltas, labels, reg_targets, num_classes, beta=1.0):
    """Cross-entropy over K+1 classes plus smooth-L1 on positives.

    ``labels`` use ``num_classes`` for background; both terms are averaged over
    the sampled RoIs. Returns a dict with ``cls``, ``reg`` and ``total``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = max(labels.shape[0], 1)
    cls = ops.cross_entropy(logits, labels)
    pos = np.flatnonzero(labels < num_classes)
    if pos.size == 0:
        reg = (deltas * 0.0).sum()
    else:
        if deltas.shape[1] == 4:
            d = deltas[pos]
        else:
            d = deltas.reshape(deltas.shape[0], -1, 4)[pos, labels[pos]]
        target = np.asarray(reg_targets, dtype=deltas.dtype).reshape(-1, 4)
        if target.shape[0] == labels.shape[0]:
            target = target[pos]
        reg = ops.smooth_l1(d, Tensor._wrap(target), beta).sum() * (1.0 / n)
    return {"cls": cls, "reg": reg, "total": cls + reg}

