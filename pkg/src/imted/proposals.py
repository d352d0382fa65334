"""Randomly initialised proposal path: FPN, RPN, anchors, box coding, NMS and
training-target assignment.

Boxes are (x1, y1, x2, y2) in image pixels with area ``(x2-x1)*(y2-y1)``.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import _accel
from .numerics import ops
from .numerics.nn import Conv2d, Module
from .numerics.tensor import DimensionError

DEFAULT_CLAMP = math.log(1000.0 / 16)


@dataclass
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0
    class_id: int = -1

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @property
    def area(self):
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)


def _arr(boxes):
    if isinstance(boxes, Box):
        return boxes.as_array()[None]
    if isinstance(boxes, (list, tuple)) and boxes and isinstance(boxes[0], Box):
        return np.stack([b.as_array() for b in boxes])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def iou(a, b):
    """IoU of two boxes; zero when either box is degenerate."""
    return float(iou_matrix(_arr(a), _arr(b))[0, 0])


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    ok = (union > 0) & (area_a[:, None] > 0) & (area_b[None, :] > 0)
    out[ok] = inter[ok] / union[ok]
    return out


def nms(boxes, scores, iou_thresh):
    """Greedy NMS; returns kept indices ordered by descending score.

    Equal scores are visited in ascending index order.
    """
    boxes = _arr(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    keep = _accel.nms_sorted(boxes[order], iou_thresh)
    return order[keep]


def encode_boxes(ref, target, stds=(1.0, 1.0, 1.0, 1.0)):
    """Deltas (dx, dy, dw, dh) taking ``ref`` boxes onto ``target`` boxes."""
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 4)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    d = np.stack([(tx - rx) / rw, (ty - ry) / rh, np.log(tw / rw), np.log(th / rh)], axis=1)
    return d / np.asarray(stds)


def decode_boxes(ref, deltas, stds=(1.0, 1.0, 1.0, 1.0), image_shape=None, clamp=DEFAULT_CLAMP):
    """Apply deltas to reference boxes; size deltas are clamped, output clipped to the image."""
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4) * np.asarray(stds)
    if d.shape[0] != ref.shape[0]:
        raise DimensionError(f"decode_boxes: {ref.shape[0]} boxes vs {d.shape[0]} deltas")
    w = ref[:, 2] - ref[:, 0]
    h = ref[:, 3] - ref[:, 1]
    cx = ref[:, 0] + 0.5 * w
    cy = ref[:, 1] + 0.5 * h
    dw = np.minimum(d[:, 2], clamp)
    dh = np.minimum(d[:, 3], clamp)
    pcx = cx + d[:, 0] * w
    pcy = cy + d[:, 1] * h
    pw = w * np.exp(dw)
    ph = h * np.exp(dh)
    out = np.stack([pcx - 0.5 * pw, pcy - 0.5 * ph, pcx + 0.5 * pw, pcy + 0.5 * ph], axis=1)
    if image_shape is not None:
        H, W = image_shape
        out[:, 0::2] = out[:, 0::2].clip(0, W)
        out[:, 1::2] = out[:, 1::2].clip(0, H)
    return out


# -- anchors ---------------------------------------------------------------------

STRIDES = (4, 8, 16, 32)


@dataclass
class AnchorSet:
    strides: tuple
    sizes: tuple
    ratios: tuple
    grids: list  # per level (H, W)
    anchors: list  # per level (H*W*A, 4), ordered (row, col, ratio)

    @property
    def per_level_counts(self):
        return [a.shape[0] for a in self.anchors]

    def all(self):
        return np.concatenate(self.anchors, axis=0)


def level_anchors(stride, size, ratios, grid):
    H, W = grid
    base = []
    for r in ratios:  # r = h / w, area fixed to size**2
        w = size / math.sqrt(r)
        h = size * math.sqrt(r)
        base.append([-0.5 * w, -0.5 * h, 0.5 * w, 0.5 * h])
    base = np.asarray(base)
    ys = (np.arange(H) + 0.5) * stride
    xs = (np.arange(W) + 0.5) * stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    shifts = np.stack([cx, cy, cx, cy], axis=-1).reshape(-1, 1, 4)
    return (shifts + base[None]).reshape(-1, 4)


def make_anchors(grids, scale=8.0, ratios=(0.5, 1.0, 2.0), strides=STRIDES):
    sizes = tuple(scale * s for s in strides)
    anchors = [level_anchors(s, size, ratios, g) for s, size, g in zip(strides, sizes, grids)]
    return AnchorSet(tuple(strides), sizes, tuple(ratios), [tuple(g) for g in grids], anchors)


# -- FPN / RPN -------------------------------------------------------------------

class FPN(Module):
    """Lateral 1x1 convs, nearest top-down upsample-add, 3x3 smoothing."""

    def __init__(self, in_dim, dim, rng, num_levels=4):
        self.lateral = [Conv2d(in_dim, dim, 1, rng) for _ in range(num_levels)]
        self.smooth = [Conv2d(dim, dim, 3, rng, padding=1) for _ in range(num_levels)]

    def forward(self, maps):
        if len(maps) != len(self.lateral):
            raise DimensionError(f"FPN: expected {len(self.lateral)} levels, got {len(maps)}")
        for m, lat in zip(maps, self.lateral):
            if m.shape[1] != lat.weight.shape[1]:
                raise DimensionError(f"FPN: channel mismatch {m.shape} vs lateral {lat.weight.shape}")
        lat = [conv(m) for conv, m in zip(self.lateral, maps)]
        out = [None] * len(lat)
        top = lat[-1]
        out[-1] = self.smooth[-1](top)
        for i in range(len(lat) - 2, -1, -1):
            up = ops.upsample_nearest2x(top)
            if up.shape[2:] != lat[i].shape[2:]:
                up = up[:, :, :lat[i].shape[2], :lat[i].shape[3]]
            top = lat[i] + up
            out[i] = self.smooth[i](top)
        return out


def build_fpn(maps, fpn):
    return fpn(maps)


class RPNHead(Module):
    """Shared 3x3 conv + ReLU, then objectness and box-delta 1x1 convs, per level."""

    def __init__(self, dim, num_anchors, rng):
        self.num_anchors = num_anchors
        self.conv = Conv2d(dim, dim, 3, rng, padding=1)
        self.cls = Conv2d(dim, num_anchors, 1, rng)
        self.reg = Conv2d(dim, 4 * num_anchors, 1, rng)

    def forward(self, pyramid):
        """Per level: logits (B, H*W*A) and deltas (B, H*W*A, 4), anchor-ordered."""
        A = self.num_anchors
        logits, deltas = [], []
        for p in pyramid:
            B, _, H, W = p.shape
            t = ops.relu(self.conv(p))
            logits.append(self.cls(t).transpose(0, 2, 3, 1).reshape(B, H * W * A))
            deltas.append(self.reg(t).transpose(0, 2, 3, 1).reshape(B, H * W * A, 4))
        return logits, deltas


def rpn_forward(pyramid, rpn):
    return rpn(pyramid)


def generate_proposals(logits, deltas, anchors, image_shape, pre_nms_topk, post_nms_topk,
                       nms_thresh, min_size=1e-3):
    """Per-image proposals from per-level numpy scores/deltas: top-k, decode, NMS per level, merge."""
    boxes_all, scores_all = [], []
    for lg, dl, an in zip(logits, deltas, anchors):
        k = min(pre_nms_topk, lg.shape[0])
        top = np.argsort(-lg, kind="stable")[:k]
        boxes = decode_boxes(an[top], dl[top], image_shape=image_shape)
        scores = lg[top]
        ok = ((boxes[:, 2] - boxes[:, 0]) > min_size) & ((boxes[:, 3] - boxes[:, 1]) > min_size)
        boxes, scores = boxes[ok], scores[ok]
        keep = nms(boxes, scores, nms_thresh)
        boxes_all.append(boxes[keep])
        scores_all.append(scores[keep])
    boxes = np.concatenate(boxes_all, axis=0)
    scores = np.concatenate(scores_all, axis=0)
    order = np.argsort(-scores, kind="stable")[:post_nms_topk]
    return boxes[order], scores[order]


# -- target assignment -------------------------------------------------------------

@dataclass
class Assignment:
    indices: np.ndarray  # sampled box indices (positives first)
    matched_gt: np.ndarray  # per sampled box: gt index, -1 for negatives
    reg_targets: np.ndarray  # per sampled box: encoded deltas (zeros for negatives)

    @property
    def positive(self):
        return self.matched_gt >= 0

    def labels(self, gt_classes, background):
        gt_classes = np.asarray(gt_classes)
        out = np.full(self.indices.shape[0], background, dtype=np.int64)
        pos = self.positive
        out[pos] = gt_classes[self.matched_gt[pos]]
        return out


def match_boxes(boxes, gt, pos_thresh, neg_thresh):
    """Max-IoU matching with forced best match per gt.

    Returns per-box gt index (>= 0 positive), -1 negative, -2 ignored.
    """
    n = boxes.shape[0]
    if gt.shape[0] == 0:
        return np.full(n, -1, dtype=np.int64)
    ious = iou_matrix(boxes, gt)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    match = np.full(n, -2, dtype=np.int64)
    match[best_iou < neg_thresh] = -1
    pos = best_iou >= pos_thresh
    match[pos] = best_gt[pos]
    for j in range(gt.shape[0]):
        col = ious[:, j]
        if col.max() > 0:
            match[int(col.argmax())] = j
    return match


def assign_targets(boxes, gt, pos_thresh, neg_thresh, sample_size, pos_fraction, rng,
                   stds=(1.0, 1.0, 1.0, 1.0)):
    if not 0.0 <= neg_thresh <= pos_thresh <= 1.0:
        raise ValueError("thresholds must satisfy 0 <= neg <= pos <= 1")
    boxes = _arr(boxes)
    gt = _arr(gt)
    match = match_boxes(boxes, gt, pos_thresh, neg_thresh)
    pos_idx = np.flatnonzero(match >= 0)
    neg_idx = np.flatnonzero(match == -1)
    n_pos = min(pos_idx.size, int(sample_size * pos_fraction))
    if pos_idx.size > n_pos:
        pos_idx = np.sort(rng.choice(pos_idx, n_pos, replace=False))
    n_neg = min(neg_idx.size, sample_size - pos_idx.size)
    if neg_idx.size > n_neg:
        neg_idx = np.sort(rng.choice(neg_idx, n_neg, replace=False))
    idx = np.concatenate([pos_idx, neg_idx]).astype(np.int64)
    matched = np.concatenate([match[pos_idx], np.full(neg_idx.size, -1, dtype=np.int64)])
    targets = np.zeros((idx.size, 4))
    if pos_idx.size:
        targets[:pos_idx.size] = encode_boxes(boxes[pos_idx], gt[match[pos_idx]], stds)
    return Assignment(idx, matched, targets)
