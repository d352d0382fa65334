"""Two-stage detector assembled from backbone, proposal path and head."""
import zlib

import numpy as np

from .backbone import MultiScaleAdapter, VisionTransformer
from .head import MFM, ConvHead, DecoderHead, assign_levels, detection_losses, multilevel_roi_align, roi_align
from .numerics import ops
from .numerics.nn import Module
from .numerics.tensor import Tensor, default_dtype, no_grad
from .proposals import FPN, STRIDES, RPNHead, assign_targets, decode_boxes, generate_proposals, make_anchors, nms

RPN_BETA = 1.0 / 9.0


def module_rng(seed, name):
    """Independent generator per named sub-module, so adding one module never
    shifts the initial values of another."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def pad_images(images, multiple=16):
    """Stack (3, H, W) arrays into a zero-padded batch whose sides are multiples of ``multiple``."""
    H = max(im.shape[1] for im in images)
    W = max(im.shape[2] for im in images)
    H = -(-H // multiple) * multiple
    W = -(-W // multiple) * multiple
    out = np.zeros((len(images), 3, H, W), dtype=default_dtype())
    for i, im in enumerate(images):
        out[i, :, :im.shape[1], :im.shape[2]] = im
    return out


class Detector(Module):
    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.backbone = VisionTransformer(cfg.vit, module_rng(seed, "backbone"))
        self.neck = MultiScaleAdapter(cfg.vit.embed_dim, cfg.fpn_dim, module_rng(seed, "neck"))
        self.fpn = FPN(cfg.fpn_dim, cfg.fpn_dim, module_rng(seed, "fpn"))
        self.rpn = RPNHead(cfg.fpn_dim, cfg.num_anchors, module_rng(seed, "rpn"))
        head_cls = DecoderHead if cfg.head.is_decoder else ConvHead
        self.roi_head = head_cls(cfg.roi_in_dim, cfg.head, cfg.num_classes, module_rng(seed, "roi_head"))
        self.mfm = MFM(cfg.vit.embed_dim, cfg.fpn_dim, module_rng(seed, "mfm")) if cfg.head.use_mfm else None
        self._anchor_cache = {}

    # -- shared pieces ----------------------------------------------------------

    def features(self, images):
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images))
        enc = self.backbone(images)
        pyramid = self.fpn(self.neck(enc.taps))
        return enc, pyramid

    def anchors(self, pyramid):
        grids = tuple(tuple(p.shape[2:]) for p in pyramid)
        if grids not in self._anchor_cache:
            self._anchor_cache[grids] = make_anchors(grids, self.cfg.anchor_scale, self.cfg.anchor_ratios)
        return self._anchor_cache[grids]

    def roi_features(self, enc, pyramid, rois):
        cfg = self.cfg
        size = cfg.head.roi_size
        levels = None
        if cfg.head.use_fpn_in_feature_path or self.mfm is not None:
            levels = assign_levels(rois[:, 1:], cfg.canonical_box_size)
        if cfg.head.use_fpn_in_feature_path:
            return multilevel_roi_align(pyramid, rois, levels, size, STRIDES)
        f_ss = roi_align(enc.final_map, rois, size, cfg.vit.patch_size)
        if self.mfm is None:
            return f_ss
        f_ms = multilevel_roi_align(pyramid, rois, levels, size, STRIDES)
        return self.mfm(f_ss, f_ms)

    def forward_rois(self, images, rois):
        """Head outputs for fixed RoIs (R, 5): (batch, x1, y1, x2, y2)."""
        enc, pyramid = self.features(images)
        return self.roi_head(self.roi_features(enc, pyramid, np.asarray(rois, dtype=np.float64)))

    def _proposals(self, logits, deltas, anchors, image_shape, training):
        cfg = self.cfg
        pre = cfg.train_pre_nms_topk if training else cfg.test_pre_nms_topk
        post = cfg.train_post_nms_topk if training else cfg.test_post_nms_topk
        B = logits[0].shape[0]
        out = []
        for b in range(B):
            boxes, scores = generate_proposals([lg.data[b] for lg in logits], [d.data[b] for d in deltas],
                                               anchors.anchors, image_shape, pre, post, cfg.rpn_nms_thresh)
            out.append((boxes, scores))
        return out

    # -- training ---------------------------------------------------------------

    def forward_train(self, images, gt_boxes, gt_labels, rng):
        """Joint RPN + head losses for one batch; returns a dict of scalar Tensors."""
        cfg = self.cfg
        images = Tensor(np.asarray(images))
        B, _, H, W = images.shape
        enc, pyramid = self.features(images)
        logits, deltas = self.rpn(pyramid)
        anchors = self.anchors(pyramid)
        all_anchors = anchors.all()
        A = all_anchors.shape[0]
        logit_cat = ops.concat(logits, axis=1).reshape(B * A)
        delta_cat = ops.concat(deltas, axis=1).reshape(B * A, 4)

        sel, obj, pos_sel, pos_tgt = [], [], [], []
        for b in range(B):
            asg = assign_targets(all_anchors, gt_boxes[b], cfg.rpn_pos_thresh, cfg.rpn_neg_thresh,
                                 cfg.rpn_sample_size, cfg.rpn_pos_fraction, rng)
            sel.append(asg.indices + b * A)
            obj.append(asg.positive.astype(np.float64))
            pos_sel.append(asg.indices[asg.positive] + b * A)
            pos_tgt.append(asg.reg_targets[asg.positive])
        sel = np.concatenate(sel)
        obj = np.concatenate(obj)
        pos_sel = np.concatenate(pos_sel)
        pos_tgt = np.concatenate(pos_tgt)
        rpn_cls = ops.bce_with_logits(logit_cat[sel], obj)
        if pos_sel.size:
            rpn_reg = ops.smooth_l1(delta_cat[pos_sel], Tensor._wrap(pos_tgt.astype(delta_cat.dtype)),
                                    RPN_BETA).sum() * (1.0 / max(sel.size, 1))
        else:
            rpn_reg = (delta_cat * 0.0).sum()

        proposals = self._proposals(logits, deltas, anchors, (H, W), training=True)
        rois, labels, targets = [], [], []
        for b in range(B):
            gt = np.asarray(gt_boxes[b], dtype=np.float64).reshape(-1, 4)
            cand = np.concatenate([proposals[b][0], gt], axis=0)
            asg = assign_targets(cand, gt, cfg.roi_fg_thresh, cfg.roi_fg_thresh, cfg.roi_sample_size,
                                 cfg.roi_pos_fraction, rng, stds=cfg.bbox_stds)
            boxes = cand[asg.indices]
            rois.append(np.concatenate([np.full((boxes.shape[0], 1), b), boxes], axis=1))
            labels.append(asg.labels(gt_labels[b], cfg.num_classes))
            targets.append(asg.reg_targets)
        rois = np.concatenate(rois)
        labels = np.concatenate(labels)
        targets = np.concatenate(targets)
        cls_logits, box_deltas = self.roi_head(self.roi_features(enc, pyramid, rois))
        det = detection_losses(cls_logits, box_deltas, labels, targets, cfg.num_classes, cfg.smooth_l1_beta)
        losses = {"rpn_cls": rpn_cls, "rpn_reg": rpn_reg, "roi_cls": det["cls"], "roi_reg": det["reg"]}
        losses["total"] = rpn_cls + rpn_reg + det["cls"] + det["reg"]
        return losses

    # -- inference --------------------------------------------------------------

    def predict(self, images):
        """Per-image dicts with ``boxes`` (n, 4), ``scores`` (n,), ``labels`` (n,)."""
        cfg = self.cfg
        with no_grad():
            images = Tensor(np.asarray(images))
            B, _, H, W = images.shape
            enc, pyramid = self.features(images)
            logits, deltas = self.rpn(pyramid)
            proposals = self._proposals(logits, deltas, self.anchors(pyramid), (H, W), training=False)
            rois = np.concatenate([np.concatenate([np.full((p[0].shape[0], 1), b), p[0]], axis=1)
                                   for b, p in enumerate(proposals)]) if proposals else np.zeros((0, 5))
            if rois.shape[0] == 0:
                return [_empty() for _ in range(B)]
            cls_logits, box_deltas = self.roi_head(self.roi_features(enc, pyramid, rois))
            probs = ops.softmax(cls_logits, axis=-1).data.astype(np.float64)
            dl = box_deltas.data.astype(np.float64)
        K = cfg.num_classes
        results = []
        for b in range(B):
            m = rois[:, 0] == b
            props, p, d = rois[m, 1:], probs[m], dl[m]
            boxes_k, scores_k, labels_k = [], [], []
            for k in range(K):
                dk = d if d.shape[1] == 4 else d[:, 4 * k:4 * k + 4]
                s = p[:, k]
                ok = s > cfg.score_thresh
                if not ok.any():
                    continue
                bx = decode_boxes(props[ok], dk[ok], cfg.bbox_stds, image_shape=(H, W))
                keep = nms(bx, s[ok], cfg.test_nms_thresh)
                boxes_k.append(bx[keep])
                scores_k.append(s[ok][keep])
                labels_k.append(np.full(keep.size, k, dtype=np.int64))
            if not boxes_k:
                results.append(_empty())
                continue
            boxes = np.concatenate(boxes_k)
            scores = np.concatenate(scores_k)
            labels = np.concatenate(labels_k)
            order = np.argsort(-scores, kind="stable")[:cfg.max_detections]
            results.append({"boxes": boxes[order], "scores": scores[order], "labels": labels[order]})
        return results


def _empty():
    return {"boxes": np.zeros((0, 4)), "scores": np.zeros(0), "labels": np.zeros(0, dtype=np.int64)}
