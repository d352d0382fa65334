"""COCO-style box AP: greedy score-ordered matching, 101-point interpolation."""
import numpy as np

from ..proposals import iou_matrix

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def _match(det_boxes, gt_boxes, thresh):
    """True-positive flags for score-sorted detections against one image's gt."""
    tp = np.zeros(det_boxes.shape[0], dtype=bool)
    if gt_boxes.shape[0] == 0 or det_boxes.shape[0] == 0:
        return tp
    ious = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(gt_boxes.shape[0], dtype=bool)
    for d in range(det_boxes.shape[0]):
        best, best_iou = -1, min(thresh, 1 - 1e-10)
        for g in range(gt_boxes.shape[0]):
            if taken[g] or ious[d, g] < best_iou:
                continue
            best, best_iou = g, ious[d, g]
        if best >= 0:
            taken[best] = True
            tp[d] = True
    return tp


def average_precision(tp, scores, num_gt):
    """Interpolated AP from per-detection TP flags; ``scores`` fix the global order."""
    if num_gt == 0:
        return float("nan")
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order]
    tpc = np.cumsum(tp)
    fpc = np.cumsum(~tp)
    recall = tpc / num_gt
    precision = tpc / np.maximum(tpc + fpc, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1] if precision.size else precision
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.array([precision[i] if i < precision.size else 0.0 for i in idx])
    return float(vals.mean())


def evaluate_detections(detections, gt_boxes, gt_labels, num_classes, max_dets=100):
    """``detections``: per image dict with boxes/scores/labels.

    Returns AP (mean over IoU 0.50:0.95 and classes), AP50, AP75 and the
    per-class AP; classes without ground truth are left out of the means.
    """
    per_class = np.full((num_classes, IOU_THRESHOLDS.size), np.nan)
    for k in range(num_classes):
        num_gt = sum(int((np.asarray(lab) == k).sum()) for lab in gt_labels)
        if num_gt == 0:
            continue
        for t_i, t in enumerate(IOU_THRESHOLDS):
            flags, scores = [], []
            for det, gb, gl in zip(detections, gt_boxes, gt_labels):
                s = np.asarray(det["scores"], np.float64)
                order = np.argsort(-s, kind="mergesort")
                sel = order[np.asarray(det["labels"])[order] == k][:max_dets]
                db = np.asarray(det["boxes"], np.float64).reshape(-1, 4)[sel]
                g = np.asarray(gb, np.float64).reshape(-1, 4)[np.asarray(gl) == k]
                flags.append(_match(db, g, t))
                scores.append(s[sel])
            per_class[k, t_i] = average_precision(np.concatenate(flags), np.concatenate(scores), num_gt)
    valid = ~np.isnan(per_class[:, 0])
    if not valid.any():
        return {"AP": 0.0, "AP50": 0.0, "AP75": 0.0, "per_class": [float("nan")] * num_classes}
    return {
        "AP": float(per_class[valid].mean()),
        "AP50": float(per_class[valid, 0].mean()),
        "AP75": float(per_class[valid, 5].mean()),
        "per_class": [float(v) for v in per_class.mean(axis=1)],
    }


def evaluate(detector, ds, batch_size=16):
    """Run ``detector.predict`` over ``ds`` (eval mode) and score it."""
    was_training = detector.training
    detector.eval()
    dets = []
    try:
        for s in range(0, len(ds), batch_size):
            dets.extend(detector.predict(ds.images[s:s + batch_size]))
    finally:
        detector.train(was_training)
    return evaluate_detections(dets, ds.boxes, ds.labels, ds.num_classes, detector.cfg.max_detections)
