"""Hot inner loops: bilinear gather/scatter (RoI-Align) and greedy NMS.

Every kernel has a numba ``@njit`` version and a pure-numpy version with the
same contract. The numba path is used when numba imports cleanly and the
``IMTED_DISABLE_NUMBA`` environment variable is unset (or "0").
"""
import os

import numpy as np

try:
    import numba
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("IMTED_DISABLE_NUMBA", "0") in ("", "0")


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# bilinear sampling with RoI-Align boundary rules
#
# A sample at (y, x) in feature-cell coordinates (integer = cell centre) reads
# zero when it falls more than one cell outside the map; otherwise it is
# clamped into the map and interpolated from its four neighbours.
# ---------------------------------------------------------------------------

def _bilinear_weights_np(ys, xs, H, W):
    valid = (ys >= -1.0) & (ys <= H) & (xs >= -1.0) & (xs <= W)
    y = np.maximum(ys, 0.0)
    x = np.maximum(xs, 0.0)
    y_low = np.floor(y).astype(np.int64)
    x_low = np.floor(x).astype(np.int64)
    top_y = y_low >= H - 1
    top_x = x_low >= W - 1
    y_low = np.where(top_y, H - 1, y_low)
    x_low = np.where(top_x, W - 1, x_low)
    y = np.where(top_y, y_low.astype(y.dtype), y)
    x = np.where(top_x, x_low.astype(x.dtype), x)
    y_high = np.where(top_y, y_low, y_low + 1)
    x_high = np.where(top_x, x_low, x_low + 1)
    ly = y - y_low
    lx = x - x_low
    hy = 1.0 - ly
    hx = 1.0 - lx
    w = np.stack([hy * hx, hy * lx, ly * hx, ly * lx], axis=1)
    w[~valid] = 0.0
    return y_low, y_high, x_low, x_high, w


def bilinear_gather_numpy(feat, bidx, ys, xs):
    N, C, H, W = feat.shape
    yl, yh, xl, xh, w = _bilinear_weights_np(ys, xs, H, W)
    w = w.astype(feat.dtype)
    out = (w[:, 0:1] * feat[bidx, :, yl, xl]
           + w[:, 1:2] * feat[bidx, :, yl, xh]
           + w[:, 2:3] * feat[bidx, :, yh, xl]
           + w[:, 3:4] * feat[bidx, :, yh, xh])
    return out


def bilinear_scatter_numpy(grad, bidx, ys, xs, shape):
    N, C, H, W = shape
    out = np.zeros(shape, dtype=grad.dtype)
    yl, yh, xl, xh, w = _bilinear_weights_np(ys, xs, H, W)
    w = w.astype(grad.dtype)
    ch = np.arange(C)[None, :]
    b = bidx[:, None]
    for k, (yy, xx) in enumerate(((yl, xl), (yl, xh), (yh, xl), (yh, xh))):
        np.add.at(out, (b, ch, yy[:, None], xx[:, None]), w[:, k:k + 1] * grad)
    return out


def nms_numpy(boxes, thresh):
    """Greedy suppression over boxes already sorted by descending score."""
    n = boxes.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    suppressed = np.zeros(n, dtype=np.bool_)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    for i in range(n):
        if suppressed[i]:
            continue
        keep[i] = True
        rest = np.arange(i + 1, n)
        rest = rest[~suppressed[rest]]
        if rest.size == 0:
            continue
        iw = np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0])
        ih = np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = areas[i] + areas[rest] - inter
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        suppressed[rest[iou > thresh]] = True
    return keep


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _weights_one(y, x, H, W):
        if y < -1.0 or y > H or x < -1.0 or x > W:
            return 0, 0, 0, 0, 0.0, 0.0, 0.0, 0.0
        if y < 0.0:
            y = 0.0
        if x < 0.0:
            x = 0.0
        y_low = int(y)
        x_low = int(x)
        if y_low >= H - 1:
            y_low = H - 1
            y_high = H - 1
            y = float(y_low)
        else:
            y_high = y_low + 1
        if x_low >= W - 1:
            x_low = W - 1
            x_high = W - 1
            x = float(x_low)
        else:
            x_high = x_low + 1
        ly = y - y_low
        lx = x - x_low
        hy = 1.0 - ly
        hx = 1.0 - lx
        return y_low, y_high, x_low, x_high, hy * hx, hy * lx, ly * hx, ly * lx

    @numba.njit(cache=True)
    def bilinear_gather_numba(feat, bidx, ys, xs):
        N, C, H, W = feat.shape
        P = ys.shape[0]
        out = np.zeros((P, C), dtype=feat.dtype)
        for p in range(P):
            yl, yh, xl, xh, w1, w2, w3, w4 = _weights_one(ys[p], xs[p], H, W)
            if w1 == 0.0 and w2 == 0.0 and w3 == 0.0 and w4 == 0.0:
                continue
            b = bidx[p]
            for c in range(C):
                out[p, c] = (w1 * feat[b, c, yl, xl] + w2 * feat[b, c, yl, xh]
                             + w3 * feat[b, c, yh, xl] + w4 * feat[b, c, yh, xh])
        return out

    @numba.njit(cache=True)
    def _scatter_numba(grad, bidx, ys, xs, out):
        N, C, H, W = out.shape
        P = ys.shape[0]
        for p in range(P):
            yl, yh, xl, xh, w1, w2, w3, w4 = _weights_one(ys[p], xs[p], H, W)
            b = bidx[p]
            for c in range(C):
                g = grad[p, c]
                out[b, c, yl, xl] += w1 * g
                out[b, c, yl, xh] += w2 * g
                out[b, c, yh, xl] += w3 * g
                out[b, c, yh, xh] += w4 * g
        return out

    def bilinear_scatter_numba(grad, bidx, ys, xs, shape):
        out = np.zeros(shape, dtype=grad.dtype)
        return _scatter_numba(np.ascontiguousarray(grad), bidx, ys, xs, out)

    @numba.njit(cache=True)
    def nms_numba(boxes, thresh):
        n = boxes.shape[0]
        keep = np.zeros(n, dtype=np.bool_)
        suppressed = np.zeros(n, dtype=np.bool_)
        for i in range(n):
            if suppressed[i]:
                continue
            keep[i] = True
            ax1, ay1, ax2, ay2 = boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]
            area_a = (ax2 - ax1) * (ay2 - ay1)
            for j in range(i + 1, n):
                if suppressed[j]:
                    continue
                iw = min(ax2, boxes[j, 2]) - max(ax1, boxes[j, 0])
                ih = min(ay2, boxes[j, 3]) - max(ay1, boxes[j, 1])
                if iw <= 0.0 or ih <= 0.0:
                    continue
                inter = iw * ih
                union = area_a + (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1]) - inter
                if union > 0.0 and inter / union > thresh:
                    suppressed[j] = True
        return keep


def _prep(ys, xs, bidx, dtype):
    return (np.ascontiguousarray(bidx, dtype=np.int64),
            np.ascontiguousarray(ys, dtype=dtype),
            np.ascontiguousarray(xs, dtype=dtype))


def bilinear_gather(feat, bidx, ys, xs):
    """Sample ``feat[b, :, y, x]`` bilinearly for every point; returns (P, C)."""
    feat = np.ascontiguousarray(feat)
    bidx, ys, xs = _prep(ys, xs, bidx, np.float64)
    if USE_NUMBA:
        return bilinear_gather_numba(feat, bidx, ys, xs)
    return bilinear_gather_numpy(feat, bidx, ys, xs)


def bilinear_scatter(grad, bidx, ys, xs, shape):
    """Adjoint of :func:`bilinear_gather`."""
    bidx, ys, xs = _prep(ys, xs, bidx, np.float64)
    if USE_NUMBA:
        return bilinear_scatter_numba(grad, bidx, ys, xs, tuple(shape))
    return bilinear_scatter_numpy(grad, bidx, ys, xs, tuple(shape))


def nms_sorted(boxes, thresh):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64)
    if USE_NUMBA:
        return nms_numba(boxes, float(thresh))
    return nms_numpy(boxes, float(thresh))
