"""Pure-Python implementations of the hot kernels.

These mirror ``_kernels_cy.pyx`` function for function and are used when the
compiled extension is unavailable (or ``GAZEHOI_PURE_PYTHON=1`` is set).
"""
import math

import numpy as np

INF = math.inf


def lap_solve(cost):
    """Shortest-augmenting-path linear assignment (Jonker-Volgenant family).

    ``cost`` must have no more rows than columns. Infinite entries are
    forbidden cells. Returns the column assigned to each row, or ``None`` when
    every row cannot be assigned through finite cells.
    """
    cost = np.asarray(cost, dtype=np.float64)
    nr, nc = cost.shape
    rows = cost.tolist()
    u = [0.0] * nr
    v = [0.0] * nc
    col4row = [-1] * nr
    row4col = [-1] * nc
    path = [-1] * nc

    for cur_row in range(nr):
        shortest = [INF] * nc
        scanned_rows = [False] * nr
        scanned_cols = [False] * nc
        remaining = list(range(nc - 1, -1, -1))
        num_remaining = nc
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            scanned_rows[i] = True
            row = rows[i]
            ui = u[i]
            index = -1
            lowest = INF
            for it in range(num_remaining):
                j = remaining[it]
                r = min_val + row[j] - ui - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                sj = shortest[j]
                if sj < lowest or (sj == lowest and row4col[j] == -1):
                    lowest = sj
                    index = it
            min_val = lowest
            if min_val == INF:
                return None
            j = remaining[index]
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            scanned_cols[j] = True
            num_remaining -= 1
            remaining[index] = remaining[num_remaining]

        u[cur_row] += min_val
        for i in range(nr):
            if scanned_rows[i] and i != cur_row:
                u[i] += min_val - shortest[col4row[i]]
        for j in range(nc):
            if scanned_cols[j]:
                v[j] -= min_val - shortest[j]

        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    return np.asarray(col4row, dtype=np.int64)


def _iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def pairwise_iou(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def match_ranked(pred_h, pred_o, gt_lo, gt_hi, gt_h, gt_o, thr):
    """Greedy true-positive flags for predictions already sorted by rank.

    Prediction ``p`` may only match ground truth rows ``gt_lo[p]:gt_hi[p]``
    (its frame). Among unmatched rows whose human and object IoU both exceed
    ``thr`` it takes the one with the largest ``min(iou_h, iou_o)``.
    """
    pred_h = np.asarray(pred_h, dtype=np.float64).tolist()
    pred_o = np.asarray(pred_o, dtype=np.float64).tolist()
    gt_h = np.asarray(gt_h, dtype=np.float64).tolist()
    gt_o = np.asarray(gt_o, dtype=np.float64).tolist()
    used = [False] * len(gt_h)
    flags = np.zeros(len(pred_h), dtype=np.uint8)
    for p in range(len(pred_h)):
        best = -1
        best_ov = -1.0
        for g in range(int(gt_lo[p]), int(gt_hi[p])):
            if used[g]:
                continue
            ih = _iou(pred_h[p], gt_h[g])
            if ih <= thr:
                continue
            io = _iou(pred_o[p], gt_o[g])
            if io <= thr:
                continue
            ov = min(ih, io)
            if ov > best_ov:
                best_ov = ov
                best = g
        if best >= 0:
            used[best] = True
            flags[p] = 1
    return flags


def all_point_ap(tp, n_gt):
    """Area under the interpolated precision-recall step curve."""
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt <= 0:
        return math.nan
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    rec = ctp / n_gt
    prec = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
