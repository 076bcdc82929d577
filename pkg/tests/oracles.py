"""Independent brute-force reference implementations used only by the tests."""

from __future__ import annotations

import math
from collections import deque
from itertools import product

import numpy as np


def point_segment_distance(px, py, ax, ay, bx, by):
    """Scalar point-to-segment distance, written from scratch."""
    dx, dy = bx - ax, by - ay
    if dx == 0 and dy == 0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)
    t = min(1.0, max(0.0, t))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


def rasterize_cells(polylines, rows, cols, res, thickness):
    """Per-cell loop over every segment; priority ped(1) > divider(0) > boundary(2)."""
    rank = {2: 1, 0: 2, 1: 3}
    out = np.full((rows, cols), 3, dtype=int)
    for i, j in product(range(rows), range(cols)):
        x, y = (j - cols // 2) * res, (i - rows // 2) * res
        best = None
        for pts, cls in polylines:
            for a, b in zip(pts[:-1], pts[1:]):
                if point_segment_distance(x, y, *a, *b) <= thickness / 2:
                    if best is None or rank[cls] > rank[best]:
                        best = cls
        if best is not None:
            out[i, j] = best
    return out


def conv2d_loops(x, k, bias, stride, pad):
    """Direct nested-loop cross-correlation, ``H x W x Cin`` input."""
    h, w, cin = x.shape
    kk, _, _, cout = k.shape
    xp = np.zeros((h + 2 * pad, w + 2 * pad, cin))
    xp[pad:pad + h, pad:pad + w] = x
    ho, wo = (h + 2 * pad - kk) // stride + 1, (w + 2 * pad - kk) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i, j, o in product(range(ho), range(wo), range(cout)):
        acc = bias[o]
        for a, b, c in product(range(kk), range(kk), range(cin)):
            acc += xp[i * stride + a, j * stride + b, c] * k[a, b, c, o]
        out[i, j, o] = acc
    return out


def conv_transpose2x_loops(x, k, bias):
    """Scatter form of a kernel-2 stride-2 transposed conv: input cell (i, j) feeds (2i+a, 2j+b)."""
    h, w, cin = x.shape
    cout = k.shape[3]
    out = np.tile(np.asarray(bias, float), (2 * h, 2 * w, 1))
    for i, j, a, b, c, o in product(range(h), range(w), range(2), range(2), range(cin), range(cout)):
        out[2 * i + a, 2 * j + b, o] += x[i, j, c] * k[a, b, c, o]
    return out


def matmul_loops(a, b):
    n, m = a.shape
    _, p = b.shape
    out = np.zeros((n, p))
    for i, j in product(range(n), range(p)):
        out[i, j] = math.fsum(a[i, k] * b[k, j] for k in range(m))
    return out


def softmax_row(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = math.fsum(e)
    return [x / s for x in e]


def layernorm_row(v, eps):
    n = len(v)
    mu = math.fsum(v) / n
    var = math.fsum((x - mu) ** 2 for x in v) / n
    return [(x - mu) / math.sqrt(var + eps) for x in v]


def flood_fill_components(mask, connectivity=8):
    """BFS labelling; labels in row-major order of each component's first cell."""
    rows, cols = mask.shape
    labels = np.zeros((rows, cols), dtype=int)
    if connectivity == 8:
        nbrs = [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1) if a or b]
    else:
        nbrs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    n = 0
    for i in range(rows):
        for j in range(cols):
            if mask[i, j] and not labels[i, j]:
                n += 1
                labels[i, j] = n
                q = deque([(i, j)])
                while q:
                    a, b = q.popleft()
                    for da, db in nbrs:
                        u, v = a + da, b + db
                        if 0 <= u < rows and 0 <= v < cols and mask[u, v] and not labels[u, v]:
                            labels[u, v] = n
                            q.append((u, v))
    return labels, n


def iou_cells(a, b):
    inter = union = 0
    for x, y in zip(np.asarray(a).ravel(), np.asarray(b).ravel()):
        inter += bool(x) and bool(y)
        union += bool(x) or bool(y)
    return 1.0 if union == 0 else inter / union


def chamfer_bruteforce(a, b):
    da = [min(math.dist(p, q) for q in b) for p in a]
    db = [min(math.dist(p, q) for q in a) for p in b]
    return 0.5 * (math.fsum(da) / len(da) + math.fsum(db) / len(db))


def greedy_tp_flags(confidences, scene_of_pred, cd, cd_thr, gate=None):
    """Greedy-by-confidence matching from a precomputed CD matrix (pred x gt).

    ``gate[i][j]`` (optional) must be true for a pair to be eligible. Returns the
    TP flags in descending-confidence order.
    """
    order = sorted(range(len(confidences)), key=lambda i: (-confidences[i], i))
    taken = set()
    flags = []
    for i in order:
        best = None
        for j in range(len(cd[i])):
            if j in taken or cd[i][j] is None or cd[i][j] > cd_thr:
                continue
            if gate is not None and not gate[i][j]:
                continue
            if best is None or cd[i][j] < cd[i][best]:
                best = j
        if best is not None:
            taken.add(best)
        flags.append(best is not None)
    return flags


def ap_by_recall_levels(flags, num_gt):
    """AP as the sum over each recall increase of the best precision at or beyond it."""
    if num_gt == 0:
        return 1.0 if not flags else 0.0
    points = []
    tp = 0
    for k, f in enumerate(flags, 1):
        tp += f
        points.append((tp / num_gt, tp / k))
    ap, prev_r = 0.0, 0.0
    for idx, (r, _) in enumerate(points):
        if r > prev_r:
            best_p = max(p for rr, p in points[idx:])
            ap += (r - prev_r) * best_p
            prev_r = r
    return ap


def rdp_recursive(points, eps):
    """Textbook recursive Ramer-Douglas-Peucker."""
    pts = [tuple(p) for p in points]
    if len(pts) < 3:
        return pts
    a, b = pts[0], pts[-1]
    dmax, idx = -1.0, 0
    for k in range(1, len(pts) - 1):
        d = point_segment_distance(*pts[k], *a, *b)
        if d > dmax:
            dmax, idx = d, k
    if dmax > eps:
        left = rdp_recursive(pts[:idx + 1], eps)
        right = rdp_recursive(pts[idx:], eps)
        return left[:-1] + right
    return [a, b]


def liang_barsky(p0, p1, box):
    """Parametric clipping written independently: returns clipped endpoints or None."""
    xmin, xmax, ymin, ymax = box
    x0, y0 = p0
    x1, y1 = p1
    t0, t1 = 0.0, 1.0
    dx, dy = x1 - x0, y1 - y0
    for p, q in ((-dx, x0 - xmin), (dx, xmax - x0), (-dy, y0 - ymin), (dy, ymax - y0)):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    return (x0 + t0 * dx, y0 + t0 * dy), (x0 + t1 * dx, y0 + t1 * dy)


def cross_attention_loops(q, f, wq, bq, wk, bk, wv, bv, wp, bp, heads, eps):
    """One head at a time with explicit loops, then residual + layernorm per row."""
    nq, c, nk = len(q), len(q[0]), len(f)
    d = c // heads
    lin = lambda x, w, b: [[math.fsum(x[i][a] * w[a][j] for a in range(len(w))) + b[j]
                            for j in range(len(b))] for i in range(len(x))]
    qp, kp, vp = lin(q, wq, bq), lin(f, wk, bk), lin(f, wv, bv)
    concat = [[0.0] * c for _ in range(nq)]
    for h in range(heads):
        sl = range(h * d, (h + 1) * d)
        for i in range(nq):
            scores = [math.fsum(qp[i][t] * kp[j][t] for t in sl) / math.sqrt(d) for j in range(nk)]
            w = softmax_row(scores)
            for t in sl:
                concat[i][t] = math.fsum(w[j] * vp[j][t] for j in range(nk))
    proj = lin(concat, wp, bp)
    return [layernorm_row([q[i][t] + proj[i][t] for t in range(c)], eps) for i in range(nq)]


def zhang_suen_loops(mask):
    """Textbook Zhang-Suen: per sub-iteration, flag cells with scalar tests, then delete."""
    img = [[bool(v) for v in row] for row in np.asarray(mask)]
    h, w = len(img), len(img[0]) if img else 0
    at = lambda i, j: 1 if 0 <= i < h and 0 <= j < w and img[i][j] else 0
    changed = True
    while changed:
        changed = False
        for step in (0, 1):
            flagged = []
            for i in range(h):
                for j in range(w):
                    if not img[i][j]:
                        continue
                    p = [at(i - 1, j), at(i - 1, j + 1), at(i, j + 1), at(i + 1, j + 1),
                         at(i + 1, j), at(i + 1, j - 1), at(i, j - 1), at(i - 1, j - 1)]
                    b = sum(p)
                    a = sum(1 for k in range(8) if p[k] == 0 and p[(k + 1) % 8] == 1)
                    p2, p4, p6, p8 = p[0], p[2], p[4], p[6]
                    if step == 0:
                        ok = p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
                    else:
                        ok = p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0
                    if 2 <= b <= 6 and a == 1 and ok:
                        flagged.append((i, j))
            for i, j in flagged:
                img[i][j] = False
            changed = changed or bool(flagged)
    return np.array(img, dtype=bool).reshape(np.shape(mask))
