"""Shared numeric oracles: central finite differences and brute-force
re-implementations of AP, NMS, and quadrature used to check the hand-written
code paths.
"""

import math

import numpy as np

from calign.boxes import iou_matrix, pair_iou


def central_diff(f, x, step=1e-3):
    """Dense central-difference gradient of scalar f at x."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return g.reshape(x.shape)


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-6, what="grad"):
    """Elementwise |a - n| <= rtol*max(|a|,|n|) + atol with a useful message."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    assert a.shape == n.shape, f"{what}: shape {a.shape} vs {n.shape}"
    err = np.abs(a - n)
    tol = rtol * np.maximum(np.abs(a), np.abs(n)) + atol
    if np.any(err > tol):
        i = int(np.argmax(err - tol))
        raise AssertionError(
            f"{what}[{i}]: analytic {a[i]!r} vs finite-diff {n[i]!r} (err {err[i]:.3e})"
        )


def staircase_ap(dets, gts, iou_thresh=0.5):
    """All-point AP by direct staircase integration (independent of the
    suffix-envelope loop in the library): for each distinct recall level,
    interpolated precision = max precision over ranks at recall >= level.
    """
    if not gts or not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    ranked = [dets[i] for i in order]
    matched = [False] * len(gts)
    flags = []
    for det in ranked:
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if matched[j] or gt.image_id != det.image_id or gt.class_id != det.class_id:
                continue
            v = pair_iou(det.box, gt.box)
            if v >= iou_thresh and v > best_iou:
                best_j, best_iou = j, v
        flags.append(best_j >= 0)
        if best_j >= 0:
            matched[best_j] = True
    n_gt = len(gts)
    tp = 0
    recalls, precisions = [], []
    for k, is_tp in enumerate(flags, start=1):
        tp += int(is_tp)
        recalls.append(tp / n_gt)
        precisions.append(tp / k)
    levels = []
    for r in recalls:
        if not levels or r > levels[-1]:
            levels.append(r)
    ap, prev = 0.0, 0.0
    for r in levels:
        p = max(pr for pr, rc in zip(precisions, recalls) if rc >= r)
        ap += (r - prev) * p
        prev = r
    return ap


def greedy_nms_oracle(boxes, scores, thresh):
    """Literal greedy suppression: repeatedly take the best unsuppressed box."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    alive = list(range(len(scores)))
    kept = []
    while alive:
        best = alive[0]
        for i in alive[1:]:
            if scores[i] > scores[best]:
                best = i
        kept.append(best)
        alive.remove(best)
        ious = iou_matrix(boxes[alive], boxes[best : best + 1]).reshape(-1)
        alive = [i for i, v in zip(alive, ious) if v <= thresh]
    return kept


def gauss_legendre_nll(y, alpha, beta, nodes=256):
    """Plain Gauss-Legendre marginal NLL on (0,1); valid for alpha,beta >= 1."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    p = 0.5 * (x + 1.0)
    w = 0.5 * w
    log_b = math.lgamma(alpha) + math.lgamma(beta) - math.lgamma(alpha + beta)
    dens = np.exp((alpha - 1.0) * np.log(p) + (beta - 1.0) * np.log1p(-p) - log_b)
    lik = p if y == 1 else (1.0 - p)
    return -math.log(float(np.sum(w * dens * lik)))


def random_detections(rng, n_images=2, max_dets=10, max_gts=5, classes=(0, 1)):
    """Small random detection/GT instance on an integer grid (forces ties)."""
    from calign.boxes import Box
    from calign.metrics import Detection, GroundTruth

    def rand_box():
        x1 = int(rng.integers(0, 8))
        y1 = int(rng.integers(0, 8))
        return Box(x1, y1, x1 + int(rng.integers(1, 5)), y1 + int(rng.integers(1, 5)))

    gts, dets = [], []
    for img in range(n_images):
        image_id = f"im{img}"
        for _ in range(int(rng.integers(0, max_gts + 1))):
            gts.append(GroundTruth(image_id, int(rng.choice(classes)), rand_box()))
    for _ in range(int(rng.integers(0, max_dets + 1))):
        image_id = f"im{int(rng.integers(0, n_images))}"
        if gts and rng.random() < 0.5:
            g = gts[int(rng.integers(0, len(gts)))]
            box = g.box if rng.random() < 0.5 else rand_box()
            cls = g.class_id if rng.random() < 0.7 else int(rng.choice(classes))
            dets.append(Detection(g.image_id, cls, box, round(float(rng.random()), 1)))
        else:
            dets.append(
                Detection(image_id, int(rng.choice(classes)), rand_box(), round(float(rng.random()), 1))
            )
    return dets, gts
