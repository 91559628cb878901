"""Brute-force reference computations, independent of the package's fast paths."""

from fractions import Fraction

import numpy as np


def auc_pairs(scores, flags):
    """O(n^2) pair counting: concordant pairs + half of tied pairs."""
    pos = [s for s, k in zip(scores, flags) if k == 1]
    neg = [s for s, k in zip(scores, flags) if k == 0]
    twice = 0
    for p in pos:
        for q in neg:
            twice += 2 if p > q else (1 if p == q else 0)
    return float(Fraction(twice, 2 * len(pos) * len(neg)))


def _sweep(scores, flags):
    """(threshold, TP, predicted) for each distinct score, highest first, by direct counting."""
    out = []
    for t in sorted(set(scores), reverse=True):
        predicted = [k for s, k in zip(scores, flags) if s >= t]
        out.append((t, sum(predicted), len(predicted)))
    return out


def ap_sweep(scores, flags):
    total_pos = sum(flags)
    ap = Fraction(0)
    prev_recall = Fraction(0)
    for _, tp, k in _sweep(scores, flags):
        recall = Fraction(tp, total_pos)
        ap += (recall - prev_recall) * Fraction(tp, k)
        prev_recall = recall
    return float(ap)


def precision_at_recall_sweep(scores, flags, target=0.95):
    total_pos = sum(flags)
    for _, tp, k in _sweep(scores, flags):
        if tp / total_pos >= target:
            return tp / k
    raise AssertionError("recall target never reached")


def central_differences(f, params, h=1e-4):
    """Gradient of scalar ``f()`` w.r.t. every entry of every array in ``params`` (perturbed in place)."""
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = f()
            p[idx] = old - h
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for name in numeric:
        a, n = np.asarray(analytic[name]), numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
