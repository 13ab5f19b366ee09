"""Threshold-free detection metrics.

In-distribution samples are the positive class and larger scores mean
"more in-distribution" throughout.
"""

import math

import numpy as np


def _check(pos, neg):
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError(f"need nonempty score lists, got {pos.size} positives and {neg.size} negatives")
    return pos, neg


def average_ranks(values):
    """1-based ranks with ties sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_vals)) + 1]
    ends = np.r_[starts[1:], len(values)]
    ranks = np.empty(len(values))
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    return ranks


def auroc(scores_pos, scores_neg):
    """P(pos > neg) + 0.5 P(pos = neg), via the rank-sum identity."""
    pos, neg = _check(scores_pos, scores_neg)
    ranks = average_ranks(np.concatenate([pos, neg]))
    n_p, n_n = pos.size, neg.size
    return float((ranks[:n_p].sum() - n_p * (n_p + 1) / 2.0) / (n_p * n_n))


def _threshold_counts(pos, neg):
    """Cumulative (tp, fp) at each distinct threshold, highest threshold first."""
    scores = np.concatenate([pos, neg])
    is_pos = np.r_[np.ones(pos.size), np.zeros(neg.size)]
    order = np.argsort(-scores, kind="mergesort")
    scores, is_pos = scores[order], is_pos[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(scores)), scores.size - 1]
    tp = np.cumsum(is_pos)[last_of_group]
    fp = np.cumsum(1.0 - is_pos)[last_of_group]
    return scores[last_of_group], tp, fp


def auprc(scores_pos, scores_neg):
    """Step-wise area: sum over thresholds of precision times recall increment.

    The terms are summed with ``math.fsum`` so the result does not depend on
    summation order.
    """
    pos, neg = _check(scores_pos, scores_neg)
    _, tp, fp = _threshold_counts(pos, neg)
    precision = tp / (tp + fp)
    recall = tp / pos.size
    return math.fsum(np.diff(np.r_[0.0, recall]) * precision)


def fpr_at_tpr(scores_pos, scores_neg, tpr_target=0.8):
    """FPR at the highest threshold whose TPR reaches ``tpr_target`` (score >= threshold is positive)."""
    pos, neg = _check(scores_pos, scores_neg)
    _, tp, fp = _threshold_counts(pos, neg)
    need = tpr_target * pos.size - 1e-9 * pos.size
    first = int(np.argmax(tp >= need))
    return float(fp[first] / neg.size)


def detection_metrics(scores_pos, scores_neg):
    return {
        "auroc": auroc(scores_pos, scores_neg),
        "auprc": auprc(scores_pos, scores_neg),
        "fpr80": fpr_at_tpr(scores_pos, scores_neg, 0.8),
    }
