"""ROC curves, AUC and membership advantage."""
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError


def _check_labels(labels):
    labels = np.asarray(labels).ravel()
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("need at least one positive and one negative label")
    return labels.astype(bool), n_pos, n_neg


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[i] produces point i+1; the (0,0) point has none
    auc: float
    n_pos: int
    n_neg: int

    @property
    def points(self):
        return np.column_stack([self.fpr, self.tpr])

    @property
    def oriented_auc(self):
        """AUC after flipping the score orientation if that ranks better."""
        return max(self.auc, 1.0 - self.auc)

    def trapezoid_auc(self):
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2))


def rank_auc(scores, labels):
    """Pr[random positive outscores random negative], ties counted 1/2."""
    labels, n_pos, n_neg = _check_labels(labels)
    ranks = rankdata(np.asarray(scores, dtype=float).ravel())
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_auc(scores, labels):
    """ROC curve over every distinct threshold (claim when score >= threshold)."""
    labels, n_pos, n_neg = _check_labels(labels)
    scores = np.asarray(scores, dtype=float).ravel()
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    if not np.isfinite(scores).all():
        raise MetricError("scores must be finite")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last_of_run]
    fp = (last_of_run + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return RocCurve(fpr, tpr, s[last_of_run], rank_auc(scores, labels), n_pos, n_neg)


def confusion_rates(decisions, labels):
    """(TPR, FPR) of hard 0/1 decisions."""
    labels, n_pos, n_neg = _check_labels(labels)
    d = np.asarray(decisions).ravel().astype(bool)
    if d.shape != labels.shape:
        raise MetricError("decisions and labels differ in length")
    return float((d & labels).sum() / n_pos), float((d & ~labels).sum() / n_neg)


def membership_advantage(decisions, labels):
    """Empirical TPR - FPR."""
    tpr, fpr = confusion_rates(decisions, labels)
    return tpr - fpr


def tpr_at_fpr(curve, max_fpr):
    """Largest TPR reachable on the curve without exceeding ``max_fpr``."""
    ok = curve.fpr <= max_fpr + 1e-12
    return float(curve.tpr[ok].max())
