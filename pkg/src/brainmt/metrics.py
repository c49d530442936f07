"""Regression and classification metrics."""

from __future__ import annotations

import numpy as np


def evaluate_regression(preds, targets) -> dict[str, float]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    err = p - t
    pc, tc = p - p.mean(), t - t.mean()
    den = np.sqrt((pc * pc).sum() * (tc * tc).sum())
    r = float((pc * tc).sum() / den) if den > 0 else 0.0
    return {"mse": float(np.mean(err * err)), "mae": float(np.mean(np.abs(err))), "pearson_r": r}


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative; ties
    count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def evaluate_classification(logits, labels, threshold: float = 0.0) -> dict[str, float]:
    z = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    pred = (z > threshold).astype(int)
    recalls = [np.mean(pred[y == c] == c) for c in (0, 1) if np.any(y == c)]
    return {
        "acc": float(np.mean(pred == y)),
        "bacc": float(np.mean(recalls)),
        "auroc": auroc(z, y),
    }
