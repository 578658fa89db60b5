"""Accuracy reports, the one-sample proportion test, and feature-divergence
diagnostics (a PCA projection plus a scalar discrepancy score).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import LabeledSet


@dataclass
class EvalReport:
    split: str
    n: int
    accuracy: float
    confusion: np.ndarray  # rows: gold, columns: predicted
    model_hash: str = ""

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "n", "accuracy", "model_hash"])
            w.writerow([self.split, self.n, repr(self.accuracy), self.model_hash])
            w.writerow([])
            k = self.confusion.shape[0]
            w.writerow(["gold\\pred"] + [str(j) for j in range(k)])
            for i, row in enumerate(self.confusion):
                w.writerow([i] + [int(v) for v in row])
        return path


def accuracy_from_predictions(predictions, labels, num_classes: int | None = None, split: str = "", model_hash: str = "") -> EvalReport:
    pred = np.asarray(predictions, dtype=np.int64)
    gold = np.asarray(labels, dtype=np.int64)
    if len(gold) == 0:
        raise ValueError("cannot evaluate on an empty set")
    if pred.shape != gold.shape:
        raise ValueError("predictions and labels differ in length")
    k = num_classes or int(max(pred.max(), gold.max())) + 1
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (gold, pred), 1)
    return EvalReport(split, len(gold), float(np.trace(confusion)) / len(gold), confusion, model_hash)


def accuracy(model, labeled: LabeledSet, model_hash: str = "") -> EvalReport:
    """Accuracy of ``model.predict_label`` (``T = 1``) on a labeled split."""
    if len(labeled) == 0:
        raise ValueError(f"{labeled.name}: cannot evaluate on an empty set")
    pred = model.predict_label(labeled)
    k = getattr(getattr(model, "config", None), "num_classes", None)
    if k is None and hasattr(model, "members"):
        k = model.members[0].config.num_classes
    return accuracy_from_predictions(pred, labeled.labels, k, labeled.name, model_hash)


@dataclass
class ProportionTest:
    z: float
    p_value: float
    significant: bool


def proportion_test(acc_a: float, acc_ref: float, n: int, level: float = 0.05) -> ProportionTest:
    """One-sided one-sample z test of ``acc_a`` against a reference rate."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 < acc_ref < 1:
        raise ValueError("reference accuracy must lie strictly between 0 and 1")
    z = (acc_a - acc_ref) / math.sqrt(acc_ref * (1 - acc_ref) / n)
    p = 0.5 * math.erfc(z / math.sqrt(2))
    return ProportionTest(z, p, p < level)


# ---------------------------------------------------------------------------
# Feature projection
# ---------------------------------------------------------------------------


@dataclass
class ProjectionResult:
    coords: np.ndarray  # (N, 2)
    splits: list[str]
    components: np.ndarray  # (2, D), orthonormal rows
    explained: np.ndarray  # (2,) fractions of total variance
    mean: np.ndarray

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features) - self.mean) @ self.components.T

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "split", "x", "y"])
            for i, (s, (x, y)) in enumerate(zip(self.splits, self.coords)):
                w.writerow([i, s, repr(float(x)), repr(float(y))])
            w.writerow([])
            w.writerow(["explained_pc1", "explained_pc2"])
            w.writerow([repr(float(v)) for v in self.explained])
        return path

    def write_svg(self, path: str | Path, size: int = 400) -> Path:
        """Scatter plot coloured by split (first split red, second green)."""
        palette = ["#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd"]
        names = list(dict.fromkeys(self.splits))
        lo = self.coords.min(axis=0)
        span = np.maximum(self.coords.max(axis=0) - lo, 1e-12)
        pad = 10
        scaled = pad + (self.coords - lo) / span * (size - 2 * pad)
        lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">']
        lines.append(f'<rect width="{size}" height="{size}" fill="white"/>')
        for (x, y), s in zip(scaled, self.splits):
            colour = palette[names.index(s) % len(palette)]
            lines.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="2" fill="{colour}" fill-opacity="0.6"/>')
        for i, s in enumerate(names):
            colour = palette[i % len(palette)]
            lines.append(f'<text x="{pad}" y="{pad + 12 * (i + 1)}" font-size="11" fill="{colour}">{s}</text>')
        lines.append("</svg>")
        path = Path(path)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def _power_iteration(cov: np.ndarray, start: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, float]:
    v = start / np.linalg.norm(start)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w /= norm
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    return v, float(v @ cov @ v)


def project_features_2d(
    groups: dict[str, np.ndarray] | Sequence[tuple[str, np.ndarray]],
    tol: float = 1e-9,
    max_iter: int = 10000,
    seed: int = 0,
) -> ProjectionResult:
    """Mean-centred PCA onto two components by power iteration with deflation."""
    items = list(groups.items()) if isinstance(groups, dict) else list(groups)
    feats = np.concatenate([np.asarray(f, dtype=np.float64) for _, f in items])
    splits = [name for name, f in items for _ in range(len(f))]
    if feats.ndim != 2 or len(feats) < 3:
        raise ValueError("need at least 3 feature vectors of equal dimension")
    mean = feats.mean(axis=0)
    centred = feats - mean
    cov = centred.T @ centred / len(feats)
    total = float(np.trace(cov))
    if total <= 0:
        raise ValueError("features have zero variance")
    start = np.random.default_rng(seed).standard_normal(cov.shape[0])
    v1, l1 = _power_iteration(cov, start, tol, max_iter)
    deflated = cov - l1 * np.outer(v1, v1)
    start2 = start - (start @ v1) * v1
    if np.linalg.norm(start2) < 1e-12:
        start2 = np.roll(start, 1)
        start2 -= (start2 @ v1) * v1
    v2, l2 = _power_iteration(deflated, start2, tol, max_iter)
    v2 -= (v2 @ v1) * v1  # keep exact orthogonality after round-off
    v2 /= np.linalg.norm(v2)
    components = np.stack([v1, v2])
    explained = np.clip(np.array([l1, max(l2, 0.0)]) / total, 0.0, 1.0)
    return ProjectionResult(centred @ components.T, splits, components, explained, mean)


def divergence_score(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Discrepancy between two feature samples after joint standardisation.

    Squared distance of the means plus the summed absolute difference of
    per-dimension variances.  Dimensions constant over both samples are
    ignored.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both samples must be non-empty")
    both = np.concatenate([a, b])
    mu, sd = both.mean(axis=0), both.std(axis=0)
    keep = sd > 0
    a = (a[:, keep] - mu[keep]) / sd[keep]
    b = (b[:, keep] - mu[keep]) / sd[keep]
    mean_term = np.sum((a.mean(axis=0) - b.mean(axis=0)) ** 2)
    var_term = np.sum(np.abs(a.var(axis=0) - b.var(axis=0)))
    return float(mean_term + var_term)
