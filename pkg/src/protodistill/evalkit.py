"""Accuracy, Inception-Score analog, Frechet feature distance, Welch's t-test.

The trained teacher stands in for Inception-V3: its softmax feeds the score
and its penultimate activations feed the Frechet distance. Values are only
comparable with each other, never with published Inception numbers.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .dataio import ImageDataset
from .ttm import ClassifierNet, accuracy, images01

__all__ = [
    "FeatureStats", "accuracy", "feature_stats", "frechet_distance", "inception_score",
    "inception_score_from_probs", "metrics_csv", "welch_ttest",
]


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def inception_score_from_probs(probs: np.ndarray, splits: int = 1) -> float:
    """``exp(mean KL(p(y|x) || p(y)))`` with ``p(y)`` the batch marginal.

    With ``splits > 1`` the score is averaged over contiguous chunks.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError("inception score needs a non-empty (N, K) batch")
    if splits < 1 or splits > len(probs):
        raise ValueError(f"splits must be in [1, {len(probs)}], got {splits}")
    scores = []
    for chunk in np.array_split(probs, splits):
        # shifted mean: exactly the common row when all rows agree
        marginal = chunk[0] + (chunk - chunk[0]).mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(chunk > 0, chunk * (np.log(chunk) - np.log(marginal)), 0.0)
        kl = np.maximum(terms.sum(axis=1), 0.0)
        scores.append(math.exp(kl.mean()))
    return float(np.mean(scores))


def inception_score(classifier: ClassifierNet, images: np.ndarray, splits: int = 1) -> float:
    if len(images) == 0:
        raise ValueError("inception score needs at least one image")
    return inception_score_from_probs(_softmax(classifier.logits(images)), splits)


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        F = len(self.mean)
        if self.cov.shape != (F, F):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean width {F}")


def stats_from_features(features: np.ndarray) -> FeatureStats:
    features = np.asarray(features, dtype=np.float64)
    if len(features) < 2:
        raise ValueError(f"need at least 2 samples for a covariance, got {len(features)}")
    mu = features.mean(axis=0)
    centered = features - mu
    return FeatureStats(mu, centered.T @ centered / (len(features) - 1))


def feature_stats(classifier: ClassifierNet, images: np.ndarray) -> FeatureStats:
    if len(images) < 2:
        raise ValueError(f"need at least 2 images, got {len(images)}")
    return stats_from_features(classifier.features(images))


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature widths differ: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    diff = a.mean - b.mean
    root_a = _sqrtm_psd(a.cov)
    cross = _sqrtm_psd(root_a @ b.cov @ root_a)
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross)
    return float(max(value, 0.0))


def welch_ttest(sample_a, sample_b) -> tuple[float, float]:
    """Welch's t statistic and two-sided p-value (Welch-Satterthwaite df)."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError(f"each sample needs at least 2 values, got {len(a)} and {len(b)}")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    if va + vb == 0:
        raise ValueError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return float(t), min(p, 1.0)


def metrics_csv(rows: list[tuple[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for name, value in rows:
        w.writerow([name, repr(float(value))])
    return buf.getvalue()


def quality_metrics(teacher: ClassifierNet, distilled: ImageDataset, real: ImageDataset
                    ) -> list[tuple[str, float]]:
    fake = images01(distilled)
    return [
        ("inception_score", inception_score(teacher, fake)),
        ("frechet_distance", frechet_distance(feature_stats(teacher, images01(real)),
                                              feature_stats(teacher, fake))),
        ("teacher_accuracy_on_distilled", accuracy(teacher, distilled)),
    ]
