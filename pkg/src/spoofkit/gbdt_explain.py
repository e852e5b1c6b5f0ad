"""Interpretability for the boosted-tree classifier: permutation feature
importance, Spearman correlation, Ward clustering of features, cluster
representatives, and retrain-on-subset experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from scipy.stats import rankdata

from . import gbdt
from .errors import InputError, MetricError

DEFAULT_REPEATS = 10
DEFAULT_CLUSTER_THRESHOLD = 1.0


@dataclass
class ImportanceReport:
    names: list
    mean_importance: np.ndarray
    std_importance: np.ndarray
    repeats: int

    def to_json(self) -> str:
        rows = [
            {"feature": n, "mean": float(m), "std": float(s)}
            for n, m, s in zip(self.names, self.mean_importance, self.std_importance)
        ]
        return json.dumps({"repeats": self.repeats, "importances": rows}, indent=2)

    def to_csv(self) -> str:
        lines = ["feature,mean,std"]
        for n, m, s in zip(self.names, self.mean_importance, self.std_importance):
            lines.append(f"{n},{float(m)!r},{float(s)!r}")
        return "\n".join(lines) + "\n"


@dataclass
class FeatureClustering:
    merge_tree: np.ndarray  # scipy linkage matrix
    distance_threshold: float
    clusters: list  # list of sorted feature-index lists
    representatives: list | None = None

    def to_json(self) -> str:
        return json.dumps({
            "distance_threshold": self.distance_threshold,
            "clusters": [list(map(int, c)) for c in self.clusters],
            "representatives": None if self.representatives is None
            else list(map(int, self.representatives)),
            "merge_tree": self.merge_tree.tolist(),
        }, indent=2)


def accuracy_metric(model, X, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        raise MetricError("empty evaluation slice")
    return float((gbdt.predict(model, X) == y).mean())


def permutation_importance(model, X, y, metric=accuracy_metric,
                           repeats: int = DEFAULT_REPEATS, seed: int = 0) -> ImportanceReport:
    """Per-feature drop in metric when that column is shuffled.

    importance_j = s - mean_r s_{r,j} where s is the unshuffled score; the
    std is taken over the per-repeat drops. Each (feature, repeat) pair draws
    an independent shuffle from a seeded stream.
    """
    X = np.asarray(X, dtype=np.float64)
    if repeats < 1:
        raise InputError("repeats must be >= 1")
    s = metric(model, X, y)
    rng = np.random.default_rng(seed)
    n, d = X.shape
    means = np.zeros(d)
    stds = np.zeros(d)
    for j in range(d):
        drops = np.zeros(repeats)
        for r in range(repeats):
            perm = rng.permutation(n)
            Xp = X.copy()
            Xp[:, j] = X[perm, j]
            drops[r] = s - metric(model, Xp, y)
        means[j] = drops.mean()
        stds[j] = drops.std()
    names = getattr(model, "feature_names", None) or [f"f{j}" for j in range(d)]
    return ImportanceReport(list(names), means, stds, repeats)


def spearman_matrix(X) -> np.ndarray:
    """Spearman rank-order correlation between feature columns.

    Ties get average ranks; a constant column correlates 0 with everything
    (diagonal stays 1).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InputError("need a (n_samples >= 2, n_features) matrix")
    ranks = np.column_stack([rankdata(X[:, j]) for j in range(X.shape[1])])
    centered = ranks - ranks.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    constant = norms == 0
    safe = np.where(constant, 1.0, norms)
    normed = centered / safe
    corr = normed.T @ normed
    corr = (corr + corr.T) / 2.0  # exact symmetry despite BLAS reassociation
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


def ward_cluster(corr: np.ndarray, threshold: float = DEFAULT_CLUSTER_THRESHOLD) -> FeatureClustering:
    """Ward-linkage agglomerative clustering on distance d = 1 - rho, with
    flat clusters cut at `threshold`."""
    corr = np.asarray(corr, dtype=np.float64)
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
        raise InputError("correlation matrix must be square")
    if not np.allclose(corr, corr.T, atol=1e-8):
        raise InputError("correlation matrix must be symmetric")
    dist = 1.0 - corr
    np.fill_diagonal(dist, 0.0)
    dist = np.clip(dist, 0.0, None)
    condensed = squareform((dist + dist.T) / 2.0, checks=False)
    merge_tree = linkage(condensed, method="ward")
    labels = fcluster(merge_tree, t=threshold, criterion="distance")
    clusters = {}
    for idx, lab in enumerate(labels):
        clusters.setdefault(lab, []).append(idx)
    # deterministic ordering: clusters sorted by their lowest member index
    ordered = sorted((sorted(v) for v in clusters.values()), key=lambda c: c[0])
    return FeatureClustering(merge_tree, float(threshold), ordered)


def select_representatives(clustering: FeatureClustering,
                           importance: ImportanceReport) -> list:
    """Most-important member of each cluster (ties to the lowest index)."""
    n_features = sum(len(c) for c in clustering.clusters)
    if len(importance.mean_importance) != n_features:
        raise InputError("importance report does not cover all features")
    reps = []
    for members in clustering.clusters:
        scores = importance.mean_importance[members]
        reps.append(members[int(np.argmax(scores))])
    clustering.representatives = reps
    return reps


def retrain_subset(X_train, y_train, X_eval, y_eval, subset, config: gbdt.GbdtConfig,
                   feature_names=None):
    """Retrain on a feature subset and evaluate on the held-out split.

    Returns (model, eval dict with accuracy/precision/recall).
    """
    subset = list(subset)
    if not subset:
        raise InputError("feature subset must be nonempty")
    X_train = np.asarray(X_train, dtype=np.float64)[:, subset]
    X_eval = np.asarray(X_eval, dtype=np.float64)[:, subset]
    if feature_names is None:
        feature_names = [f"f{j}" for j in subset]
    else:
        feature_names = [feature_names[j] for j in subset]
    model = gbdt.train(X_train, y_train, config, feature_names)
    pred = gbdt.predict(model, X_eval)
    y_eval = np.asarray(y_eval)
    tp = int(((pred == 1) & (y_eval == 1)).sum())
    fp = int(((pred == 1) & (y_eval == 0)).sum())
    fn = int(((pred == 0) & (y_eval == 1)).sum())
    report = {
        "accuracy": float((pred == y_eval).mean()),
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / (tp + fn) if tp + fn else 0.0,
        "subset": subset,
    }
    return model, report
