"""Clustering-quality metrics for labelled embedding collections, plus SI-SDRi.

Conventions: NMI uses arithmetic-mean normalisation with natural logs;
silhouette and k-means use cosine distance (1 - cos).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import RangeError, ShapeError
from .objectives import hungarian, si_sdr

CONVENTIONS = {
    "nmi": "arithmetic-mean normalisation, natural log",
    "silhouette": "cosine distance (1 - cos), a=0 for singleton clusters",
    "clusterer": "spherical k-means, k-means++ init, 10 restarts, k = #distinct labels",
    "acc": "Hungarian matching of clusters to labels",
    "sep": "mean same-label cosine minus mean different-label cosine",
    "si_sdr": "scale-invariant SDR in dB, clamped to [-120, 120]; SI-SDRi = SI-SDR(est) - SI-SDR(mixture)",
}


@dataclass
class ClusteringReport:
    acc: float
    nmi: float
    ari: float
    silhouette: float
    sep: float
    k: int
    assignments: list = field(default_factory=list)

    def row(self):
        return {k: v for k, v in asdict(self).items() if k != "assignments"}


def _check_pair(a, b, name):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(name, a.shape, b.shape)
    return a, b


def contingency(a, b):
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def spherical_kmeans(vectors, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 100) -> np.ndarray:
    """Cosine k-means on l2-normalised rows; best of ``n_init`` k-means++ restarts."""
    x = _unit_rows(vectors)
    n = len(x)
    if not 1 <= k <= n:
        raise RangeError(f"spherical_kmeans: k={k} must lie in [1, N={n}]")
    rng = np.random.default_rng(seed)
    best_labels, best_cost = None, np.inf
    for _ in range(n_init):
        centers = [x[rng.integers(n)]]
        for _ in range(1, k):
            d = np.clip(1.0 - np.max(x @ np.array(centers).T, axis=1), 0.0, None)
            tot = (d**2).sum()
            idx = rng.choice(n, p=d**2 / tot) if tot > 0 else rng.integers(n)
            centers.append(x[idx])
        c = np.array(centers)
        labels = None
        for _ in range(max_iter):
            new = np.argmax(x @ c.T, axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for j in range(k):
                members = x[labels == j]
                if len(members) == 0:
                    # re-seed an empty cluster with the worst-fit point
                    worst = np.argmin(np.sum(x * c[labels], axis=1))
                    c[j] = x[worst]
                    labels[worst] = j
                else:
                    s = members.sum(axis=0)
                    nrm = np.linalg.norm(s)
                    c[j] = s / nrm if nrm > 0 else members[0]
        cost = float(np.sum(1.0 - np.sum(x * c[labels], axis=1)))
        if cost < best_cost - 1e-12:
            best_cost, best_labels = cost, labels.copy()
    return best_labels


def clustering_accuracy(pred_labels, true_labels) -> float:
    """Fraction of points correctly labelled under the best cluster-to-label matching."""
    pred, true = _check_pair(pred_labels, true_labels, "clustering_accuracy")
    table = contingency(pred, true)
    n = max(table.shape)
    padded = np.zeros((n, n))
    padded[:table.shape[0], :table.shape[1]] = table
    match = hungarian(-padded)
    matched = sum(padded[i, j] for i, j in enumerate(match.permutation))
    return float(matched / len(pred))


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(a_labels, b_labels) -> float:
    """2 I(A;B) / (H(A) + H(B)); 1.0 when both partitions have a single cluster."""
    a, b = _check_pair(a_labels, b_labels, "nmi")
    n = len(a)
    table = contingency(a, b).astype(np.float64)
    ha = _entropy(table.sum(axis=1), n)
    hb = _entropy(table.sum(axis=0), n)
    if ha + hb == 0.0:
        return 1.0
    pa = table.sum(axis=1, keepdims=True) / n
    pb = table.sum(axis=0, keepdims=True) / n
    pij = table / n
    nz = pij > 0
    mi = float(np.sum(pij[nz] * np.log(pij[nz] / (pa @ pb)[nz])))
    return float(min(max(2.0 * mi / (ha + hb), 0.0), 1.0))


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def ari(a_labels, b_labels) -> float:
    """Pair-counting adjusted Rand index."""
    a, b = _check_pair(a_labels, b_labels, "ari")
    table = contingency(a, b)
    index = _comb2(table).sum()
    sa = _comb2(table.sum(axis=1)).sum()
    sb = _comb2(table.sum(axis=0)).sum()
    expected = sa * sb / _comb2(len(a))
    maximum = 0.5 * (sa + sb)
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


def silhouette(vectors, labels) -> float:
    """Mean cosine-distance silhouette."""
    x = _unit_rows(vectors)
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise ShapeError("silhouette", x.shape, labels.shape)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise RangeError("silhouette needs at least two clusters")
    dist = np.clip(1.0 - x @ x.T, 0.0, None)
    onehot = (labels[:, None] == uniq[None, :]).astype(np.float64)
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot  # (N, n_clusters)
    own = np.argmax(onehot, axis=1)
    rows = np.arange(len(x))
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[rows, own] / np.maximum(own_size - 1, 1), 0.0)
    means = sums / sizes
    means[rows, own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def separation_score(vectors, labels) -> float:
    """Mean cosine of same-label pairs minus mean cosine of different-label pairs."""
    x = _unit_rows(vectors)
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise ShapeError("separation_score", x.shape, labels.shape)
    cos = x @ x.T
    iu = np.triu_indices(len(x), k=1)
    same = (labels[:, None] == labels[None, :])[iu]
    vals = cos[iu]
    if not same.any() or same.all():
        raise RangeError("separation_score needs both same-label and different-label pairs")
    return float(vals[same].mean() - vals[~same].mean())


def cluster_report(vectors, labels, k: int | None = None, seed: int = 0, n_init: int = 10) -> ClusteringReport:
    labels = np.asarray(labels)
    k = len(np.unique(labels)) if k is None else k
    pred = spherical_kmeans(vectors, k, seed=seed, n_init=n_init)
    return ClusteringReport(
        acc=clustering_accuracy(pred, labels),
        nmi=nmi(labels, pred),
        ari=ari(labels, pred),
        silhouette=silhouette(vectors, labels),
        sep=separation_score(vectors, labels),
        k=int(k),
        assignments=[int(p) for p in pred],
    )


def si_sdri(est, mix, ref) -> float:
    """SI-SDR improvement of ``est`` over the unprocessed ``mix``."""
    return si_sdr(est, ref) - si_sdr(mix, ref)
