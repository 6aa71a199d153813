"""Retrieval and embedding-structure metrics.

Retrieval metrics rank by cosine similarity with the query itself removed.
Structural metrics use Euclidean distances between (unit) embeddings.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import pdist
from sklearn.cluster import KMeans
from sklearn.metrics import normalized_mutual_info_score

from .embedding import EmbeddingBatch
from .errors import DegenerateSpectrum, EmptyBatch, InsufficientSamples

SPECTRUM_FLOOR = 1e-12


def _unpack(embeddings, labels=None):
    if isinstance(embeddings, EmbeddingBatch):
        return embeddings.data, embeddings.labels
    return np.asarray(embeddings, dtype=np.float64), np.asarray(labels)


def _ranking(x):
    sims = x @ x.T
    np.fill_diagonal(sims, -np.inf)
    # stable sort keeps ties in index order, so results are reproducible
    return np.argsort(-sims, axis=1, kind="stable")[:, :-1]


def recall_at_k(embeddings, ks=(1,), labels=None):
    """``{k: fraction of queries with a same-class item among the top k}``."""
    x, y = _unpack(embeddings, labels)
    if x.shape[0] < 2:
        raise EmptyBatch("recall needs at least two samples")
    order = _ranking(x)
    hits = y[order] == y[:, None]
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), np.inf)
    return {int(k): float(np.mean(first < k)) for k in ks}


def map_at_r(embeddings, r=1000, labels=None):
    """Mean average precision over rankings truncated at `r`.

    AP is normalized by ``min(#relevant, r)``; queries without any other
    same-class sample are skipped.
    """
    x, y = _unpack(embeddings, labels)
    if x.shape[0] < 2:
        raise EmptyBatch("mAP needs at least two samples")
    order = _ranking(x)[:, :r]
    hits = (y[order] == y[:, None]).astype(np.float64)
    n_rel = np.minimum(np.bincount(y)[y] - 1, r)
    ranks = np.arange(1, hits.shape[1] + 1)
    prec = np.cumsum(hits, axis=1) / ranks * hits
    valid = n_rel > 0
    if not valid.any():
        raise InsufficientSamples("no query has a relevant item")
    return float(np.mean(prec[valid].sum(axis=1) / n_rel[valid]))


def map_at_1000(embeddings, labels=None):
    return map_at_r(embeddings, 1000, labels)


def nmi(embeddings, labels=None, seed=0, n_init=10):
    """NMI between labels and K-means clusters (K = number of classes)."""
    x, y = _unpack(embeddings, labels)
    if x.shape[0] == 0:
        raise EmptyBatch("NMI of an empty set")
    k = np.unique(y).size
    with warnings.catch_warnings():
        # identical points trigger a "fewer distinct clusters" warning
        warnings.simplefilter("ignore")
        pred = KMeans(n_clusters=k, n_init=n_init, random_state=seed).fit_predict(x)
    return float(normalized_mutual_info_score(y, pred, average_method="arithmetic"))


def spectral_decay(embeddings):
    """KL(uniform || normalized singular-value spectrum) of the centered data."""
    x, _ = _unpack(embeddings, np.zeros(0))
    if x.shape[0] < 2:
        raise EmptyBatch("spectral decay needs at least two samples")
    s = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
    if np.all(s < SPECTRUM_FLOOR):
        raise DegenerateSpectrum("all singular values vanish")
    s = np.maximum(s, SPECTRUM_FLOOR)
    p = s / s.sum()
    u = 1.0 / s.size
    return float(np.sum(u * np.log(u / p)))


def _class_groups(x, y):
    classes = np.unique(y)
    return classes, [x[y == c] for c in classes]


def _inter_distance(centers):
    if len(centers) < 2:
        raise InsufficientSamples("need at least two classes")
    return float(np.mean(pdist(centers)))


def pi_density(embeddings, labels=None):
    """Mean intraclass pairwise distance over mean distance between class centers."""
    x, y = _unpack(embeddings, labels)
    _, groups = _class_groups(x, y)
    if len(groups) < 2 or any(len(g) < 2 for g in groups):
        raise InsufficientSamples("need >= 2 classes with >= 2 samples each")
    intra = np.mean([np.mean(pdist(g)) for g in groups])
    inter = _inter_distance(np.stack([g.mean(axis=0) for g in groups]))
    return float(intra / inter)


def uniformity_g2(embeddings):
    """Mean Gaussian potential ``exp(-2 ||u - v||^2)`` over distinct pairs."""
    x, _ = _unpack(embeddings, np.zeros(0))
    if x.shape[0] < 2:
        raise EmptyBatch("uniformity needs at least two samples")
    return float(np.mean(np.exp(-2.0 * pdist(x, "sqeuclidean"))))


def concentration_variance(embeddings, labels=None):
    """Population variance of per-class spread relative to the inter-center distance."""
    x, y = _unpack(embeddings, labels)
    _, groups = _class_groups(x, y)
    centers = np.stack([g.mean(axis=0) for g in groups])
    inter = _inter_distance(centers)
    kappas = [np.mean(np.linalg.norm(g - c, axis=1)) / inter for g, c in zip(groups, centers)]
    return float(np.var(kappas))


@dataclass
class MetricsReport:
    recall_at: dict = field(default_factory=dict)
    nmi: float = float("nan")
    map_at_1000: float = float("nan")
    spectral_decay: float = float("nan")
    pi_density: float = float("nan")
    uniformity_g2: float = float("nan")
    concentration_variance: float = float("nan")

    def to_flat(self):
        flat = {f"recall_at_{k}": v for k, v in sorted(self.recall_at.items())}
        d = asdict(self)
        d.pop("recall_at")
        flat.update(d)
        return flat

    @classmethod
    def from_flat(cls, flat):
        rep = cls()
        for key, value in flat.items():
            if key.startswith("recall_at_"):
                rep.recall_at[int(key[len("recall_at_"):])] = float(value)
            else:
                setattr(rep, key, float(value))
        return rep


def evaluate(embeddings, labels=None, ks=(1, 2, 4, 8), seed=0) -> MetricsReport:
    """Compute the full report on one split."""
    x, y = _unpack(embeddings, labels)
    return MetricsReport(
        recall_at=recall_at_k(x, ks, labels=y),
        nmi=nmi(x, y, seed=seed),
        map_at_1000=map_at_1000(x, y),
        spectral_decay=spectral_decay(x),
        pi_density=pi_density(x, y),
        uniformity_g2=uniformity_g2(x),
        concentration_variance=concentration_variance(x, y),
    )
