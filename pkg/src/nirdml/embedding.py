"""Embedding-space data model on the unit hypersphere.

Similarities are plain dot products; callers are responsible for keeping
rows on the sphere (see :func:`l2_normalize`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, MissingProxy, ZeroVector

_ZERO_NORM = 1e-12


def l2_normalize(v, axis=-1):
    """Scale `v` to unit Euclidean norm along `axis`.

    Works on a single vector or row-wise on a matrix. Raises ZeroVector
    if any slice has norm below 1e-12.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm < _ZERO_NORM):
        raise ZeroVector("cannot normalize a vector with norm < 1e-12")
    return v / norm


def cosine_similarity_matrix(a, b):
    """Pairwise similarities ``a @ b.T`` for unit-norm rows."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"dim {a.shape[1]} vs {b.shape[1]}")
    return a @ b.T


@dataclass
class EmbeddingBatch:
    data: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.data.shape[0] != self.labels.shape[0]:
            raise DimensionMismatch(
                f"{self.data.shape[0]} rows but {self.labels.shape[0]} labels")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative")

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]

    def normalized(self):
        return EmbeddingBatch(l2_normalize(self.data), self.labels.copy())


@dataclass
class ProxySet:
    """One proxy row per class id ``0..C-1``."""

    proxies: np.ndarray
    class_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.proxies = np.atleast_2d(np.asarray(self.proxies, dtype=np.float64))
        if self.proxies.shape[0] < 1:
            raise ValueError("a ProxySet needs at least one proxy")
        if self.class_ids is None:
            self.class_ids = np.arange(self.proxies.shape[0])
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)

    @classmethod
    def init_random(cls, num_classes, dim, seed=0):
        rng = np.random.default_rng(seed)
        return cls(l2_normalize(rng.standard_normal((num_classes, dim))))

    @property
    def num_classes(self):
        return self.proxies.shape[0]

    @property
    def dim(self):
        return self.proxies.shape[1]

    def renormalize(self):
        self.proxies = l2_normalize(self.proxies)
        return self


def check_pairing(batch: EmbeddingBatch, proxies: ProxySet):
    """Raise unless every label has a proxy of matching dimension."""
    if batch.dim != proxies.dim:
        raise DimensionMismatch(f"embedding dim {batch.dim} vs proxy dim {proxies.dim}")
    if batch.n and batch.labels.max() >= proxies.num_classes:
        raise MissingProxy(f"label {batch.labels.max()} has no proxy "
                           f"(only {proxies.num_classes} proxies)")


@dataclass(frozen=True)
class VmfConfig:
    kappa: float = 1.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    zmax = np.max(z, axis=axis, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def vmf_posterior(psi, proxies: ProxySet, cfg: VmfConfig = VmfConfig()):
    """Class assignment probabilities under a uniform-weight vMF mixture.

    With a shared concentration the normalizer C_d(kappa) cancels, leaving a
    softmax over ``kappa * s(psi, rho)``. Accepts one vector or a matrix of
    row vectors.
    """
    psi = np.asarray(psi, dtype=np.float64)
    sims = cosine_similarity_matrix(psi, proxies.proxies)
    post = np.exp(log_softmax(cfg.kappa * sims, axis=1))
    return post[0] if psi.ndim == 1 else post
