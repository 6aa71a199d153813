"""Proxy-based metric learning objectives with analytic gradients.

Every loss takes an :class:`EmbeddingBatch` (rows assumed unit-norm) and a
:class:`ProxySet` and returns a :class:`LossValueWithGrads` holding the
scalar value and the exact gradients with respect to the embedding rows and
the proxy rows. Similarities are raw dot products, so gradients are taken
with respect to the vectors as given; projection onto the sphere happens in
the caller (embedder normalization, proxy re-normalization).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import EmbeddingBatch, ProxySet, check_pairing, log_softmax
from .errors import EmptyBatch, NoNegativeProxies

LOSS_NAMES = ("proxy_nca", "proxy_nca_pp", "proxy_anchor", "proxy_nca_star")


@dataclass(frozen=True)
class ProxyAnchorParams:
    alpha: float = 32.0
    delta: float = 0.1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass
class LossValueWithGrads:
    value: float
    d_embeddings: np.ndarray
    d_proxies: np.ndarray
    # flow parameter gradients, keyed like ConditionalFlow.params()
    d_flow: dict = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)

    def scaled(self, c):
        return LossValueWithGrads(
            c * self.value, c * self.d_embeddings, c * self.d_proxies,
            {k: c * v for k, v in self.d_flow.items()})

    def __add__(self, other):
        d_flow = dict(self.d_flow)
        for k, v in other.d_flow.items():
            d_flow[k] = d_flow[k] + v if k in d_flow else v
        return LossValueWithGrads(
            self.value + other.value, self.d_embeddings + other.d_embeddings,
            self.d_proxies + other.d_proxies, d_flow)

    @classmethod
    def zeros(cls, n, dim, num_classes):
        return cls(0.0, np.zeros((n, dim)), np.zeros((num_classes, dim)))


def _softplus_lse(z, mask):
    """``log(1 + sum_{mask} exp(z))`` along axis 0, with its softmax weights.

    Masked-out entries contribute nothing. Returns the per-column values and
    the weights ``exp(z) / (1 + sum exp(z))`` (zero where masked).
    """
    z = np.where(mask, z, -np.inf)
    zmax = np.maximum(np.max(z, axis=0), 0.0)
    e = np.where(mask, np.exp(z - zmax), 0.0)
    denom = np.exp(-zmax) + e.sum(axis=0)
    return zmax + np.log(denom), e / denom


def _finish(batch, proxies, ds, value):
    return LossValueWithGrads(value, ds @ proxies.proxies, ds.T @ batch.data)


def proxy_nca(batch: EmbeddingBatch, proxies: ProxySet) -> LossValueWithGrads:
    """ProxyNCA: positive similarity against a log-sum-exp over the other proxies."""
    check_pairing(batch, proxies)
    if proxies.num_classes < 2:
        raise NoNegativeProxies("ProxyNCA needs at least two proxies")
    n = batch.n
    if n == 0:
        raise EmptyBatch("empty batch")
    sims = batch.data @ proxies.proxies.T
    rows = np.arange(n)
    neg = sims.copy()
    neg[rows, batch.labels] = -np.inf
    m = np.max(neg, axis=1, keepdims=True)
    e = np.exp(neg - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    losses = -sims[rows, batch.labels] + lse
    ds = e / e.sum(axis=1, keepdims=True)
    ds[rows, batch.labels] = -1.0
    return _finish(batch, proxies, ds / n, losses.mean())


def proxy_nca_pp(batch: EmbeddingBatch, proxies: ProxySet) -> LossValueWithGrads:
    """ProxyNCA++ (unit temperature): cross-entropy of the proxy softmax."""
    check_pairing(batch, proxies)
    n = batch.n
    if n == 0:
        raise EmptyBatch("empty batch")
    sims = batch.data @ proxies.proxies.T
    rows = np.arange(n)
    log_p = log_softmax(sims, axis=1)
    ds = np.exp(log_p)
    ds[rows, batch.labels] -= 1.0
    return _finish(batch, proxies, ds / n, -log_p[rows, batch.labels].mean())


def proxy_anchor(batch: EmbeddingBatch, proxies: ProxySet,
                 p: ProxyAnchorParams = ProxyAnchorParams()) -> LossValueWithGrads:
    """ProxyAnchor.

    The positive term averages over proxies with at least one positive in
    the batch; the negative term averages over all proxies.
    """
    check_pairing(batch, proxies)
    if batch.n == 0:
        raise EmptyBatch("empty batch")
    sims = batch.data @ proxies.proxies.T
    pos_mask = batch.labels[:, None] == np.arange(proxies.num_classes)[None, :]
    with_pos = pos_mask.any(axis=0)
    n_pos = int(with_pos.sum())

    pos_val, pos_w = _softplus_lse(-p.alpha * (sims - p.delta), pos_mask)
    neg_val, neg_w = _softplus_lse(p.alpha * (sims + p.delta), ~pos_mask)

    value = pos_val[with_pos].sum() / n_pos + neg_val.mean()
    ds = -p.alpha * pos_w / n_pos + p.alpha * neg_w / proxies.num_classes
    return _finish(batch, proxies, ds, value)


def proxy_nca_star(batch: EmbeddingBatch, proxies: ProxySet,
                   p: ProxyAnchorParams = ProxyAnchorParams()) -> LossValueWithGrads:
    """ProxyNCA rewritten in the ProxyAnchor form (per-sample terms).

    Every batch sample counts as a positive, so both terms are batch means.
    """
    check_pairing(batch, proxies)
    n = batch.n
    if n == 0:
        raise EmptyBatch("empty batch")
    sims = batch.data @ proxies.proxies.T
    rows = np.arange(n)
    pos_mask = batch.labels[:, None] == np.arange(proxies.num_classes)[None, :]

    pos_val, pos_w = _softplus_lse(-p.alpha * (sims[rows, batch.labels] - p.delta)[None, :],
                                   np.ones((1, n), dtype=bool))
    neg_val, neg_w = _softplus_lse((p.alpha * (sims + p.delta)).T, (~pos_mask).T)

    value = pos_val.mean() + neg_val.mean()
    ds = p.alpha * neg_w.T / n
    ds[rows, batch.labels] = -p.alpha * pos_w[0] / n
    return _finish(batch, proxies, ds, value)


def get_loss(name, anchor_params: ProxyAnchorParams = ProxyAnchorParams()):
    """Return ``fn(batch, proxies) -> LossValueWithGrads`` for a loss name."""
    if name == "proxy_nca":
        return proxy_nca
    if name == "proxy_nca_pp":
        return proxy_nca_pp
    if name == "proxy_anchor":
        return lambda b, pr: proxy_anchor(b, pr, anchor_params)
    if name == "proxy_nca_star":
        return lambda b, pr: proxy_nca_star(b, pr, anchor_params)
    raise ValueError(f"unknown loss {name!r}; expected one of {LOSS_NAMES}")
