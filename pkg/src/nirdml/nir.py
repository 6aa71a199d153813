"""Non-isotropy regularization and the combined training objective.

The regularizer scores each embedding by how well the conditional flow
explains it as a translation of its class proxy::

    L_nir = mean_i ||tau^{-1}(psi_i | rho_{y_i})||^2 - log|det J_{tau^{-1}}|

(no 1/2 factor, Gaussian constants dropped). The full objective is
``f(L_nir) + omega * L_pdml`` with ``f`` one of exp, tempered exp or softplus.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .embedding import EmbeddingBatch, ProxySet, check_pairing, l2_normalize
from .errors import EmptySynthetic, NoNegativeProxies
from .flow import ConditionalFlow, gaussian_logpdf
from .losses import LossValueWithGrads

SCALINGS = ("exp", "exp_temperature", "softplus")
SELF_REG_MODES = ("off", "generate", "reverse_match", "generate_and_match")

ProxyLoss = Callable[[EmbeddingBatch, ProxySet], LossValueWithGrads]


@dataclass
class NirConfig:
    omega: float = 0.005
    scaling: str = "exp"
    temperature: float = 1.0
    exponent_clamp: float = 50.0
    proxy_backprop: bool = True
    negative_pairs: bool = False
    neg_weight: float = 1.0
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("omega must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.scaling not in SCALINGS:
            raise ValueError(f"scaling must be one of {SCALINGS}, got {self.scaling!r}")


def _scatter_rows(rows_grad, labels, num_classes):
    out = np.zeros((num_classes, rows_grad.shape[1]))
    np.add.at(out, labels, rows_grad)
    return out


def _per_pair_nll(psi, cond, flow):
    zeta, ld, caches = flow.inverse(psi, cond, return_cache=True)
    return np.sum(zeta ** 2, axis=1) - ld, zeta, caches


def nir_loss(batch: EmbeddingBatch, proxies: ProxySet, flow: ConditionalFlow,
             proxy_backprop=True) -> LossValueWithGrads:
    """Mean flow NLL of each embedding given its own class proxy."""
    check_pairing(batch, proxies)
    n = batch.n
    cond = proxies.proxies[batch.labels]
    nll, zeta, caches = _per_pair_nll(batch.data, cond, flow)
    dpsi, drho, dflow = flow.inverse_backward(2.0 * zeta / n, -np.ones(n) / n, caches)
    d_prox = (_scatter_rows(drho, batch.labels, proxies.num_classes) if proxy_backprop
              else np.zeros_like(proxies.proxies))
    return LossValueWithGrads(nll.mean(), dpsi, d_prox, dflow)


def gaussian_nll(batch: EmbeddingBatch, proxies: ProxySet, flow: ConditionalFlow):
    """Exact mean negative log-likelihood in nats (with 1/2 and log 2pi terms)."""
    cond = proxies.proxies[batch.labels]
    zeta, ld = flow.inverse(batch.data, cond)
    return float(-np.mean(gaussian_logpdf(zeta) + ld))


def scale_nir(value, cfg: NirConfig):
    """``(f(L), f'(L))`` for the configured monotone scaling."""
    if cfg.scaling == "softplus":
        f = np.logaddexp(0.0, value)
        return float(f), float(np.exp(value - f))
    t = cfg.temperature if cfg.scaling == "exp_temperature" else 1.0
    clipped = min(value, cfg.exponent_clamp)
    f = np.exp(clipped / t)
    return float(f), float(f / t) if value < cfg.exponent_clamp else 0.0


def nir_negative_pair_term(batch: EmbeddingBatch, proxies: ProxySet,
                           flow: ConditionalFlow, neg_weight, rng,
                           exponent_clamp=50.0, proxy_backprop=True) -> LossValueWithGrads:
    """NLL maximization against one random wrong-class proxy per sample.

    Returns ``-neg_weight * mean(min(nll, exponent_clamp))``; pairs above the
    clamp contribute no gradient.
    """
    check_pairing(batch, proxies)
    C = proxies.num_classes
    if C < 2:
        raise NoNegativeProxies("negative pairs need at least two classes")
    n = batch.n
    if neg_weight == 0:
        return LossValueWithGrads.zeros(n, batch.dim, C)
    # uniform over the C-1 other classes
    offset = rng.integers(1, C, size=n)
    neg_labels = (batch.labels + offset) % C
    nll, zeta, caches = _per_pair_nll(batch.data, proxies.proxies[neg_labels], flow)
    active = (nll < exponent_clamp).astype(np.float64)
    w = -neg_weight * active / n
    dpsi, drho, dflow = flow.inverse_backward(2.0 * zeta * w[:, None], -w, caches)
    d_prox = (_scatter_rows(drho, neg_labels, C) if proxy_backprop
              else np.zeros_like(proxies.proxies))
    value = -neg_weight * np.mean(np.minimum(nll, exponent_clamp))
    return LossValueWithGrads(value, dpsi, d_prox, dflow)


def combined_objective(batch: EmbeddingBatch, proxies: ProxySet, flow: ConditionalFlow,
                       dml: ProxyLoss, cfg: NirConfig, rng=None, parts=None):
    """``f(L_nir) + omega * L_pdml`` (plus the negative-pair term when enabled).

    If `parts` is a dict it receives the individual component values.
    """
    nir = nir_loss(batch, proxies, flow, proxy_backprop=cfg.proxy_backprop)
    f, df = scale_nir(nir.value, cfg)
    total = nir.scaled(df)
    total.value = f
    pdml = None
    if cfg.omega > 0:
        pdml = dml(batch, proxies)
        total = total + pdml.scaled(cfg.omega)
    if parts is not None:
        parts["nir"] = nir.value
        parts["f_nir"] = f
        if pdml is not None:
            parts["pdml"] = pdml.value
    if cfg.negative_pairs:
        if rng is None:
            raise ValueError("negative pairs need an rng")
        neg = nir_negative_pair_term(batch, proxies, flow, cfg.neg_weight, rng,
                                     cfg.exponent_clamp, cfg.proxy_backprop)
        total = total + neg
        if parts is not None:
            parts["neg"] = neg.value
    return total


class SyntheticBatch(EmbeddingBatch):
    """Generated embeddings that remember the residuals they came from."""

    def __init__(self, data, labels, residuals, raw):
        super().__init__(data, labels)
        self.residuals = residuals
        self.raw = raw


def generate_synthetic(proxies: ProxySet, per_class, flow: ConditionalFlow, seed):
    """Draw residuals and push them through the flow, one group per class.

    Outputs are projected back onto the sphere.
    """
    C = proxies.num_classes
    labels = np.repeat(np.arange(C), per_class)
    zeta = np.random.default_rng(seed).standard_normal((labels.size, flow.dim))
    raw, _ = flow.forward(zeta, proxies.proxies[labels])
    return SyntheticBatch(l2_normalize(raw), labels, zeta, raw)


def _normalize_backward(raw, dunit):
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    unit = raw / norm
    return (dunit - unit * np.sum(unit * dunit, axis=1, keepdims=True)) / norm


def self_reg_loss(mode, synthetic: SyntheticBatch, proxies: ProxySet,
                  flow: ConditionalFlow, dml: ProxyLoss) -> LossValueWithGrads:
    """Proxy loss on generated samples with mode-dependent gradient routing.

    ``generate`` treats the samples as constants (proxies learn),
    ``reverse_match`` treats the proxies as constants (the flow learns),
    ``generate_and_match`` lets both learn. The flow's proxy condition is
    always held constant here.
    """
    if mode not in SELF_REG_MODES:
        raise ValueError(f"self-reg mode must be one of {SELF_REG_MODES}, got {mode!r}")
    if mode == "off":
        n = 0 if synthetic is None else synthetic.n
        return LossValueWithGrads.zeros(n, proxies.dim, proxies.num_classes)
    if synthetic is None or synthetic.n == 0:
        raise EmptySynthetic("self-regularization needs generated samples")

    out = dml(synthetic, proxies)
    if mode == "reverse_match":
        out.d_proxies = np.zeros_like(out.d_proxies)
    if mode == "generate":
        out.d_embeddings = np.zeros_like(out.d_embeddings)
        return out
    cond = proxies.proxies[synthetic.labels]
    raw, _, caches = flow.forward(synthetic.residuals, cond, return_cache=True)
    draw = _normalize_backward(raw, out.d_embeddings)
    _, _, out.d_flow = flow.forward_backward(draw, np.zeros(synthetic.n), caches)
    return out
