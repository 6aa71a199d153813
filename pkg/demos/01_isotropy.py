"""Proxy losses only see angles; the NIR term sees where samples sit.

Two batches place every sample at the same cosine to its proxy, once
bunched on one side and once spread around it. Proxy losses that depend
only on sample-proxy similarities cannot tell them apart. A flow fitted
to the first arrangement assigns the second a much worse likelihood.
"""
import numpy as np

from nirdml import EmbeddingBatch, ProxySet
from nirdml.flow import ConditionalFlow
from nirdml.losses import get_loss
from nirdml.nir import nir_loss
from nirdml.trainer import fit_flow

rng = np.random.default_rng(0)
d, n, cos = 8, 64, 0.8
proxy = np.eye(d)[0]
proxies = ProxySet(np.stack([proxy, np.eye(d)[1]]))


def ring(directions):
    # put each sample at exactly `cos` from the proxy, along the given tangents
    t = directions - np.outer(directions @ proxy, proxy)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    return cos * proxy + np.sqrt(1 - cos ** 2) * t


tangent = np.zeros(d)
tangent[2] = 1.0
bunched = ring(tangent + 0.05 * rng.standard_normal((n, d)))
spread = ring(rng.standard_normal((n, d)))

# pin the second proxy's similarity too, so only the tangent layout differs
for x in (bunched, spread):
    x[:, 1] = 0.0
    x[:, 2:] *= np.sqrt(1 - cos ** 2) / np.linalg.norm(x[:, 2:], axis=1, keepdims=True)

labels = np.zeros(n, dtype=int)
print("per-sample similarity to proxy:", np.ptp(bunched @ proxy), np.ptp(spread @ proxy))
for name in ("proxy_nca", "proxy_nca_pp", "proxy_anchor", "proxy_nca_star"):
    a = get_loss(name)(EmbeddingBatch(bunched, labels), proxies).value
    b = get_loss(name)(EmbeddingBatch(spread, labels), proxies).value
    print(f"{name:15s} bunched {a:.6f}  spread {b:.6f}")

flow = ConditionalFlow(d, depth=4, width=64, seed=0)
fit_flow(bunched, proxy, flow, steps=1500, lr=3e-3)
for name, x in (("bunched", bunched), ("spread", spread)):
    print(f"NIR loss, {name:8s} {nir_loss(EmbeddingBatch(x, labels), proxies, flow).value:.3f}")
