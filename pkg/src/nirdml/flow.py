"""Conditional affine-coupling normalizing flow with hand-written backprop.

The flow ``tau`` maps residuals ``zeta`` (standard normal prior) to
embeddings ``psi`` conditioned on a class proxy ``rho``. Each block
permutes the coordinates with a fixed seeded permutation, splits them in
half and applies two successive scale-and-translate steps::

    y2 = x2 * exp(s1(x1 | c)) + t1(x1 | c)
    y1 = x1 * exp(s2(y2 | c)) + t2(y2 | c)

Scales are soft-clamped with ``clamp * tanh(s / clamp)``. The condition is
concatenated to each subnet input, for the blocks selected by the
conditioning placement.

The permutation only decides which coordinates form each half; outputs
are written back in the original coordinate order, so a block whose
subnets emit zeros is exactly the identity.

Both directions cache their intermediates so gradients can be pushed back
through them (``*_backward``); nothing here keeps global state.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, DimensionMismatch

PLACEMENTS = ("all", "start", "mid", "end")
FLOW_MAGIC = b"NIRFLOW\0"
FLOW_VERSION = 1


def _relu(x):
    return np.maximum(x, 0.0)


class Subnet:
    """Dense ReLU network ``in -> width -> width -> out``.

    The output layer starts at zero, so a fresh block is the identity map.
    """

    def __init__(self, in_dim, width, out_dim, rng, zero_init=True):
        self.W0 = rng.standard_normal((in_dim, width)) * np.sqrt(2.0 / in_dim)
        self.b0 = np.zeros(width)
        self.W1 = rng.standard_normal((width, width)) * np.sqrt(2.0 / width)
        self.b1 = np.zeros(width)
        if zero_init:
            self.W2 = np.zeros((width, out_dim))
        else:
            self.W2 = rng.standard_normal((width, out_dim)) * np.sqrt(1.0 / width)
        self.b2 = np.zeros(out_dim)

    names = ("W0", "b0", "W1", "b1", "W2", "b2")

    def forward(self, x):
        h0 = x @ self.W0 + self.b0
        a0 = _relu(h0)
        h1 = a0 @ self.W1 + self.b1
        a1 = _relu(h1)
        return a1 @ self.W2 + self.b2, (x, h0, a0, h1, a1)

    def backward(self, dout, cache):
        x, h0, a0, h1, a1 = cache
        grads = {"W2": a1.T @ dout, "b2": dout.sum(axis=0)}
        dh1 = (dout @ self.W2.T) * (h1 > 0)
        grads["W1"] = a0.T @ dh1
        grads["b1"] = dh1.sum(axis=0)
        dh0 = (dh1 @ self.W1.T) * (h0 > 0)
        grads["W0"] = x.T @ dh0
        grads["b0"] = dh0.sum(axis=0)
        return dh0 @ self.W0.T, grads


class CouplingBlock:
    """One permute-split-couple step; see the module docstring."""

    def __init__(self, dim, width, cond_dim, conditioned, perm_seed,
                 clamp=2.0, rng=None, zero_init=True):
        if dim % 2:
            raise ValueError(f"coupling blocks need an even dimension, got {dim}")
        rng = np.random.default_rng(perm_seed) if rng is None else rng
        self.dim = dim
        self.half = dim // 2
        self.cond_dim = cond_dim
        self.conditioned = bool(conditioned)
        self.clamp = float(clamp)
        self.perm_seed = int(perm_seed)
        self.perm = np.random.default_rng(perm_seed).permutation(dim)
        extra = cond_dim if self.conditioned else 0
        self.net1 = Subnet(self.half + extra, width, 2 * self.half, rng, zero_init)
        self.net2 = Subnet(self.half + extra, width, 2 * self.half, rng, zero_init)

    def _unpermute(self, a, b):
        out = np.empty((a.shape[0], self.dim))
        out[:, self.perm] = np.concatenate([a, b], axis=1)
        return out

    def _run(self, net, x, cond):
        inp = np.concatenate([x, cond], axis=1) if self.conditioned else x
        out, cache = net.forward(inp)
        raw, t = out[:, :self.half], out[:, self.half:]
        s = self.clamp * np.tanh(raw / self.clamp)
        return s, t, cache

    def _back(self, net, ds, dt, s, cache):
        # d/draw of clamp*tanh(raw/clamp) = 1 - tanh^2 = 1 - (s/clamp)^2
        draw = ds * (1.0 - (s / self.clamp) ** 2)
        dinp, grads = net.backward(np.concatenate([draw, dt], axis=1), cache)
        return dinp[:, :self.half], dinp[:, self.half:], grads

    def forward(self, x, cond):
        xp = x[:, self.perm]
        x1, x2 = xp[:, :self.half], xp[:, self.half:]
        s1, t1, c1 = self._run(self.net1, x1, cond)
        e1 = np.exp(s1)
        y2 = x2 * e1 + t1
        s2, t2, c2 = self._run(self.net2, y2, cond)
        e2 = np.exp(s2)
        y1 = x1 * e2 + t2
        logdet = s1.sum(axis=1) + s2.sum(axis=1)
        cache = (x1, x2, s1, e1, c1, y2, s2, e2, c2)
        return self._unpermute(y1, y2), logdet, cache

    def forward_backward(self, dy, dlogdet, cache):
        """Gradients of a scalar through :meth:`forward`.

        `dy` is the upstream gradient on the output, `dlogdet` on the
        per-row log-determinant. Returns ``(dx, dcond, param_grads)``.
        """
        x1, x2, s1, e1, c1, y2, s2, e2, c2 = cache
        dyp = dy[:, self.perm]
        dy1, dy2 = dyp[:, :self.half], dyp[:, self.half:].copy()
        dld = dlogdet[:, None]
        dcond = np.zeros((dy.shape[0], self.cond_dim))

        dx1 = dy1 * e2
        ds2 = dy1 * x1 * e2 + dld
        d_in, d_c, g2 = self._back(self.net2, ds2, dy1, s2, c2)
        dy2 += d_in
        if self.conditioned:
            dcond += d_c

        dx2 = dy2 * e1
        ds1 = dy2 * x2 * e1 + dld
        d_in, d_c, g1 = self._back(self.net1, ds1, dy2, s1, c1)
        dx1 = dx1 + d_in
        if self.conditioned:
            dcond += d_c

        return self._unpermute(dx1, dx2), dcond, _merge_grads(g1, g2)

    def inverse(self, y, cond):
        yp = y[:, self.perm]
        y1, y2 = yp[:, :self.half], yp[:, self.half:]
        s2, t2, c2 = self._run(self.net2, y2, cond)
        e2 = np.exp(-s2)
        x1 = (y1 - t2) * e2
        s1, t1, c1 = self._run(self.net1, x1, cond)
        e1 = np.exp(-s1)
        x2 = (y2 - t1) * e1
        x = self._unpermute(x1, x2)
        logdet = -(s1.sum(axis=1) + s2.sum(axis=1))
        cache = (x1, x2, s1, e1, c1, s2, e2, c2)
        return x, logdet, cache

    def inverse_backward(self, dx, dlogdet, cache):
        """Gradients through :meth:`inverse`; returns ``(dy, dcond, param_grads)``."""
        x1, x2, s1, e1, c1, s2, e2, c2 = cache
        dxp = dx[:, self.perm]
        dx1, dx2 = dxp[:, :self.half].copy(), dxp[:, self.half:]
        dld = dlogdet[:, None]
        dcond = np.zeros((dx.shape[0], self.cond_dim))

        dy2 = dx2 * e1
        ds1 = -dx2 * x2 - dld
        d_in, d_c, g1 = self._back(self.net1, ds1, -dy2, s1, c1)
        dx1 += d_in
        if self.conditioned:
            dcond += d_c

        dy1 = dx1 * e2
        ds2 = -dx1 * x1 - dld
        d_in, d_c, g2 = self._back(self.net2, ds2, -dy1, s2, c2)
        dy2 = dy2 + d_in
        if self.conditioned:
            dcond += d_c
        return self._unpermute(dy1, dy2), dcond, _merge_grads(g1, g2)

    def params(self):
        out = {}
        for tag, net in (("net1", self.net1), ("net2", self.net2)):
            for name in Subnet.names:
                out[f"{tag}.{name}"] = getattr(net, name)
        return out

    def set_params(self, params):
        for key, value in params.items():
            tag, name = key.split(".")
            getattr(self, tag).__setattr__(name, value)


def _merge_grads(g1, g2):
    out = {f"net1.{k}": v for k, v in g1.items()}
    out.update({f"net2.{k}": v for k, v in g2.items()})
    return out


def conditioned_blocks(depth, placement):
    """Indices of blocks that see the condition."""
    if placement not in PLACEMENTS:
        raise ValueError(f"placement must be one of {PLACEMENTS}, got {placement!r}")
    if depth == 0:
        return set()
    if placement == "all":
        return set(range(depth))
    if placement == "start":
        return {0}
    if placement == "mid":
        return {(depth + 1) // 2 - 1}
    return {depth - 1}


@dataclass
class FlowConfig:
    dim: int = 16
    depth: int = 8
    width: int = 128
    placement: str = "all"
    clamp: float = 2.0
    seed: int = 0


class ConditionalFlow:
    """Stack of conditional coupling blocks.

    Parameters live inside the blocks; :meth:`params` exposes them under
    flat keys ``"b{i}.net{1,2}.{W,b}{0,1,2}"`` shared with the gradient
    dictionaries returned by the backward passes.
    """

    def __init__(self, dim, depth=8, width=128, cond_dim=None, placement="all",
                 clamp=2.0, seed=0, zero_init=True):
        if dim % 2:
            raise ValueError(f"flow dimension must be even, got {dim}")
        self.dim = dim
        self.depth = depth
        self.width = width
        self.cond_dim = dim if cond_dim is None else cond_dim
        self.placement = placement
        self.clamp = clamp
        self.seed = seed
        cond = conditioned_blocks(depth, placement)
        rng = np.random.default_rng(seed)
        self.perm_seeds = [int(seed) * 1000 + i for i in range(depth)]
        self.blocks = [
            CouplingBlock(dim, width, self.cond_dim, i in cond, self.perm_seeds[i],
                          clamp=clamp, rng=rng, zero_init=zero_init)
            for i in range(depth)
        ]

    @classmethod
    def from_config(cls, cfg: FlowConfig, zero_init=True):
        return cls(cfg.dim, cfg.depth, cfg.width, placement=cfg.placement,
                   clamp=cfg.clamp, seed=cfg.seed, zero_init=zero_init)

    def _check(self, x, cond):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionMismatch(f"expected (n, {self.dim}) input, got {x.shape}")
        if cond.shape != (x.shape[0], self.cond_dim):
            raise DimensionMismatch(
                f"expected condition of shape {(x.shape[0], self.cond_dim)}, got {cond.shape}")

    def forward(self, zeta, rho, return_cache=False):
        """tau(zeta | rho): residuals to embeddings, with per-row log|det J|."""
        x = np.asarray(zeta, dtype=np.float64)
        rho = np.asarray(rho, dtype=np.float64)
        self._check(x, rho)
        logdet = np.zeros(x.shape[0])
        caches = []
        for block in self.blocks:
            x, ld, cache = block.forward(x, rho)
            logdet += ld
            caches.append(cache)
        return (x, logdet, caches) if return_cache else (x, logdet)

    def forward_backward(self, dpsi, dlogdet, caches):
        """Push gradients back through :meth:`forward`.

        Returns ``(dzeta, drho, param_grads)``.
        """
        dx = np.asarray(dpsi, dtype=np.float64)
        dlogdet = np.broadcast_to(np.asarray(dlogdet, dtype=np.float64), (dx.shape[0],))
        drho = np.zeros((dx.shape[0], self.cond_dim))
        grads = {}
        for i in reversed(range(self.depth)):
            dx, dc, g = self.blocks[i].forward_backward(dx, dlogdet, caches[i])
            drho += dc
            grads.update({f"b{i}.{k}": v for k, v in g.items()})
        return dx, drho, grads

    def inverse(self, psi, rho, return_cache=False):
        """tau^{-1}(psi | rho) with per-row log|det J_{tau^{-1}}|."""
        y = np.asarray(psi, dtype=np.float64)
        rho = np.asarray(rho, dtype=np.float64)
        self._check(y, rho)
        logdet = np.zeros(y.shape[0])
        caches = [None] * self.depth
        for i in reversed(range(self.depth)):
            y, ld, caches[i] = self.blocks[i].inverse(y, rho)
            logdet += ld
        return (y, logdet, caches) if return_cache else (y, logdet)

    def inverse_backward(self, dzeta, dlogdet, caches):
        """Push gradients back through :meth:`inverse`; returns ``(dpsi, drho, param_grads)``."""
        dy = np.asarray(dzeta, dtype=np.float64)
        dlogdet = np.broadcast_to(np.asarray(dlogdet, dtype=np.float64), (dy.shape[0],))
        drho = np.zeros((dy.shape[0], self.cond_dim))
        grads = {}
        for i in range(self.depth):
            dy, dc, g = self.blocks[i].inverse_backward(dy, dlogdet, caches[i])
            drho += dc
            grads.update({f"b{i}.{k}": v for k, v in g.items()})
        return dy, drho, grads

    def params(self):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update({f"b{i}.{k}": v for k, v in block.params().items()})
        return out

    def set_params(self, params):
        for i, block in enumerate(self.blocks):
            prefix = f"b{i}."
            block.set_params({k[len(prefix):]: v for k, v in params.items()
                              if k.startswith(prefix)})

    def randomize(self, scale=0.1, seed=0):
        """Give every subnet output layer random weights.

        Weights have std ``scale / sqrt(width)`` and biases std `scale`, so
        scales and translations are of order `scale` times the input size
        whatever the width. A freshly built flow is the identity; this makes
        it a generic invertible map (used for tests and diagnostics).
        """
        rng = np.random.default_rng(seed)
        for block in self.blocks:
            for net in (block.net1, block.net2):
                net.W2 = scale / np.sqrt(net.W2.shape[0]) * rng.standard_normal(net.W2.shape)
                net.b2 = scale * rng.standard_normal(net.b2.shape)
        return self

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params().items()}

    def header(self):
        return {"depth": self.depth, "width": self.width, "dim": self.dim,
                "cond_dim": self.cond_dim, "placement": self.placement,
                "clamp_scale": self.clamp, "seed": self.seed,
                "perm_seeds": self.perm_seeds}


def coupling_forward(x, cond, block: CouplingBlock):
    """Single-vector (or batch) forward through one block: ``(y, logdet)``."""
    x2d, c2d, squeeze = _as_rows(x, cond, block)
    y, ld, _ = block.forward(x2d, c2d)
    return (y[0], float(ld[0])) if squeeze else (y, ld)


def coupling_inverse(y, cond, block: CouplingBlock):
    """Single-vector (or batch) inverse through one block: ``(x, logdet_inv)``."""
    y2d, c2d, squeeze = _as_rows(y, cond, block)
    x, ld, _ = block.inverse(y2d, c2d)
    return (x[0], float(ld[0])) if squeeze else (x, ld)


def _as_rows(x, cond, block):
    x = np.asarray(x, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    squeeze = x.ndim == 1
    x2d, c2d = np.atleast_2d(x), np.atleast_2d(cond)
    if x2d.shape[1] != block.dim or c2d.shape[1] != block.cond_dim or len(x2d) != len(c2d):
        raise DimensionMismatch(f"input {x.shape} / condition {cond.shape} do not fit block "
                                f"(dim={block.dim}, cond_dim={block.cond_dim})")
    return x2d, c2d, squeeze


def flow_forward(zeta, rho, flow: ConditionalFlow):
    return flow.forward(zeta, rho)


def flow_inverse(psi, rho, flow: ConditionalFlow):
    return flow.inverse(psi, rho)


def flow_grad(psi, rho, flow: ConditionalFlow):
    """Value and gradients of ``sum_rows(||zeta||^2 - logdet_inv)``.

    ``zeta, logdet_inv = flow.inverse(psi, rho)``. Returns
    ``(value, dpsi, drho, param_grads)``.
    """
    zeta, ld, caches = flow.inverse(psi, rho, return_cache=True)
    value = float(np.sum(zeta ** 2) - np.sum(ld))
    dpsi, drho, grads = flow.inverse_backward(2.0 * zeta, -np.ones(len(ld)), caches)
    return value, dpsi, drho, grads


def sample_residual(n, d, seed):
    """i.i.d. standard-normal residuals, deterministic in `seed`."""
    if n < 1 or d < 2:
        raise ValueError("need n >= 1 and d >= 2")
    return np.random.default_rng(seed).standard_normal((n, d))


def gaussian_logpdf(zeta):
    """Per-row log-density of the standard-normal residual prior."""
    zeta = np.atleast_2d(zeta)
    d = zeta.shape[1]
    return -0.5 * np.sum(zeta ** 2, axis=1) - 0.5 * d * np.log(2 * np.pi)


def pushforward_logpdf(psi, rho, flow: ConditionalFlow):
    """Exact log-density of embeddings under the flow's pushforward."""
    zeta, ld = flow.inverse(psi, rho)
    return gaussian_logpdf(zeta) + ld


# --- serialization -------------------------------------------------------

def _write_blob(fh, magic, version, header, arrays):
    head = json.dumps(header, sort_keys=True).encode("ascii")
    fh.write(magic)
    fh.write(struct.pack("<II", version, len(head)))
    fh.write(head)
    for arr in arrays:
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(fh, magic, version):
    got = fh.read(len(magic))
    if got != magic:
        raise CheckpointError(f"bad magic {got!r}, expected {magic!r}")
    ver, head_len = struct.unpack("<II", fh.read(8))
    if ver != version:
        raise CheckpointError(f"checkpoint version {ver} unsupported (expected {version})")
    header = json.loads(fh.read(head_len).decode("ascii"))
    return header, fh.read()


def flow_to_bytes(flow: ConditionalFlow) -> bytes:
    """Serialize to the little-endian float32 flow blob."""
    params = flow.params()
    header = flow.header()
    header["keys"] = list(params)
    header["shapes"] = [list(v.shape) for v in params.values()]
    buf = io.BytesIO()
    _write_blob(buf, FLOW_MAGIC, FLOW_VERSION, header, params.values())
    return buf.getvalue()


def flow_from_bytes(data: bytes) -> ConditionalFlow:
    header, payload = _read_blob(io.BytesIO(data), FLOW_MAGIC, FLOW_VERSION)
    flow = ConditionalFlow(header["dim"], header["depth"], header["width"],
                           cond_dim=header["cond_dim"], placement=header["placement"],
                           clamp=header["clamp_scale"], seed=header["seed"])
    if flow.perm_seeds != header["perm_seeds"]:
        raise CheckpointError("permutation seeds do not match the stored header")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    params, offset = {}, 0
    for key, shape in zip(header["keys"], header["shapes"]):
        size = int(np.prod(shape))
        params[key] = flat[offset:offset + size].reshape(shape).copy()
        offset += size
    if offset != flat.size:
        raise CheckpointError("flow blob payload size does not match its header")
    flow.set_params(params)
    return flow
