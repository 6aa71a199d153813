"""Optimization loop for proxy-based metric learning with optional NIR.

Parameters are grouped as ``embedder``, ``proxies`` and ``flow``; each group
is a dict of arrays updated in place by :func:`adam_step` with its own
learning-rate multiplier.
"""
from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .embedding import EmbeddingBatch, ProxySet, l2_normalize
from .errors import (CheckpointError, InsufficientClasses, NonFiniteGradient,
                     NonFiniteLoss, ShapeMismatch)
from .flow import ConditionalFlow, FlowConfig, flow_from_bytes, flow_to_bytes
from .losses import ProxyAnchorParams, get_loss
from .metrics import recall_at_k
from .nir import (NirConfig, combined_objective, generate_synthetic,
                  self_reg_loss, _normalize_backward)

ARRAY_MAGIC = b"NIRARRS\0"
ARRAY_VERSION = 1


# --- model -----------------------------------------------------------------

class Embedder:
    """Dense ReLU network ``in -> hidden -> hidden -> dim`` with unit-norm output.

    ``kind="identity"`` skips the network and only normalizes the input.
    """

    def __init__(self, in_dim, dim, hidden=64, seed=0, kind="mlp"):
        self.in_dim, self.dim, self.hidden, self.kind = in_dim, dim, hidden, kind
        self.params = {}
        if kind == "identity":
            if in_dim != dim:
                raise ShapeMismatch(f"identity embedder needs in_dim == dim ({in_dim} != {dim})")
            return
        if kind != "mlp":
            raise ValueError(f"unknown embedder kind {kind!r}")
        rng = np.random.default_rng(seed)
        sizes = [in_dim, hidden, hidden, dim]
        for i in range(3):
            self.params[f"W{i}"] = rng.standard_normal((sizes[i], sizes[i + 1])) * np.sqrt(2.0 / sizes[i])
            self.params[f"b{i}"] = np.zeros(sizes[i + 1])

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "identity":
            return l2_normalize(x), None
        p = self.params
        h0 = x @ p["W0"] + p["b0"]
        a0 = np.maximum(h0, 0.0)
        h1 = a0 @ p["W1"] + p["b1"]
        a1 = np.maximum(h1, 0.0)
        raw = a1 @ p["W2"] + p["b2"]
        return l2_normalize(raw), (x, h0, a0, h1, a1, raw)

    def backward(self, dpsi, cache):
        if self.kind == "identity":
            return {}
        x, h0, a0, h1, a1, raw = cache
        p = self.params
        draw = _normalize_backward(raw, dpsi)
        g = {"W2": a1.T @ draw, "b2": draw.sum(axis=0)}
        dh1 = (draw @ p["W2"].T) * (h1 > 0)
        g["W1"], g["b1"] = a0.T @ dh1, dh1.sum(axis=0)
        dh0 = (dh1 @ p["W1"].T) * (h0 > 0)
        g["W0"], g["b0"] = x.T @ dh0, dh0.sum(axis=0)
        return g

    def embed(self, x):
        return self.forward(x)[0]


@dataclass
class Model:
    embedder: Embedder
    proxies: ProxySet
    flow: Optional[ConditionalFlow] = None

    def param_groups(self):
        groups = {"embedder": self.embedder.params, "proxies": {"P": self.proxies.proxies}}
        if self.flow is not None:
            groups["flow"] = self.flow.params()
        return groups

    def sync_from_groups(self, groups):
        self.proxies.proxies = groups["proxies"]["P"]
        if self.flow is not None:
            self.flow.set_params(groups["flow"])


# --- optimizer -------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-5
    weight_decay: float = 4e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    multipliers: dict = field(default_factory=lambda: {"embedder": 1.0, "proxies": 4000.0,
                                                       "flow": 50.0})
    decay_groups: tuple = ("embedder",)
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_global_norm(grads, max_norm):
    """Scale a nested ``{group: {name: array}}`` gradient to global norm <= max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for grp in grads.values() for g in grp.values()))
    if total <= max_norm or total == 0:
        return grads, total
    c = max_norm / total
    return {gn: {k: g * c for k, g in grp.items()} for gn, grp in grads.items()}, total


def adam_step(params, grads, state: OptimizerState, groups=None, renormalize=("proxies",),
              max_grad_norm=None):
    """One Adam update with bias correction and per-group LR multipliers.

    `params` and `grads` are ``{group: {name: array}}``; arrays are updated in
    place. Only `groups` (default: all groups present in `grads`) move.
    Weight decay is added to the gradient for groups in
    ``state.decay_groups``. Rows of the groups in `renormalize` are put back
    on the unit sphere after the update. Every gradient is validated before
    anything is mutated.
    """
    groups = list(grads) if groups is None else list(groups)
    applied = {}
    for gn in groups:
        applied[gn] = {}
        for name, g in grads[gn].items():
            p = params[gn][name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"{gn}.{name}: grad {g.shape} vs param {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {gn}.{name}")
            if state.weight_decay and gn in state.decay_groups:
                g = g + state.weight_decay * p
            applied[gn][name] = g
    if max_grad_norm is not None:
        applied, _ = clip_global_norm(applied, max_grad_norm)

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for gn, grp in applied.items():
        lr = state.lr * state.multipliers.get(gn, 1.0)
        for name, g in grp.items():
            key = f"{gn}.{name}"
            m = state.m.get(key)
            if m is None:
                m = state.m[key] = np.zeros_like(g)
                state.v[key] = np.zeros_like(g)
            v = state.v[key]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            params[gn][name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        # renormalizing unit rows is not bit-exact, so a zero step skips it
        if gn in renormalize and lr != 0:
            for arr in params[gn].values():
                arr /= np.linalg.norm(arr, axis=1, keepdims=True)
    return params, state, applied


# --- batching --------------------------------------------------------------

def sample_batch(labels, classes_per_batch, samples_per_class, rng):
    """Indices for a class-balanced batch.

    Draws `classes_per_batch` distinct classes, then `samples_per_class`
    samples of each (with replacement only when a class is too small).
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < classes_per_batch:
        raise InsufficientClasses(
            f"need {classes_per_batch} classes per batch, dataset has {classes.size}")
    chosen = rng.choice(classes, size=classes_per_batch, replace=False)
    out = []
    for c in chosen:
        members = np.flatnonzero(labels == c)
        replace = members.size < samples_per_class
        out.append(rng.choice(members, size=samples_per_class, replace=replace))
    return np.concatenate(out)


# --- training --------------------------------------------------------------

@dataclass
class LossConfig:
    name: str = "proxy_anchor"
    alpha: float = 32.0
    delta: float = 0.1


@dataclass
class TrainConfig:
    epochs: int = 20
    classes_per_batch: int = 8
    samples_per_class: int = 4
    warmup_epochs: int = 1
    seed: int = 0
    lr: float = 1e-5
    weight_decay: float = 4e-3
    lr_mult_proxies: float = 4000.0
    lr_mult_flow: float = 50.0
    decay_all: bool = False
    embed_dim: int = 16
    hidden: int = 64
    embedder: str = "mlp"
    use_nir: bool = True
    self_reg: str = "off"
    self_reg_per_class: int = 4
    eval_every_epoch: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    nir: NirConfig = field(default_factory=NirConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)

    def __post_init__(self):
        if self.classes_per_batch * self.samples_per_class < 2:
            raise ValueError("batches need at least two samples")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")

    def to_dict(self):
        return asdict(self)


def build_model(cfg: TrainConfig, in_dim, num_classes):
    emb = Embedder(in_dim, cfg.embed_dim, cfg.hidden, seed=cfg.seed, kind=cfg.embedder)
    proxies = ProxySet.init_random(num_classes, cfg.embed_dim, seed=cfg.seed + 1)
    flow = None
    if cfg.use_nir:
        fc = cfg.flow
        flow = ConditionalFlow(cfg.embed_dim, fc.depth, fc.width, placement=fc.placement,
                               clamp=fc.clamp, seed=cfg.seed + 2)
    return Model(emb, proxies, flow)


def make_optimizer(cfg: TrainConfig):
    decay = ("embedder", "proxies", "flow") if cfg.decay_all else ("embedder",)
    return OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay,
                          multipliers={"embedder": 1.0, "proxies": cfg.lr_mult_proxies,
                                       "flow": cfg.lr_mult_flow},
                          decay_groups=decay)


def train_step(model: Model, x, y, cfg: TrainConfig, opt: OptimizerState, rng, warmup=False):
    """One optimization step; returns the dict of loss components."""
    dml = get_loss(cfg.loss.name, ProxyAnchorParams(cfg.loss.alpha, cfg.loss.delta))
    psi, cache = model.embedder.forward(x)
    batch = EmbeddingBatch(psi, y)
    parts = {}
    if cfg.use_nir:
        obj = combined_objective(batch, model.proxies, model.flow, dml, cfg.nir,
                                 rng=rng, parts=parts)
    else:
        obj = dml(batch, model.proxies)
        parts["pdml"] = obj.value
    if cfg.self_reg != "off" and cfg.use_nir:
        synth = generate_synthetic(model.proxies, cfg.self_reg_per_class, model.flow,
                                   seed=int(rng.integers(2 ** 31)))
        sr = self_reg_loss(cfg.self_reg, synth, model.proxies, model.flow, dml).scaled(cfg.nir.omega)
        parts["self_reg"] = sr.value
        obj.value += sr.value
        obj.d_proxies = obj.d_proxies + sr.d_proxies
        for k, v in sr.d_flow.items():
            obj.d_flow[k] = obj.d_flow[k] + v if k in obj.d_flow else v
    parts["total"] = obj.value
    if not np.isfinite(obj.value):
        raise NonFiniteLoss(f"non-finite loss at step {opt.step}", step=opt.step)

    grads = {"embedder": model.embedder.backward(obj.d_embeddings, cache),
             "proxies": {"P": obj.d_proxies}}
    params = model.param_groups()
    if model.flow is not None:
        grads["flow"] = {k: obj.d_flow.get(k, np.zeros_like(v))
                         for k, v in params["flow"].items()}
    groups = ["flow"] if warmup else list(grads)
    adam_step(params, grads, opt, groups=groups, max_grad_norm=cfg.nir.grad_clip)
    model.sync_from_groups(params)
    return parts


def train(train_x, train_y, cfg: TrainConfig, test_x=None, test_y=None, model=None,
          callback=None):
    """Train a model; returns ``(model, log)`` with one record per epoch.

    Warmup epochs (only when NIR is on) update the flow alone. With
    ``eval_every_epoch`` each record carries the test-split Recall@1.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    num_classes = int(train_y.max()) + 1
    if model is None:
        model = build_model(cfg, train_x.shape[1], num_classes)
    opt = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed + 3)
    bs = cfg.classes_per_batch * cfg.samples_per_class
    steps = int(np.ceil(train_x.shape[0] / bs))
    log = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        warm = cfg.use_nir and epoch < cfg.warmup_epochs
        acc = {}
        for _ in range(steps):
            idx = sample_batch(train_y, cfg.classes_per_batch, cfg.samples_per_class, rng)
            parts = train_step(model, train_x[idx], train_y[idx], cfg, opt, rng, warmup=warm)
            for k, v in parts.items():
                acc.setdefault(k, []).append(v)
        rec = {"epoch": epoch + 1, "warmup": warm}
        rec.update({k: float(np.mean(v)) for k, v in acc.items()})
        if cfg.eval_every_epoch and test_x is not None:
            emb = model.embedder.embed(test_x)
            rec["test_r1"] = recall_at_k(EmbeddingBatch(emb, test_y), [1])[1]
        rec["seconds"] = time.perf_counter() - t0
        log.append(rec)
        if callback is not None:
            callback(rec, model)
    return model, log


def fit_flow(samples, cond, flow: ConditionalFlow, steps=5000, lr=1e-3, batch_size=256,
             seed=0, objective="nir"):
    """Fit `flow` alone to fixed samples by gradient descent on a likelihood.

    ``objective="nir"`` minimizes the NIR loss, ``"gaussian"`` the exact
    negative log-likelihood under a standard normal residual. `cond` is one
    condition vector shared by every sample. Returns the per-step values.
    """
    if objective not in ("nir", "gaussian"):
        raise ValueError(f"objective must be 'nir' or 'gaussian', got {objective!r}")
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    cond = np.asarray(cond, dtype=np.float64)
    opt = OptimizerState(lr=lr, weight_decay=0.0, multipliers={"flow": 1.0}, decay_groups=())
    rng = np.random.default_rng(seed)
    params = {"flow": flow.params()}
    # the NIR loss is sum(zeta^2) - logdet; the exact NLL halves the quadratic
    quad = 1.0 if objective == "nir" else 0.5
    history = np.empty(steps)
    for t in range(steps):
        x = samples[rng.choice(n, size=min(batch_size, n), replace=False)]
        m = x.shape[0]
        zeta, ld, caches = flow.inverse(x, np.tile(cond, (m, 1)), return_cache=True)
        history[t] = np.mean(quad * np.sum(zeta ** 2, axis=1) - ld)
        _, _, dflow = flow.inverse_backward(2.0 * quad * zeta / m, -np.ones(m) / m, caches)
        adam_step(params, {"flow": dflow}, opt, renormalize=())
    return history


# --- gradient checking -----------------------------------------------------

def _rel_err(a, n, floor):
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(loss_fn, params, step=1e-5, n_coords=200, seed=0, floor=1e-4):
    """Worst relative error between analytic and central-difference gradients.

    `loss_fn(params)` returns ``(value, grads)`` where `params` and `grads`
    are flat ``{name: array}`` dicts. Up to `n_coords` random coordinates
    of each array are probed (all of them if the array is smaller). The
    error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    roundoff on near-zero components (about 1e-10 at step 1e-5) from
    dominating.

    Each coordinate is differenced at `step` and at ``step / 100`` and the
    better agreement is kept. A ReLU kink inside the coarse stencil spoils
    only that one, roundoff mostly the fine one, while a wrong analytic
    gradient disagrees with both.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_fn(params)
    worst = 0.0

    def central(flat, i, h):
        old = flat[i]
        flat[i] = old + h
        fp = loss_fn(params)[0]
        flat[i] = old - h
        fm = loss_fn(params)[0]
        flat[i] = old
        return (fp - fm) / (2 * h)

    for name, arr in params.items():
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > n_coords:
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        g = np.asarray(grads.get(name, np.zeros_like(arr))).reshape(-1)
        for i in coords:
            err = min(_rel_err(g[i], central(flat, i, h), floor) for h in (step, step * 1e-2))
            worst = max(worst, err)
    return worst


# --- checkpoints -----------------------------------------------------------

def _arrays_to_bytes(header, arrays):
    head = dict(header)
    head["keys"] = list(arrays)
    head["shapes"] = [list(a.shape) for a in arrays.values()]
    head_bytes = json.dumps(head, sort_keys=True).encode("ascii")
    buf = io.BytesIO()
    buf.write(ARRAY_MAGIC)
    buf.write(struct.pack("<II", ARRAY_VERSION, len(head_bytes)))
    buf.write(head_bytes)
    for a in arrays.values():
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return buf.getvalue()


def _arrays_from_bytes(data):
    if data[:len(ARRAY_MAGIC)] != ARRAY_MAGIC:
        raise CheckpointError("not an array blob")
    off = len(ARRAY_MAGIC)
    ver, hlen = struct.unpack("<II", data[off:off + 8])
    if ver != ARRAY_VERSION:
        raise CheckpointError(f"array blob version {ver} unsupported (expected {ARRAY_VERSION})")
    off += 8
    header = json.loads(data[off:off + hlen].decode("ascii"))
    flat = np.frombuffer(data[off + hlen:], dtype="<f4").astype(np.float64)
    arrays, pos = {}, 0
    for key, shape in zip(header["keys"], header["shapes"]):
        size = int(np.prod(shape))
        arrays[key] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    if pos != flat.size:
        raise CheckpointError("array blob payload size does not match its header")
    return header, arrays


def save_checkpoint(model: Model, directory):
    """Write ``embedder.bin``, ``proxies.bin`` and (if present) ``flow.bin``.

    Returns the list of written paths.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    e = model.embedder
    files = {
        "embedder.bin": _arrays_to_bytes(
            {"kind": e.kind, "in_dim": e.in_dim, "dim": e.dim, "hidden": e.hidden}, e.params),
        "proxies.bin": _arrays_to_bytes({"kind": "proxies"}, {"P": model.proxies.proxies}),
    }
    if model.flow is not None:
        files["flow.bin"] = flow_to_bytes(model.flow)
    paths = []
    for name, blob in files.items():
        (d / name).write_bytes(blob)
        paths.append(d / name)
    return paths


def load_checkpoint(directory) -> Model:
    d = Path(directory)
    header, arrays = _arrays_from_bytes((d / "embedder.bin").read_bytes())
    emb = Embedder(header["in_dim"], header["dim"], header["hidden"], kind=header["kind"])
    for k, v in arrays.items():
        emb.params[k] = v
    _, parr = _arrays_from_bytes((d / "proxies.bin").read_bytes())
    flow = None
    if (d / "flow.bin").exists():
        flow = flow_from_bytes((d / "flow.bin").read_bytes())
    return Model(emb, ProxySet(parr["P"]), flow)


def roundtrip_float32(model: Model) -> Model:
    """The model exactly as it would be reloaded from a checkpoint."""
    for arr in model.embedder.params.values():
        arr[...] = arr.astype(np.float32)
    model.proxies.proxies = model.proxies.proxies.astype(np.float32).astype(np.float64)
    if model.flow is not None:
        model.flow.set_params({k: v.astype(np.float32).astype(np.float64)
                               for k, v in model.flow.params().items()})
    return model
