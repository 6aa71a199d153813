"""Desk-scale benchmark with anisotropic, multi-modal classes.

Every class is a mixture of ``submodes`` vMF clusters on the sphere whose
means scatter around a class center. The on-sphere points are lifted to
``ambient_dim`` raw features with a fixed random linear map plus noise,
and classes are split into disjoint train and test sets.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import l2_normalize
from .errors import InvalidSpec


def _tangent_directions(mu, n, rng):
    v = rng.standard_normal((n, mu.size))
    v -= np.outer(v @ mu, mu)
    return l2_normalize(v)


def _sample_cosines(kappa, d, n, rng):
    """Wood's envelope-rejection sampler for ``w = <x, mu>``."""
    m1 = d - 1.0
    b = m1 / (np.sqrt(4.0 * kappa ** 2 + m1 ** 2) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m1 * np.log(1.0 - x0 ** 2)
    out = np.empty(0)
    while out.size < n:
        k = max(2 * (n - out.size), 16)
        z = rng.beta(m1 / 2.0, m1 / 2.0, size=k)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=k)
        ok = kappa * w + m1 * np.log(1.0 - x0 * w) - c >= np.log(u)
        out = np.concatenate([out, w[ok]])
    return out[:n]


def sample_vmf(mu, kappa, n, seed=None, rng=None):
    """`n` draws from vMF(mu, kappa) on the unit sphere, one per row."""
    mu = l2_normalize(np.asarray(mu, dtype=np.float64))
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    if mu.size < 2:
        raise ValueError("vMF sampling needs d >= 2")
    rng = np.random.default_rng(seed) if rng is None else rng
    w = _sample_cosines(float(kappa), mu.size, n, rng)
    v = _tangent_directions(mu, n, rng)
    x = w[:, None] * mu[None, :] + np.sqrt(np.clip(1.0 - w ** 2, 0.0, None))[:, None] * v
    return l2_normalize(x)


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    samples_per_class: int = 60
    sphere_dim: int = 16
    ambient_dim: int = 32
    submodes: int = 3
    within_submode_kappa: float = 50.0
    submode_spread: float = 1.0
    noise: float = 0.02
    nuisance_dim: int = 8
    nuisance_scale: float = 0.5
    split: float = 0.5
    seed: int = 0

    def validate(self):
        ints = (self.num_classes, self.samples_per_class, self.sphere_dim,
                self.ambient_dim, self.submodes)
        if min(ints) < 1:
            raise InvalidSpec("all counts must be positive")
        if self.sphere_dim < 2:
            raise InvalidSpec("sphere_dim must be >= 2")
        if not (self.within_submode_kappa > 0 and self.submode_spread >= 0 and self.noise >= 0):
            raise InvalidSpec("kappa must be positive; spread and noise non-negative")
        n_test = self.num_test_classes
        if not 1 <= n_test < self.num_classes:
            raise InvalidSpec(f"split {self.split} leaves no train or no test classes")

    @property
    def num_test_classes(self):
        return int(round(self.split * self.num_classes))


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    # ground-truth generator state; absent for loaded files
    sphere: np.ndarray = None
    submodes: np.ndarray = None

    @property
    def dim(self):
        return self.features.shape[1]


def make_benchmark(spec: SyntheticSpec = SyntheticSpec()):
    """Return ``(train, test)`` datasets with disjoint, contiguously relabeled classes."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.sphere_dim
    centers = l2_normalize(rng.standard_normal((spec.num_classes, d)))
    lift = rng.standard_normal((d, spec.ambient_dim)) / np.sqrt(d)

    points, labels, submodes = [], [], []
    for c in range(spec.num_classes):
        offsets = rng.standard_normal((spec.submodes, d))
        offsets -= np.outer(offsets @ centers[c], centers[c])
        means = l2_normalize(centers[c] + spec.submode_spread * offsets / np.sqrt(d))
        assign = np.arange(spec.samples_per_class) % spec.submodes
        for m in range(spec.submodes):
            k = int(np.sum(assign == m))
            points.append(sample_vmf(means[m], spec.within_submode_kappa, k, rng=rng))
            labels.append(np.full(k, c))
            submodes.append(np.full(k, c * spec.submodes + m))
    sphere = np.concatenate(points)
    labels = np.concatenate(labels)
    submodes = np.concatenate(submodes)
    feats = sphere @ lift + spec.noise * rng.standard_normal((sphere.shape[0], spec.ambient_dim))
    if spec.nuisance_dim:
        # class-independent variation the embedder has to learn to ignore
        nuis_lift = rng.standard_normal((spec.nuisance_dim, spec.ambient_dim)) / np.sqrt(spec.nuisance_dim)
        feats += spec.nuisance_scale * rng.standard_normal((sphere.shape[0], spec.nuisance_dim)) @ nuis_lift

    test_classes = np.sort(rng.choice(spec.num_classes, spec.num_test_classes, replace=False))
    is_test = np.isin(labels, test_classes)

    def subset(mask, tag):
        uniq, relabeled = np.unique(labels[mask], return_inverse=True)
        return Dataset(feats[mask], relabeled.astype(np.int64), tag,
                       sphere[mask], submodes[mask])

    return subset(~is_test, "train"), subset(is_test, "test")


# --- text table format -----------------------------------------------------

def write_dataset(ds: Dataset, path):
    """Header ``# D=<dim> split=<tag>``, then ``label, f_0, ..., f_{D-1}`` rows."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"# D={ds.dim} split={ds.split}\n")
        for lab, row in zip(ds.labels, ds.features):
            fh.write(str(int(lab)) + ", " + ", ".join(repr(float(v)) for v in row) + "\n")
    return path


def read_dataset(path) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise InvalidSpec(f"{path}: missing '# D=... split=...' header")
        fields = dict(tok.split("=", 1) for tok in header[1:].split())
        dim = int(fields["D"])
        rows = [line.split(",") for line in fh if line.strip()]
    if not rows:
        raise InvalidSpec(f"{path}: no samples")
    if any(len(r) != dim + 1 for r in rows):
        raise InvalidSpec(f"{path}: rows must have {dim + 1} columns")
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    feats = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    return Dataset(feats, labels, fields.get("split", "unknown"))
