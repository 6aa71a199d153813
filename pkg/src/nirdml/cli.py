"""Experiment command line: ``gen-data``, ``train``, ``eval``, ``ablate``, ``gradcheck``.

Outputs go under ``$NIRDML_OUT`` (default ``./runs``) unless ``--out`` is given.
Every run writes a JSON RunRecord holding the resolved config, per-epoch loss
components and timings, final metrics per split, and artifact checksums.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as C
from .embedding import EmbeddingBatch, ProxySet
from .errors import ConfigError, DimensionMismatch, NirError, NonFiniteLoss
from .losses import LOSS_NAMES, ProxyAnchorParams, get_loss
from .metrics import evaluate
from .nir import NirConfig, combined_objective
from .flow import ConditionalFlow
from .synthetic import make_benchmark, read_dataset, write_dataset
from .trainer import grad_check, load_checkpoint, roundtrip_float32, save_checkpoint, train

OUT_ENV = "NIRDML_OUT"
RECORD_FORMAT = "nirdml-run/1"
# fields that legitimately differ between otherwise identical runs
VOLATILE_FIELDS = ("created", "wall_clock")

ALIASES = {
    "nir": "nir.enabled",
    "omega": "nir.omega",
    "loss": "loss.name",
    "scaling": "nir.scaling",
    "temperature": "nir.temperature",
    "placement": "flow.placement",
    "depth": "flow.depth",
    "width": "flow.width",
    "warmup": "train.warmup_epochs",
    "epochs": "train.epochs",
    "lr": "optim.lr",
    "proxy-backprop": "nir.proxy_backprop",
    "negative-pairs": "nir.negative_pairs",
    "grad-clip": "nir.grad_clip",
    "self-reg": "nir.self_reg",
    "seed": "seed",
}


def out_root(explicit=None):
    return Path(explicit or os.environ.get(OUT_ENV, "runs"))


def parse_overrides(tokens):
    """``--key value`` / ``--key=value`` pairs into typed config values."""
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        name, eq, value = tok[2:].partition("=")
        if not eq:
            value = next(it, None)
            if value is None:
                raise ConfigError(f"--{name} needs a value")
        key = ALIASES.get(name, name)
        out[key] = C.parse_value(key, value)
    return out


def resolve_config(config_path, overrides, preset=None):
    file_values = C.load_file(config_path) if config_path else {}
    return C.resolve(file_values, overrides, preset)


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- gen-data --------------------------------------------------------------

def gen_data(cfg, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = make_benchmark(C.synthetic_spec(cfg))
    return [write_dataset(train_ds, out_dir / "train.txt"),
            write_dataset(test_ds, out_dir / "test.txt")]


# --- train -----------------------------------------------------------------

def _load_splits(cfg):
    if cfg["data.train"]:
        train_ds = read_dataset(cfg["data.train"])
        test_ds = read_dataset(cfg["data.test"]) if cfg["data.test"] else None
        return train_ds, test_ds
    # no files given: draw the synthetic benchmark described by synth.*
    return make_benchmark(C.synthetic_spec(cfg))


def run_training(cfg, run_dir):
    """Train from a resolved config and write ``record.json`` plus a checkpoint."""
    run_dir = Path(run_dir)
    tcfg = C.train_config(cfg)
    train_ds, test_ds = _load_splits(cfg)
    test_x = test_ds.features if test_ds is not None else None
    test_y = test_ds.labels if test_ds is not None else None
    model, log = train(train_ds.features, train_ds.labels, tcfg, test_x, test_y)

    # report what a reloaded checkpoint would produce
    roundtrip_float32(model)
    ckpt_dir = run_dir / "checkpoint"
    files = save_checkpoint(model, ckpt_dir)
    ks = C.eval_ks(cfg)
    splits = {"train": train_ds} if test_ds is None else {"train": train_ds, "test": test_ds}
    final = {name: evaluate(model.embedder.embed(ds.features), ds.labels, ks=ks,
                            seed=cfg["eval.nmi_seed"]).to_flat()
             for name, ds in splits.items()}
    checksums = {f"checkpoint/{p.name}": sha256(p) for p in files}
    for key in ("data.train", "data.test"):
        if cfg[key]:
            checksums[key] = sha256(cfg[key])

    record = {
        "format": RECORD_FORMAT,
        "config": cfg,
        "seed": cfg["seed"],
        "epochs": [{k: v for k, v in rec.items() if k != "seconds"} for rec in log],
        "final_metrics": final,
        "wall_clock": [rec["seconds"] for rec in log],
        "checksums": checksums,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "record.json").write_text(json.dumps(record, indent=2, sort_keys=True,
                                                     allow_nan=False) + "\n")
    return record


def strip_volatile(record):
    return {k: v for k, v in record.items() if k not in VOLATILE_FIELDS}


# --- eval ------------------------------------------------------------------

def evaluate_checkpoint(checkpoint_dir, data_path, ks=(1, 2, 4, 8), seed=0):
    model = load_checkpoint(checkpoint_dir)
    ds = read_dataset(data_path)
    if ds.dim != model.embedder.in_dim:
        raise DimensionMismatch(f"checkpoint expects {model.embedder.in_dim} features, "
                                f"data has {ds.dim}")
    return evaluate(model.embedder.embed(ds.features), ds.labels, ks=ks, seed=seed)


# --- ablate ----------------------------------------------------------------

def parse_sweep(lines, source="<sweep>"):
    """Sweep file: ``key = v1, v2, ...`` per line; ``mode = cartesian|listed``.

    Cartesian mode crosses every axis; listed mode zips axes of equal length.
    Returns the list of override dicts, one per sweep point.
    """
    axes, mode = {}, "cartesian"
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = v1, v2, ...'")
        key, values = (s.strip() for s in line.split("=", 1))
        if key == "mode":
            if values not in ("cartesian", "listed"):
                raise ConfigError(f"{source}:{lineno}: mode must be cartesian or listed")
            mode = values
            continue
        try:
            axes[key] = [C.parse_value(key, v) for v in values.split(",")]
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    if not axes:
        return [{}]
    keys = list(axes)
    if mode == "listed":
        lengths = {len(v) for v in axes.values()}
        if len(lengths) != 1:
            raise ConfigError(f"{source}: listed sweep axes must have equal length")
        combos = zip(*axes.values())
    else:
        combos = itertools.product(*axes.values())
    return [dict(zip(keys, combo)) for combo in combos]


def _run_point(args):
    cfg, run_dir = args
    return run_training(cfg, run_dir)


def flat_metrics(record):
    return {f"{split}.{k}": v for split, m in sorted(record["final_metrics"].items())
            for k, v in m.items()}


def summarize(points, records, group_keys):
    """Mean and sample std of every final metric, grouped by the non-seed sweep keys."""
    groups = {}
    for point, rec in zip(points, records):
        gid = tuple(point.get(k) for k in group_keys)
        groups.setdefault(gid, []).append(flat_metrics(rec))
    rows = []
    for gid, metrics in groups.items():
        row = dict(zip(group_keys, gid))
        row["n"] = len(metrics)
        for name in metrics[0]:
            vals = np.array([m[name] for m in metrics], dtype=np.float64)
            row[f"{name}.mean"] = float(vals.mean())
            row[f"{name}.std"] = float(vals.std(ddof=1)) if len(vals) > 1 else float("nan")
        rows.append(row)
    return rows


def _write_csv(path, rows):
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def ablate(base_cfg, points, out_dir, jobs=1):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(C.resolve(base_cfg, p), out_dir / f"run_{i:03d}") for i, p in enumerate(points)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_point, tasks))
    else:
        records = [_run_point(t) for t in tasks]

    swept = list(points[0]) if points else []
    rows = [{"run": f"run_{i:03d}", **p, **flat_metrics(r)}
            for i, (p, r) in enumerate(zip(points, records))]
    _write_csv(out_dir / "metrics.csv", rows)
    summary = summarize(points, records, [k for k in swept if k != "seed"])
    _write_csv(out_dir / "summary.csv", summary)
    return records, summary


# --- gradcheck -------------------------------------------------------------

def gradcheck_suite(seed=0, n=8, dim=8, num_classes=4, depth=2, n_coords=200):
    """Worst relative gradient error for every loss and the combined objective."""
    rng = np.random.default_rng(seed)
    psi = rng.standard_normal((n, dim))
    psi /= np.linalg.norm(psi, axis=1, keepdims=True)
    labels = np.arange(n) % num_classes
    P = ProxySet.init_random(num_classes, dim, seed=seed + 1).proxies
    results = {}

    for name in LOSS_NAMES:
        loss = get_loss(name, ProxyAnchorParams())

        def fn(p, loss=loss):
            out = loss(EmbeddingBatch(p["psi"], labels), ProxySet(p["P"]))
            return out.value, {"psi": out.d_embeddings, "P": out.d_proxies}

        results[name] = grad_check(fn, {"psi": psi.copy(), "P": P.copy()}, n_coords=n_coords, seed=seed)

    for placement in ("all", "start", "mid", "end"):
        flow = ConditionalFlow(dim, depth=depth, width=16, placement=placement, seed=seed)
        flow.randomize(0.1, seed=seed)
        dml = get_loss("proxy_anchor", ProxyAnchorParams())
        cfg = NirConfig()
        params = {"psi": psi.copy(), "P": P.copy()}
        params.update({f"flow.{k}": v.copy() for k, v in flow.params().items()})

        def fn(p, flow=flow, dml=dml, cfg=cfg):
            flow.set_params({k[5:]: v for k, v in p.items() if k.startswith("flow.")})
            out = combined_objective(EmbeddingBatch(p["psi"], labels), ProxySet(p["P"]),
                                     flow, dml, cfg)
            g = {"psi": out.d_embeddings, "P": out.d_proxies}
            g.update({f"flow.{k}": v for k, v in out.d_flow.items()})
            return out.value, g

        results[f"combined[{placement}]"] = grad_check(fn, params, n_coords=n_coords, seed=seed)
    return results


# --- entry point -----------------------------------------------------------

def _build_parser():
    ap = argparse.ArgumentParser(prog="nirdml", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic train/test tables")
    g.add_argument("--config")
    g.add_argument("--preset", choices=sorted(C.PRESETS))
    g.add_argument("--out", help="output directory (default $NIRDML_OUT/data)")

    t = sub.add_parser("train", help="train one model and write its RunRecord")
    t.add_argument("--config")
    t.add_argument("--preset", choices=sorted(C.PRESETS))
    t.add_argument("--name", default="run")
    t.add_argument("--out", help="run directory (default $NIRDML_OUT/<name>)")

    e = sub.add_parser("eval", help="metrics of a checkpoint on a dataset table")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ks", default="1,2,4,8")
    e.add_argument("--nmi-seed", type=int, default=0)
    e.add_argument("--out", help="write the report here instead of stdout")

    a = sub.add_parser("ablate", help="sweep config keys and summarize over seeds")
    a.add_argument("--config")
    a.add_argument("--preset", choices=sorted(C.PRESETS))
    a.add_argument("--sweep", required=True)
    a.add_argument("--name", default="ablate")
    a.add_argument("--out")
    a.add_argument("--jobs", type=int, default=1)

    c = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    return ap


def _run(argv):
    args, rest = _build_parser().parse_known_args(argv)
    if args.command in ("eval", "gradcheck") and rest:
        raise ConfigError(f"unexpected arguments {rest}")

    if args.command == "gen-data":
        cfg = resolve_config(args.config, parse_overrides(rest), args.preset)
        for p in gen_data(cfg, args.out or out_root() / "data"):
            print(p)
        return 0

    if args.command == "train":
        cfg = resolve_config(args.config, parse_overrides(rest), args.preset)
        run_dir = Path(args.out) if args.out else out_root() / args.name
        rec = run_training(cfg, run_dir)
        print(run_dir / "record.json")
        for split, m in rec["final_metrics"].items():
            print(f"{split}: R@1={m['recall_at_1']:.4f} NMI={m['nmi']:.4f} "
                  f"rho={m['spectral_decay']:.4f}")
        return 0

    if args.command == "eval":
        ks = tuple(int(k) for k in args.ks.split(","))
        report = evaluate_checkpoint(args.checkpoint, args.data, ks, args.nmi_seed)
        text = json.dumps(report.to_flat(), sort_keys=True) + "\n"
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return 0

    if args.command == "ablate":
        base = resolve_config(args.config, parse_overrides(rest), args.preset)
        points = parse_sweep(Path(args.sweep).read_text().splitlines(), args.sweep)
        out_dir = Path(args.out) if args.out else out_root() / args.name
        _, summary = ablate(base, points, out_dir, args.jobs)
        print(out_dir / "summary.csv")
        swept = [k for k in (points[0] if points else {}) if k != "seed"]
        for row in summary:
            label = " ".join(f"{k}={row[k]}" for k in swept) or "all"
            print(f"{label}: n={row['n']} "
                  f"test R@1={row.get('test.recall_at_1.mean', row['train.recall_at_1.mean']):.4f}")
        return 0

    if args.command == "gradcheck":
        results = gradcheck_suite(args.seed)
        bad = 0
        for name, err in results.items():
            ok = err < args.tol
            bad += not ok
            print(f"{'ok  ' if ok else 'FAIL'} {name}: {err:.2e}")
        if bad:
            print(f"error[numerics]: {bad} gradient check(s) above {args.tol:g}", file=sys.stderr)
            return 4
        return 0
    return 2


EXIT_CODES = {"config": 2, "input": 3, "data": 3, "numerics": 4, "checkpoint": 5}


def main(argv=None):
    try:
        return _run(sys.argv[1:] if argv is None else argv)
    except NonFiniteLoss as exc:
        print(f"error[numerics]: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_CODES["numerics"]
    except NirError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except (OSError, KeyError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 6
    except ValueError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]


if __name__ == "__main__":
    sys.exit(main())
