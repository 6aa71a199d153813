import csv
import json
import math

import numpy as np
import pytest

from nirdml import cli
from nirdml import config as C
from nirdml.embedding import ProxySet
from nirdml.synthetic import Dataset, SyntheticSpec, make_benchmark, read_dataset, write_dataset
from nirdml.trainer import Embedder, Model, save_checkpoint

SMALL = ["--synth.num_classes", "6", "--synth.samples_per_class", "12", "--epochs", "2",
         "--train.classes_per_batch", "3", "--train.samples_per_class", "4",
         "--depth", "2", "--width", "16", "--lr", "1e-3", "--optim.lr_mult_proxies", "40",
         "--optim.lr_mult_flow", "0.5", "--eval.ks", "1,2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def record(path):
    return json.loads((path / "record.json").read_text())


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "runs"))
    return tmp_path / "runs"


class TestConfig:
    def test_precedence(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("train.epochs = 7  # from file\nnir.omega = 0.01\n")
        cfg = cli.resolve_config(path, {"train.epochs": 3}, "benchmark")
        assert cfg["train.epochs"] == 3
        assert cfg["nir.omega"] == 0.01
        assert cfg["optim.lr"] == C.PRESETS["benchmark"]["optim.lr"]
        assert cfg["flow.depth"] == C.DEFAULTS["flow.depth"]
        assert set(cfg) == set(C.DEFAULTS)

    def test_aliases_and_types(self):
        over = cli.parse_overrides(["--nir", "off", "--omega=0", "--placement", "mid",
                                    "--grad-clip", "none", "--seed", "4"])
        assert over == {"nir.enabled": False, "nir.omega": 0.0, "flow.placement": "mid",
                        "nir.grad_clip": None, "seed": 4}

    def test_dump_parses_back(self):
        cfg = C.resolve(None, {"nir.grad_clip": 2.5, "loss.name": "proxy_nca"})
        assert C.resolve(C.parse_lines(C.dump(cfg).splitlines())) == cfg

    @pytest.mark.parametrize("tokens", [["--nir.omegaa", "1"], ["--loss", "triplet"],
                                        ["--epochs", "two"], ["--nir", "maybe"], ["stray"]])
    def test_bad_overrides(self, tokens):
        with pytest.raises(C.ConfigError):
            cli.parse_overrides(tokens)

    def test_unknown_key_in_file_names_location(self, tmp_path, capsys):
        path = tmp_path / "c.cfg"
        path.write_text("seed = 1\nnir.omgea = 0.1\n")
        assert run("train", "--config", path) == 2
        err = capsys.readouterr().err
        assert err.startswith("error[config]") and "c.cfg:2" in err and "nir.omgea" in err

    def test_train_config_mapping(self):
        cfg = C.resolve(None, {"nir.enabled": False, "flow.placement": "end", "nir.omega": 0.0})
        tcfg = C.train_config(cfg)
        assert not tcfg.use_nir and tcfg.flow.placement == "end" and tcfg.nir.omega == 0.0


class TestGenData:
    def test_files(self, out):
        assert run("gen-data", *SMALL) == 0
        train_ds, test_ds = read_dataset(out / "data" / "train.txt"), read_dataset(out / "data" / "test.txt")
        assert train_ds.features.shape[0] + test_ds.features.shape[0] == 6 * 12
        ref_train, ref_test = make_benchmark(SyntheticSpec(num_classes=6, samples_per_class=12))
        np.testing.assert_array_equal(train_ds.features, ref_train.features)
        np.testing.assert_array_equal(test_ds.labels, ref_test.labels)

    def test_invalid_spec(self, out, capsys):
        assert run("gen-data", "--synth.split", "1.0") == 2
        assert "error[config]" in capsys.readouterr().err


class TestTrain:
    def test_record(self, out):
        assert run("train", *SMALL, "--name", "a") == 0
        rec = record(out / "a")
        assert rec["format"] == cli.RECORD_FORMAT
        assert set(rec["config"]) == set(C.DEFAULTS)
        assert len(rec["epochs"]) == 2 and len(rec["wall_clock"]) == 2
        assert rec["epochs"][0]["warmup"] and not rec["epochs"][1]["warmup"]
        for split in ("train", "test"):
            assert all(math.isfinite(v) for v in rec["final_metrics"][split].values())
        assert set(rec["checksums"]) == {"checkpoint/embedder.bin", "checkpoint/proxies.bin",
                                         "checkpoint/flow.bin"}

    def test_same_config_same_record(self, out, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(C.dump(C.resolve(None, cli.parse_overrides(SMALL))))
        assert run("train", "--config", cfg, "--name", "a") == 0
        assert run("train", "--config", cfg, "--name", "b") == 0
        a, b = record(out / "a"), record(out / "b")
        assert json.dumps(cli.strip_volatile(a), sort_keys=True) == \
            json.dumps(cli.strip_volatile(b), sort_keys=True)
        assert (out / "a" / "checkpoint" / "flow.bin").read_bytes() == \
            (out / "b" / "checkpoint" / "flow.bin").read_bytes()

    def test_record_reproduces_itself(self, out, tmp_path):
        assert run("train", *SMALL, "--seed", "3", "--name", "a") == 0
        rec = record(out / "a")
        cfg = tmp_path / "replay.cfg"
        cfg.write_text(C.dump(rec["config"]))
        assert run("train", "--config", cfg, "--name", "b") == 0
        assert record(out / "b")["final_metrics"] == rec["final_metrics"]

    def test_nir_off_never_touches_flow(self, out):
        assert run("train", *SMALL, "--nir", "off", "--name", "a") == 0
        # flow settings are irrelevant once NIR is off
        assert run("train", *SMALL, "--nir", "off", "--depth", "6", "--omega", "0.5",
                   "--name", "b") == 0
        a, b = record(out / "a"), record(out / "b")
        assert not (out / "a" / "checkpoint" / "flow.bin").exists()
        assert a["final_metrics"] == b["final_metrics"] and a["epochs"] == b["epochs"]
        assert all("nir" not in e and not e["warmup"] for e in a["epochs"])

    def test_omega_zero(self, out):
        assert run("train", *SMALL, "--omega", "0", "--name", "a") == 0
        rec = record(out / "a")
        assert rec["config"]["nir.omega"] == 0.0
        assert all("pdml" not in e and e["total"] == e["f_nir"] for e in rec["epochs"])

    @pytest.mark.parametrize("flag", [["--loss", "proxy_nca"], ["--loss", "proxy_nca_pp"],
                                      ["--loss", "proxy_nca_star"], ["--scaling", "softplus"],
                                      ["--placement", "mid"], ["--warmup", "0"],
                                      ["--proxy-backprop", "off"], ["--negative-pairs", "on"],
                                      ["--grad-clip", "1.0"], ["--self-reg", "generate"]])
    def test_flags(self, out, flag):
        assert run("train", *SMALL, "--epochs", "1", *flag, "--name", "f") == 0
        key, value = cli.ALIASES[flag[0][2:]], flag[1]
        assert record(out / "f")["config"][key] == C.parse_value(key, value)

    def test_data_files(self, out, tmp_path):
        assert run("gen-data", *SMALL, "--out", tmp_path / "d") == 0
        assert run("train", *SMALL, "--data.train", tmp_path / "d" / "train.txt",
                   "--data.test", tmp_path / "d" / "test.txt", "--out", tmp_path / "r") == 0
        rec = record(tmp_path / "r")
        assert rec["checksums"]["data.train"] == cli.sha256(tmp_path / "d" / "train.txt")

    def test_non_finite_loss_exit(self, out, tmp_path, capsys):
        ds = make_benchmark(SyntheticSpec(num_classes=6, samples_per_class=12))[0]
        ds.features[:] = np.nan
        write_dataset(ds, tmp_path / "nan.txt")
        code = run("train", *SMALL, "--warmup", "0", "--data.train", tmp_path / "nan.txt")
        assert code == 4
        assert "error[numerics]" in capsys.readouterr().err

    def test_insufficient_classes_exit(self, out, capsys):
        assert run("train", *SMALL, "--train.classes_per_batch", "8") == 3
        assert "error[data]" in capsys.readouterr().err

    def test_missing_data_exit(self, out, tmp_path, capsys):
        assert run("train", "--data.train", tmp_path / "nope.txt") == 6
        assert "error[io]" in capsys.readouterr().err


class TestEval:
    def test_replays_record(self, out, tmp_path):
        assert run("gen-data", *SMALL, "--out", tmp_path / "d") == 0
        assert run("train", *SMALL, "--data.train", tmp_path / "d" / "train.txt",
                   "--data.test", tmp_path / "d" / "test.txt", "--name", "a") == 0
        assert run("eval", "--checkpoint", out / "a" / "checkpoint", "--data",
                   tmp_path / "d" / "test.txt", "--ks", "1,2", "--out", tmp_path / "rep.json") == 0
        report = json.loads((tmp_path / "rep.json").read_text())
        assert report == record(out / "a")["final_metrics"]["test"]

    def test_identity_embedder_on_orthogonal_clusters(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        y = np.repeat(np.arange(4), 5)
        x = np.eye(4)[y] * 3 + 0.05 * rng.standard_normal((20, 4))
        write_dataset(Dataset(x, y, "test"), tmp_path / "orth.txt")
        save_checkpoint(Model(Embedder(4, 4, kind="identity"), ProxySet(np.eye(4))), tmp_path / "ck")
        assert run("eval", "--checkpoint", tmp_path / "ck", "--data", tmp_path / "orth.txt") == 0
        report = json.loads(capsys.readouterr().out)
        assert report["recall_at_1"] == 1.0
        assert all(math.isfinite(v) for v in report.values())

    def test_dimension_mismatch(self, tmp_path, capsys):
        write_dataset(Dataset(np.ones((4, 3)), np.array([0, 0, 1, 1]), "test"), tmp_path / "d.txt")
        save_checkpoint(Model(Embedder(4, 4, kind="identity"), ProxySet(np.eye(4))), tmp_path / "ck")
        assert run("eval", "--checkpoint", tmp_path / "ck", "--data", tmp_path / "d.txt") == 3

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        write_dataset(Dataset(np.ones((4, 4)), np.array([0, 0, 1, 1]), "test"), tmp_path / "d.txt")
        save_checkpoint(Model(Embedder(4, 4, kind="identity"), ProxySet(np.eye(4))), tmp_path / "ck")
        (tmp_path / "ck" / "embedder.bin").write_bytes(b"junk")
        assert run("eval", "--checkpoint", tmp_path / "ck", "--data", tmp_path / "d.txt") == 5
        assert "error[checkpoint]" in capsys.readouterr().err


class TestAblate:
    def test_parse_sweep(self):
        assert cli.parse_sweep(["seed = 0, 1", "nir.omega = 0.0, 0.1"]) == [
            {"seed": 0, "nir.omega": 0.0}, {"seed": 0, "nir.omega": 0.1},
            {"seed": 1, "nir.omega": 0.0}, {"seed": 1, "nir.omega": 0.1}]
        assert cli.parse_sweep(["mode = listed", "seed = 0, 1", "flow.depth = 2, 4"]) == [
            {"seed": 0, "flow.depth": 2}, {"seed": 1, "flow.depth": 4}]
        with pytest.raises(C.ConfigError):
            cli.parse_sweep(["mode = listed", "seed = 0, 1", "flow.depth = 2"])
        with pytest.raises(C.ConfigError):
            cli.parse_sweep(["flow.dept = 2"])

    def test_seed_sweep_summary(self, out, tmp_path):
        sweep = tmp_path / "s.txt"
        sweep.write_text("seed = 0, 1, 2\n")
        assert run("ablate", *SMALL, "--epochs", "1", "--sweep", sweep, "--name", "ab") == 0
        with open(out / "ab" / "summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1 and rows[0]["n"] == "3"
        # independent aggregation from the per-run records
        r1 = [record(out / "ab" / f"run_{i:03d}")["final_metrics"]["test"]["recall_at_1"]
              for i in range(3)]
        assert float(rows[0]["test.recall_at_1.mean"]) == pytest.approx(sum(r1) / 3, abs=1e-12)
        mean = sum(r1) / 3
        std = math.sqrt(sum((v - mean) ** 2 for v in r1) / 2)
        assert float(rows[0]["test.recall_at_1.std"]) == pytest.approx(std, abs=1e-12)
        with open(out / "ab" / "metrics.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 3

    def test_placement_sweep(self, out, tmp_path):
        sweep = tmp_path / "s.txt"
        sweep.write_text("flow.placement = all, start, mid, end\n")
        assert run("ablate", *SMALL, "--epochs", "1", "--sweep", sweep, "--name", "pl") == 0
        with open(out / "pl" / "summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["flow.placement"] for r in rows] == ["all", "start", "mid", "end"]
        assert all(r["n"] == "1" for r in rows)
        assert {record(out / "pl" / f"run_{i:03d}")["config"]["flow.placement"]
                for i in range(4)} == {"all", "start", "mid", "end"}

    def test_summarize_oracle(self):
        points = [{"seed": s, "flow.depth": d} for d in (2, 4) for s in (0, 1)]
        recs = [{"final_metrics": {"test": {"m": v}}} for v in (1.0, 3.0, 10.0, 20.0)]
        rows = cli.summarize(points, recs, ["flow.depth"])
        assert rows[0]["test.m.mean"] == 2.0 and rows[0]["test.m.std"] == pytest.approx(math.sqrt(2))
        assert rows[1]["test.m.mean"] == 15.0 and rows[1]["test.m.std"] == pytest.approx(math.sqrt(50))


class TestGradcheckCommand:
    def test_pass_and_fail(self, monkeypatch, capsys):
        monkeypatch.setattr(cli, "gradcheck_suite", lambda seed: {"a": 1e-7, "b": 2e-6})
        assert run("gradcheck") == 0
        monkeypatch.setattr(cli, "gradcheck_suite", lambda seed: {"a": 1e-7, "b": 0.3})
        assert run("gradcheck", "--seed", "2") == 4
        captured = capsys.readouterr()
        assert "FAIL b" in captured.out and "error[numerics]" in captured.err

    def test_suite_small(self):
        results = cli.gradcheck_suite(seed=5, n_coords=15)
        assert set(results) == {"proxy_nca", "proxy_nca_pp", "proxy_anchor", "proxy_nca_star",
                                "combined[all]", "combined[start]", "combined[mid]", "combined[end]"}
        assert max(results.values()) < 1e-4
