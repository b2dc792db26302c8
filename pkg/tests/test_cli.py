import csv
import json

import numpy as np
import pytest

from dualgan.cli import CONFIG_KEYS, build_config, build_parser, main
from dualgan.data import load_csv, load_model
from dualgan.indicators import average_position


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--seed", "3"]) == 0
    return out


def read_scores(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [r["row_id"] for r in rows], np.array([float(r["os"]) for r in rows])


class TestSynth:
    def test_counts(self, synth):
        tr, te = load_csv(synth / "train.csv"), load_csv(synth / "test.csv")
        assert (tr.n, te.n) == (522, 525)
        assert tr.identified.sum() == 5

    def test_same_seed_identical(self, synth, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--seed", "3"]) == 0
        for name in ("train.csv", "test.csv"):
            assert (tmp_path / name).read_bytes() == (synth / name).read_bytes()

    def test_bad_spec_no_output(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text('{"normal_spread": 0.05, "colour": 1}')
        out = tmp_path / "o"
        assert main(["synth", "--out", str(out), "--spec", str(spec)]) == 2
        assert not out.exists()
        assert "colour" in capsys.readouterr().err

    def test_env_seed(self, tmp_path, monkeypatch, synth):
        monkeypatch.setenv("DUALGAN_SEED", "3")
        assert main(["synth", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "train.csv").read_bytes() == (synth / "train.csv").read_bytes()


class TestFit:
    def fit(self, synth, tmp_path, name, *extra):
        model, report = tmp_path / f"{name}.json", tmp_path / f"{name}_report.json"
        rc = main(["fit", "--train", str(synth / "train.csv"), "--mode", "rcc_dual_gan",
                   "--model", str(model), "--report", str(report), "--seed", "1",
                   "--max-iters", "25", *extra])
        return rc, model, report

    def test_artifacts_and_determinism(self, synth, tmp_path):
        rc, m1, r1 = self.fit(synth, tmp_path, "a")
        assert rc == 0
        doc = json.loads(m1.read_text())
        assert doc["format_version"] == 1 and doc["best_ap"] is not None
        _, m2, r2 = self.fit(synth, tmp_path, "b")
        assert m1.read_bytes() == m2.read_bytes() and r1.read_bytes() == r2.read_bytes()

    def test_score_reproduces_best_ap(self, synth, tmp_path):
        _, model, _ = self.fit(synth, tmp_path, "a")
        out = tmp_path / "os.csv"
        assert main(["score", "--model", str(model), "--data", str(synth / "train.csv"), "--out", str(out)]) == 0
        ids, os_ = read_scores(out)
        train = load_csv(synth / "train.csv")
        assert ids == [str(i) for i in train.row_ids]
        assert np.all((os_ >= 0) & (os_ <= 1))
        # AP is computed over unlabeled rows followed by identified rows
        order = np.r_[np.flatnonzero(~train.identified), np.flatnonzero(train.identified)]
        flags = np.r_[np.zeros((~train.identified).sum(), bool), np.ones(train.identified.sum(), bool)]
        assert average_position(1 - os_[order], flags) == pytest.approx(load_model(model).best_ap, abs=1e-12)

    def test_malformed_key(self, synth, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"nnr": {"qq": 3}}')
        rc, model, _ = self.fit(synth, tmp_path, "x", "--config", str(cfg))
        assert rc == 2 and not model.exists()
        assert "nnr.qq" in capsys.readouterr().err

    def test_sup_without_anomalies(self, tmp_path):
        data = tmp_path / "d.csv"
        data.write_text("f1,f2\n0.1,0.2\n0.3,0.4\n0.5,0.1\n")
        assert main(["fit", "--train", str(data), "--mode", "sup_gan", "--model", str(tmp_path / "m.json")]) == 2

    def test_dual_without_anomalies_warns(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        data = tmp_path / "d.csv"
        data.write_text("f1,f2\n" + "\n".join(f"{a},{b}" for a, b in rng.uniform(size=(30, 2))) + "\n")
        rc = main(["fit", "--train", str(data), "--mode", "dual_gan", "--model", str(tmp_path / "m.json"),
                   "--max-iters", "3"])
        assert rc == 0
        assert "event=warning" in capsys.readouterr().err


class TestScore:
    def test_errors(self, synth, tmp_path):
        _, model, _ = TestFit().fit(synth, tmp_path, "a")
        empty = tmp_path / "e.csv"
        empty.write_text("f1,f2\n")
        assert main(["score", "--model", str(model), "--data", str(empty), "--out", str(tmp_path / "o.csv")]) == 2
        wide = tmp_path / "w.csv"
        wide.write_text("f1,f2,f3\n0.1,0.2,0.3\n")
        out = tmp_path / "o2.csv"
        assert main(["score", "--model", str(model), "--data", str(wide), "--out", str(out)]) == 2
        assert not out.exists()


class TestBenchSweep:
    def test_bench_ranks_rcc_first(self, synth, tmp_path):
        out = tmp_path / "b"
        assert main(["bench", "--datasets", str(synth), "--methods", "knn,rcc_dual_gan",
                     "--seeds", "0", "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())["summary"]
        assert summary["order"][0] == "rcc_dual_gan"

    def test_bench_partial_failure(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text('{"identified": 0}')
        data = tmp_path / "d"
        assert main(["synth", "--out", str(data), "--seed", "0", "--spec", str(spec)]) == 0
        out = tmp_path / "o"
        assert main(["bench", "--datasets", str(data), "--methods", "knn,sup_gan", "--seeds", "0",
                     "--out", str(out)]) == 3
        summary = json.loads((out / "summary.json").read_text())["summary"]
        assert summary["missing"] == [{"dataset": "d", "method": "sup_gan"}]
        assert summary["order"] == ["knn"]

    def test_missing_glob(self, tmp_path):
        assert main(["bench", "--datasets", str(tmp_path / "none*"), "--methods", "knn",
                     "--out", str(tmp_path / "o")]) == 2

    def test_sweep_four_ratios_and_determinism(self, synth, tmp_path):
        args = ["sweep", "--dataset", str(synth), "--methods", "knn", "--ratios", "0,0.1,0.5,1.0", "--seeds", "0"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        rows = (tmp_path / "a" / "sweep.csv").read_text().splitlines()
        assert len(rows) == 5
        for name in ("sweep.csv", "sweep.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_unknown_method(self, synth, tmp_path):
        assert main(["bench", "--datasets", str(synth), "--methods", "svm", "--out", str(tmp_path / "o")]) == 2


class TestConfig:
    def test_help_lists_every_key(self, capsys):
        with pytest.raises(SystemExit):
            main(["fit", "--help"])
        text = capsys.readouterr().out
        for key in CONFIG_KEYS:
            assert key in text

    def test_precedence(self, tmp_path, monkeypatch):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"k": 3, "max_iters": 7, "nnr": {"q": 5}, "rng_seed": 11}')
        monkeypatch.setenv("DUALGAN_SEED", "99")
        p = build_parser()
        a = p.parse_args(["fit", "--train", "x", "--model", "y", "--config", str(cfg), "--k", "4",
                          "--set", "nnr.q=7"])
        c = build_config(a, mode="dual_gan")
        assert (c.k, c.max_iters, c.nnr.q, c.rng_seed, c.mode) == (4, 7, 7, 11, "dual_gan")
        b = p.parse_args(["fit", "--train", "x", "--model", "y"])
        assert build_config(b).rng_seed == 99
        d = p.parse_args(["fit", "--train", "x", "--model", "y", "--seed", "2", "--config", str(cfg)])
        assert build_config(d).rng_seed == 2
