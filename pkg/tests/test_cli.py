import csv
import json
import subprocess
import sys
import time

import pytest

from groc.cli import main, parse_budgets
from groc.config import ConfigError, build_config, config_hash


def tree_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "sbm-small"
    assert main(["generate", "--preset", "sbm-small", "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def fixture_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "sbm"
    assert main(["generate", "--preset", "sbm", "--seed", "7", "--out", str(out)]) == 0
    return out


FAST = ["--config", "n_epochs=3", "--config", "n_hidden=8"]


class TestGenerate:
    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert main(["generate", "--preset", "sbm", "--seed", "7", "--out", str(tmp_path / name)]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_missing_out(self):
        proc = subprocess.run([sys.executable, "-m", "groc", "generate", "--preset", "sbm"],
                              capture_output=True)
        assert proc.returncode == 2

    def test_sizes(self, tmp_path):
        assert main(["generate", "--sizes", "100,100", "--out", str(tmp_path / "g")]) == 0
        assert len((tmp_path / "g" / "labels.csv").read_text().splitlines()) == 200

    def test_refuses_non_empty(self, tmp_path):
        (tmp_path / "junk").write_text("x")
        assert main(["generate", "--out", str(tmp_path)]) == 2
        assert main(["generate", "--out", str(tmp_path), "--force"]) == 0


class TestTrain:
    def test_outputs_and_manifest(self, small_data, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--data", str(small_data), "--method", "groc", "--out", str(out), *FAST]) == 0
        manifest = json.loads((out / "run_manifest.json").read_text())
        cfg = build_config("groc", "sbm", ["n_epochs=3", "n_hidden=8"], 0)
        assert manifest["config_hash"] == config_hash(cfg)
        assert json.loads((out / "config.json").read_text()) == cfg.to_dict()
        for rel in manifest["artifacts"].values():
            assert (out / rel).exists()
        rows = (out / "embeddings.csv").read_text().splitlines()
        assert len(rows) == 40 and all(len(r.split(",")) == 8 for r in rows)
        assert (out / "train_report.csv").read_text().startswith("epoch,loss,removed,inserted,seconds")

    def test_deterministic_embeddings(self, small_data, tmp_path):
        for name in ("a", "b"):
            args = ["train", "--data", str(small_data), "--method", "groc", "--seed", "0",
                    "--out", str(tmp_path / name), *FAST]
            assert main(args) == 0
        assert (tmp_path / "a" / "embeddings.csv").read_bytes() == (tmp_path / "b" / "embeddings.csv").read_bytes()

    def test_rejects_invalid_key(self, small_data, tmp_path):
        code = main(["train", "--data", str(small_data), "--method", "grace", "--config", "q_plus=0.1",
                     "--out", str(tmp_path / "x")])
        assert code == 2

    def test_rejects_unknown_key(self, small_data, tmp_path):
        code = main(["train", "--data", str(small_data), "--method", "groc", "--config", "gamma=1",
                     "--out", str(tmp_path / "x")])
        assert code == 2

    def test_unknown_method(self, small_data, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--data", str(small_data), "--method", "dgi", "--out", str(tmp_path / "x")])
        assert exc.value.code == 2

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"), "--method", "grace",
                     "--out", str(tmp_path / "x")]) == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, small_data, tmp_path):
        code = main(["train", "--data", str(small_data), "--method", "grace", "--config", "lr=1e308",
                     "--out", str(tmp_path / "x"), *FAST])
        assert code == 4

    def test_json_config_file(self, small_data, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n_epochs": 2, "n_hidden": 4, "q_minus": 0.1}))
        out = tmp_path / "run"
        assert main(["train", "--data", str(small_data), "--method", "grace", "--config", str(cfg),
                     "--out", str(out)]) == 0
        saved = json.loads((out / "config.json").read_text())
        assert saved["q_minus1"] == saved["q_minus2"] == 0.1 and saved["n_epochs"] == 2

    @pytest.mark.slow
    def test_groc_preset_under_five_minutes(self, fixture_data, tmp_path):
        start = time.perf_counter()
        assert main(["train", "--data", str(fixture_data), "--method", "groc", "--out", str(tmp_path / "r")]) == 0
        assert time.perf_counter() - start < 300


def test_config_alias_error_names_key():
    with pytest.raises(ConfigError, match="q_plus"):
        build_config("grace-adv", "sbm", ["q_plus=0.2"])


@pytest.fixture(scope="module")
def trained(fixture_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("train") / "grace"
    assert main(["train", "--data", str(fixture_data), "--method", "grace", "--out", str(out),
                 "--config", "n_epochs=20"]) == 0
    return out


class TestEval:
    def _eval(self, data, trained, out, budgets):
        return main(["eval", "--data", str(data), "--checkpoint", str(trained / "checkpoint"),
                     "--embeddings", str(trained / "embeddings.csv"), "--attack-budgets", budgets,
                     "--seed", "0", "--out", str(out)])

    def test_clean_only(self, fixture_data, trained, tmp_path):
        assert self._eval(fixture_data, trained, tmp_path / "e", "") == 0
        row = read_rows(tmp_path / "e" / "results.csv")[0]
        assert row["Acc"] != ""
        assert all(row[f"robust@{b}"] == "" for b in range(1, 6))
        assert row["method"] == "grace"

    def test_all_budgets_and_determinism(self, fixture_data, trained, tmp_path):
        for name in ("a", "b"):
            assert self._eval(fixture_data, trained, tmp_path / name, "1,2,3,4,5") == 0
        a = (tmp_path / "a" / "results.csv").read_bytes()
        assert a == (tmp_path / "b" / "results.csv").read_bytes()
        row = read_rows(tmp_path / "a" / "results.csv")[0]
        filled = [k for k in ("Acc", *(f"robust@{b}" for b in range(1, 6))) if row[k] != ""]
        assert len(filled) == 6
        targets = json.loads((tmp_path / "a" / "targets.json").read_text())
        assert len(targets["easiest"] + targets["hardest"] + targets["random"]) == 40
        assert len(json.loads((tmp_path / "a" / "attacks.json").read_text())) == 40

    def test_threads_do_not_change_results(self, fixture_data, trained, tmp_path, monkeypatch):
        assert self._eval(fixture_data, trained, tmp_path / "a", "1..3") == 0
        monkeypatch.setenv("GROC_THREADS", "4")
        assert self._eval(fixture_data, trained, tmp_path / "b", "1..3") == 0
        assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
        assert (tmp_path / "a" / "attacks.json").read_bytes() == (tmp_path / "b" / "attacks.json").read_bytes()

    def test_budgets_need_checkpoint(self, fixture_data, trained, tmp_path):
        code = main(["eval", "--data", str(fixture_data), "--embeddings", str(trained / "embeddings.csv"),
                     "--out", str(tmp_path / "e")])
        assert code == 2


def test_parse_budgets():
    assert parse_budgets("") == []
    assert parse_budgets("1..5") == [1, 2, 3, 4, 5]
    assert parse_budgets("3,1") == [1, 3]


def _write_result(path, method, dataset, seed, acc, extra=None):
    path.mkdir(parents=True)
    cols = ["method", "dataset", "seed", "Acc"] + [f"robust@{b}" for b in range(1, 6)]
    row = {"method": method, "dataset": dataset, "seed": seed, "Acc": acc, **(extra or {})}
    with open(path / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerow({c: row.get(c, "") for c in cols})


class TestReport:
    def test_single_run(self, tmp_path):
        _write_result(tmp_path / "runs" / "r0", "groc", "sbm", 0, 0.8, {"robust@1": 0.7})
        assert main(["report", "--runs", str(tmp_path / "runs"), "--out", str(tmp_path / "t.csv")]) == 0
        row = read_rows(tmp_path / "t.csv")[0]
        assert float(row["Acc_mean"]) == 0.8 and float(row["Acc_std"]) == 0.0
        assert float(row["robust@1_mean"]) == 0.7 and row["robust@2_mean"] == ""
        assert row["n_seeds"] == "1"

    def test_three_seeds(self, tmp_path):
        for s, acc in enumerate([0.6, 0.7, 0.8]):
            _write_result(tmp_path / "runs" / f"r{s}", "grace", "sbm", s, acc)
        assert main(["report", "--runs", str(tmp_path / "runs"), "--out", str(tmp_path / "t.csv")]) == 0
        row = read_rows(tmp_path / "t.csv")[0]
        assert float(row["Acc_mean"]) == pytest.approx(0.7)
        assert float(row["Acc_std"]) == pytest.approx(0.0816497, abs=1e-6)
        assert row["n_seeds"] == "3"

    def test_mixed_datasets(self, tmp_path):
        _write_result(tmp_path / "runs" / "a", "grace", "sbm", 0, 0.5)
        _write_result(tmp_path / "runs" / "b", "grace", "cora", 0, 0.6)
        _write_result(tmp_path / "runs" / "c", "groc", "sbm", 0, 0.7)
        assert main(["report", "--runs", str(tmp_path / "runs"), "--out", str(tmp_path / "t.csv")]) == 0
        keys = [(r["method"], r["dataset"]) for r in read_rows(tmp_path / "t.csv")]
        assert keys == [("grace", "cora"), ("grace", "sbm"), ("groc", "sbm")]

    def test_inconsistent_columns(self, tmp_path):
        _write_result(tmp_path / "runs" / "a", "grace", "sbm", 0, 0.5)
        (tmp_path / "runs" / "b").mkdir()
        (tmp_path / "runs" / "b" / "results.csv").write_text("method,dataset,seed,Acc\ngrace,sbm,1,0.5\n")
        assert main(["report", "--runs", str(tmp_path / "runs"), "--out", str(tmp_path / "t.csv")]) == 3
