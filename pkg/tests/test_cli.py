import json
import os

import numpy as np
import pytest

from xadapter.cli import main
from xadapter.retrieval import load_bank


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    records = [json.loads(line) for line in captured.out.splitlines() if line.strip()]
    return code, records, captured.err


@pytest.fixture()
def bank_csv(tmp_path):
    path = tmp_path / "rows.csv"
    path.write_text("a,1,0,0\nb,0,1,0\nc,0.6,0.8,0\n")
    return str(path)


class TestBankCommands:
    def test_build_then_self_query(self, capsys, tmp_path, bank_csv):
        out = str(tmp_path / "bank.xabk")
        code, records, _ = run_cli(capsys, "bank", "build", "--csv", bank_csv,
                                   "--out", out)
        assert code == 0
        assert records[0]["count"] == 3 and records[0]["dim"] == 3

        code, records, _ = run_cli(capsys, "bank", "query", "--bank", out,
                                   "--vector", "1,0,0", "-k", "3")
        assert code == 0
        assert records[0]["id"] == "a"
        assert records[0]["score"] == pytest.approx(1.0)
        assert [r["id"] for r in records] == ["a", "c", "b"]

    def test_query_k_exceeding_bank_names_both_numbers(self, capsys, tmp_path,
                                                       bank_csv):
        out = str(tmp_path / "bank.xabk")
        run_cli(capsys, "bank", "build", "--csv", bank_csv, "--out", out)
        code, _, err = run_cli(capsys, "bank", "query", "--bank", out,
                               "--vector", "1,0,0", "-k", "9")
        assert code == 2
        assert "9" in err and "3" in err

    def test_augment_doubles_count(self, capsys, tmp_path, bank_csv):
        src = str(tmp_path / "bank.xabk")
        dst = str(tmp_path / "noisy.xabk")
        run_cli(capsys, "bank", "build", "--csv", bank_csv, "--out", src)
        code, records, _ = run_cli(capsys, "bank", "augment", "--bank", src,
                                   "--out", dst, "--sigma", "0.1")
        assert code == 0
        assert records[0]["count"] == 6
        assert load_bank(dst).count == 6

    def test_corrupt_bank_exits_2(self, capsys, tmp_path, bank_csv):
        out = tmp_path / "bank.xabk"
        run_cli(capsys, "bank", "build", "--csv", bank_csv, "--out", str(out))
        blob = bytearray(out.read_bytes())
        blob[10] ^= 0xFF
        out.write_bytes(bytes(blob))
        code, _, err = run_cli(capsys, "bank", "query", "--bank", str(out),
                               "--vector", "1,0,0", "-k", "1")
        assert code == 2
        assert "CRC" in err

    def test_missing_file_exits_3(self, capsys, tmp_path):
        code, _, _ = run_cli(capsys, "bank", "query", "--bank",
                             str(tmp_path / "absent.xabk"), "--vector", "1", "-k", "1")
        assert code == 3


class TestConfigValidation:
    def test_missing_paths_all_reported(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"expert": "V", "k": 0}))
        code, _, err = run_cli(capsys, "adapt", "--config", str(cfg))
        assert code == 2
        assert "k" in err
        assert "corpus" in err
        assert "bank" in err

    def test_unknown_keys_rejected(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"mystery": 1}))
        code, _, err = run_cli(capsys, "adapt", "--config", str(cfg))
        assert code == 2
        assert "mystery" in err


class TestPipeline:
    """pretrain -> adapt -> reason -> bench -> params on a micro corpus."""

    @pytest.fixture()
    def workdir(self, tmp_path):
        corpus = tmp_path / "corpus.txt"
        rng = np.random.default_rng(0)
        words = ["red", "green", "blue", "bus", "tree", "sky", "the", "a", "is"]
        corpus.write_text("\n".join(
            " ".join(words[rng.integers(len(words))] for _ in range(6)) + " ."
            for _ in range(24)))
        bank_csv = tmp_path / "bank.csv"
        bank_csv.write_text("\n".join(
            f"img{i}," + ",".join(f"{x:.6f}" for x in rng.standard_normal(16))
            for i in range(24)))
        return tmp_path

    def make_config(self, tmp_path, **overrides):
        cfg = {
            "seed": 3,
            "expert": "V",
            "preset": "desk",
            "model": {"d": 16, "n_layers": 2, "n_heads": 2, "ffn_dim": 24,
                      "max_seq_len": 16},
            "adapter": {"r": 8, "n": 2, "ffn_dim": 16, "d_c": 16},
            "k": 4,
            "epochs": 1,
            "batch_size": 6,
            "fixed_clock": True,
            "paths": {
                "corpus": str(tmp_path / "corpus.txt"),
                "bank": str(tmp_path / "bank.xabk"),
                "base_checkpoint": str(tmp_path / "base.xamd"),
                "adapter_checkpoint": str(tmp_path / "adapter.xamd"),
                "metrics": str(tmp_path / "metrics.jsonl"),
            },
        }
        cfg.update(overrides)
        path = tmp_path / "run.json"
        path.write_text(json.dumps(cfg))
        return str(path)

    def test_full_flow(self, capsys, workdir):
        tmp_path = workdir
        cfg = self.make_config(tmp_path)
        code, records, err = run_cli(capsys, "bank", "build", "--csv",
                                     str(tmp_path / "bank.csv"),
                                     "--out", str(tmp_path / "bank.xabk"))
        assert code == 0, err

        code, records, err = run_cli(capsys, "pretrain", "--config", cfg,
                                     "--epochs", "1")
        assert code == 0, err
        assert os.path.exists(tmp_path / "base.xamd")

        code, records, err = run_cli(capsys, "adapt", "--config", cfg)
        assert code == 0, err
        assert os.path.exists(tmp_path / "adapter.xamd")
        with open(tmp_path / "metrics.jsonl") as f:
            lines = f.read().splitlines()
        assert len(lines) == records[0]["steps"] == 4  # 24 lines / batch 6

        items = tmp_path / "items.txt"
        items.write_text("bus\ttree\nsky\n")
        labels = tmp_path / "labels.txt"
        labels.write_text("red\ngreen\nblue\n")
        cfg2 = self.make_config(tmp_path)
        with open(cfg2) as f:
            raw = json.load(f)
        raw["paths"]["labels"] = str(labels)
        with open(cfg2, "w") as f:
            json.dump(raw, f)
        code, records, err = run_cli(capsys, "reason", "--config", cfg2,
                                     "--items", str(items))
        assert code == 0, err
        assert len(records) == 3  # two items + summary
        assert records[-1]["summary"] is True
        assert records[-1]["n_items"] == 2
        assert "accuracy" in records[-1]
        assert set(records[0]["scores"]) == {"red", "green", "blue"}
        assert len(records[0]["per_template"]) == 9

        code, records, err = run_cli(capsys, "bench", "--config", cfg2, "-n", "5")
        assert code == 0, err
        report = records[0]
        assert report["n"] == 5
        assert report["ratio"] >= 1.0
        assert json.loads(json.dumps(report)) == report

        code, records, err = run_cli(capsys, "params", "--config", cfg2)
        assert code == 0, err
        assert records[0]["adapter_weights"] > 0

    def test_bench_n_zero(self, capsys, workdir):
        cfg = self.make_config(workdir)
        code, records, _ = run_cli(capsys, "bench", "--config", cfg, "-n", "0")
        assert code == 0
        assert records == [{"n": 0}]

    def test_adapt_deterministic_metrics(self, capsys, workdir):
        tmp_path = workdir
        run_cli(capsys, "bank", "build", "--csv", str(tmp_path / "bank.csv"),
                "--out", str(tmp_path / "bank.xabk"))
        cfg = self.make_config(tmp_path)
        run_cli(capsys, "pretrain", "--config", cfg, "--epochs", "1")
        code, _, err = run_cli(capsys, "adapt", "--config", cfg)
        assert code == 0, err
        first = (tmp_path / "metrics.jsonl").read_bytes()
        code, _, _ = run_cli(capsys, "adapt", "--config", cfg)
        assert code == 0
        assert (tmp_path / "metrics.jsonl").read_bytes() == first

    def test_reason_rejects_unknown_label(self, capsys, workdir):
        tmp_path = workdir
        run_cli(capsys, "bank", "build", "--csv", str(tmp_path / "bank.csv"),
                "--out", str(tmp_path / "bank.xabk"))
        cfg = self.make_config(tmp_path)
        run_cli(capsys, "pretrain", "--config", cfg, "--epochs", "1")
        run_cli(capsys, "adapt", "--config", cfg)
        labels = tmp_path / "labels.txt"
        labels.write_text("red\nxylophone\n")
        with open(cfg) as f:
            raw = json.load(f)
        raw["paths"]["labels"] = str(labels)
        with open(cfg, "w") as f:
            json.dump(raw, f)
        code, _, err = run_cli(capsys, "reason", "--config", cfg, "--item", "bus")
        assert code == 2
        assert "xylophone" in err

    def test_seed_env_override(self, capsys, workdir, monkeypatch):
        tmp_path = workdir
        run_cli(capsys, "bank", "build", "--csv", str(tmp_path / "bank.csv"),
                "--out", str(tmp_path / "bank.xabk"))
        cfg = self.make_config(tmp_path)
        run_cli(capsys, "pretrain", "--config", cfg, "--epochs", "1")
        run_cli(capsys, "adapt", "--config", cfg)
        base = (tmp_path / "metrics.jsonl").read_bytes()
        monkeypatch.setenv("XADAPTER_SEED", "99")
        run_cli(capsys, "adapt", "--config", cfg)
        assert (tmp_path / "metrics.jsonl").read_bytes() != base


class TestPlantedThroughCli:
    def test_reason_reproduces_planted_accuracy(self, capsys, planted_artifacts,
                                                planted_eval):
        code, records, err = run_cli(capsys, "reason", "--config",
                                     planted_artifacts["config"],
                                     "--items", planted_artifacts["items"])
        assert code == 0, err
        assert records[-1]["summary"] is True
        assert records[-1]["n_items"] == 60
        assert records[-1]["accuracy"] == pytest.approx(
            planted_eval["adapted"]["accuracy"], abs=0.05)

    def test_single_item_deterministic(self, capsys, planted_artifacts):
        item = "banana"
        code, first, _ = run_cli(capsys, "reason", "--config",
                                 planted_artifacts["config"], "--item", item)
        assert code == 0
        code, second, _ = run_cli(capsys, "reason", "--config",
                                  planted_artifacts["config"], "--item", item)
        assert first == second

    def test_bench_on_planted_artifacts(self, capsys, planted_artifacts):
        code, records, err = run_cli(capsys, "bench", "--config",
                                     planted_artifacts["config"], "-n", "8")
        assert code == 0, err
        assert 1.0 <= records[0]["ratio"] <= 10.0
