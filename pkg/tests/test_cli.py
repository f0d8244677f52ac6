"""End-to-end workflow through the command-line interface: synth -> prepare ->
train -> evaluate -> compare -> grid, plus the bs utility and error paths.

Everything runs through cli.main(argv) in-process; artifacts land in pytest
temp dirs.  The workflow fixture is module-scoped so the chain runs once.
"""

import csv
import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest

from optionlab.bs import BsInputs, bs_call_price, mc_call_price, McConfig
from optionlab.cli import main
from optionlab.layers import load_model
from optionlab.market_data import read_features_csv, read_quotes_csv

SYNTH_CONFIG = {
    "tickers": [{"name": "AA", "s0": 100.0, "drift": 0.05, "vol": 0.2}],
    "start": "2021-06-01",
    "n_quote_days": 30,
    "strike_multipliers": [0.95, 1.0, 1.05],
    "expiry_days": [30, 91],
    "warmup_days": 95,
    "rate": 0.03,
    "noise": 0.01,
    "seed": 42,
}

MODEL_SPEC = {
    "layers": [
        {"kind": "dense", "width": 16, "activation": "tanh"},
        {"kind": "dense", "width": 16, "activation": "tanh"},
    ],
    "input_dim": 10,
}

TRAIN_SETTINGS = {
    "epochs": 15,
    "patience": 15,
    "batch_size": 64,
    "learning_rate": 3e-3,
}


def _write(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Run the full chain once; return the directory layout."""
    root = tmp_path_factory.mktemp("cli")
    synth_dir = root / "synth"
    data_dir = root / "data"
    model_dir = root / "model"
    eval_dir = root / "eval"

    rc = main(
        ["synth", "--config", str(_write(root / "synth.json", SYNTH_CONFIG)),
         "--out", str(synth_dir)]
    )
    assert rc == 0

    prepare_cfg = {
        "quotes": str(synth_dir / "quotes.csv"),
        "underlying": str(synth_dir / "underlying.csv"),
        "rates": str(synth_dir / "rates.csv"),
    }
    rc = main(
        ["prepare", "--config", str(_write(root / "prepare.json", prepare_cfg)),
         "--out", str(data_dir)]
    )
    assert rc == 0

    train_cfg = {
        "features": str(data_dir / "features.csv"),
        "model": MODEL_SPEC,
        "train": TRAIN_SETTINGS,
        "seed": 7,
    }
    rc = main(
        ["train", "--config", str(_write(root / "train.json", train_cfg)),
         "--out", str(model_dir)]
    )
    assert rc == 0

    eval_cfg = {
        "features": str(data_dir / "features.csv"),
        "checkpoint": str(model_dir / "model.bin"),
    }
    rc = main(
        ["evaluate", "--config", str(_write(root / "eval.json", eval_cfg)),
         "--out", str(eval_dir)]
    )
    assert rc == 0

    return {
        "root": root, "synth": synth_dir, "data": data_dir,
        "model": model_dir, "eval": eval_dir,
    }


class TestSynth:
    def test_artifacts(self, workspace):
        d = workspace["synth"]
        for name in ("quotes.csv", "underlying.csv", "rates.csv", "manifest.json"):
            assert (d / name).is_file()
        manifest = json.loads((d / "manifest.json").read_text())
        assert manifest["n_quotes"] == 30 * 3 * 2
        assert manifest["seed"] == 42
        assert len(read_quotes_csv(d / "quotes.csv")) == manifest["n_quotes"]

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        rc = main(
            ["synth", "--config", str(workspace["root"] / "synth.json"),
             "--out", str(tmp_path / "again")]
        )
        assert rc == 0
        for name in ("quotes.csv", "underlying.csv", "rates.csv", "manifest.json"):
            assert (tmp_path / "again" / name).read_bytes() == (
                workspace["synth"] / name
            ).read_bytes()

    def test_seed_flag_overrides_config(self, workspace, tmp_path):
        cfg = dict(SYNTH_CONFIG, seed=1)
        rc = main(
            ["synth", "--config", str(_write(tmp_path / "s.json", cfg)),
             "--out", str(tmp_path / "flag"), "--seed", "42"]
        )
        assert rc == 0
        assert (tmp_path / "flag" / "quotes.csv").read_bytes() == (
            workspace["synth"] / "quotes.csv"
        ).read_bytes()

    def test_missing_seed_fails(self, tmp_path, capsys):
        cfg = {k: v for k, v in SYNTH_CONFIG.items() if k != "seed"}
        rc = main(
            ["synth", "--config", str(_write(tmp_path / "s.json", cfg)),
             "--out", str(tmp_path / "out")]
        )
        assert rc == 2
        assert "seed is required" in capsys.readouterr().err


class TestPrepare:
    def test_manifest_counts_chain(self, workspace):
        manifest = json.loads((workspace["data"] / "manifest.json").read_text())
        joined = manifest["n_quotes_read"] - sum(manifest["join_skipped"].values())
        assert manifest["n_feature_rows"] + sum(manifest["build_skipped"].values()) == joined
        assert (
            manifest["n_final_rows"] + sum(manifest["filter_dropped"].values())
            == manifest["n_feature_rows"]
        )
        rows = read_features_csv(workspace["data"] / "features.csv")
        assert len(rows) == manifest["n_final_rows"]
        assert manifest["n_final_rows"] == 180  # nothing dropped in this market

    def test_vol_window_columns(self, workspace):
        with open(workspace["data"] / "features.csv", newline="") as fh:
            header = next(csv.reader(fh))
        assert header[:6] == ["quote_date", "ticker", "s_over_k", "strike", "ttm_years", "rate"]
        assert [c for c in header if c.startswith("sigma_")] == [
            "sigma_20", "sigma_30", "sigma_40", "sigma_50", "sigma_65", "sigma_90",
        ]


class TestTrain:
    def test_artifacts(self, workspace):
        d = workspace["model"]
        for name in ("model.bin", "model_spec.json", "history.csv", "train_summary.json"):
            assert (d / name).is_file()

    def test_summary_consistency(self, workspace):
        summary = json.loads((workspace["model"] / "train_summary.json").read_text())
        # 10->16 (176) + 16->16 (272) + 16->1 (17)
        assert summary["param_count"] == 176 + 272 + 17
        assert summary["n_train"] == 126 and summary["n_val"] == 27 and summary["n_test"] == 27
        history = (workspace["model"] / "history.csv").read_text().splitlines()
        assert history[0] == "epoch,train_mse,val_mse"
        assert len(history) == 1 + summary["epochs_run"]
        val_col = [float(line.split(",")[2]) for line in history[1:]]
        assert summary["best_val_mse"] == min(val_col)
        assert math.isfinite(summary["test_mse"])

    def test_spec_round_trips(self, workspace):
        spec_dict = json.loads((workspace["model"] / "model_spec.json").read_text())
        model = load_model(workspace["model"] / "model.bin")
        assert model.spec.to_dict() == spec_dict
        assert model.scaler is not None  # standardisation artifact travels along

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        rc = main(
            ["train", "--config", str(workspace["root"] / "train.json"),
             "--out", str(tmp_path / "again")]
        )
        assert rc == 0
        for name in ("model.bin", "history.csv", "train_summary.json"):
            assert (tmp_path / "again" / name).read_bytes() == (
                workspace["model"] / name
            ).read_bytes()

    def test_unknown_train_key_fails(self, workspace, tmp_path, capsys):
        cfg = json.loads((workspace["root"] / "train.json").read_text())
        cfg["train"] = dict(cfg["train"], optimizer="sgd")
        rc = main(
            ["train", "--config", str(_write(tmp_path / "t.json", cfg)),
             "--out", str(tmp_path / "out")]
        )
        assert rc == 2
        assert "unknown train keys" in capsys.readouterr().err


class TestEvaluate:
    def test_artifacts(self, workspace):
        d = workspace["eval"]
        for name in (
            "report.json", "report.csv", "report.txt",
            "baseline_windows.txt", "baseline_windows.csv", "predictions.csv",
        ):
            assert (d / name).is_file()

    def test_report_scores_test_split(self, workspace):
        report = json.loads((workspace["eval"] / "report.json").read_text())
        assert report["n"] == 27
        assert report["pct_over"] + report["pct_under"] + report["pct_correct"] == pytest.approx(100.0)
        assert sum(r["n"] for r in report["by_moneyness"].values()) == report["n"]

    def test_baseline_table_has_six_windows(self, workspace):
        lines = (workspace["eval"] / "baseline_windows.csv").read_text().splitlines()
        assert lines[0] == "window,mse,rmse,mae,pct_correct"
        assert [int(l.split(",")[0]) for l in lines[1:]] == [20, 30, 40, 50, 65, 90]

    def test_predictions_align_with_split(self, workspace):
        lines = (workspace["eval"] / "predictions.csv").read_text().splitlines()
        assert lines[0] == "quote_date,ticker,actual,predicted,class"
        assert len(lines) == 1 + 27
        assert all(l.split(",")[4] in ("over", "under", "correct") for l in lines[1:])

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        rc = main(
            ["evaluate", "--config", str(workspace["root"] / "eval.json"),
             "--out", str(tmp_path / "again")]
        )
        assert rc == 0
        assert (tmp_path / "again" / "report.json").read_bytes() == (
            workspace["eval"] / "report.json"
        ).read_bytes()

    def test_bad_split_name_fails(self, workspace, tmp_path, capsys):
        cfg = json.loads((workspace["root"] / "eval.json").read_text())
        cfg["split"] = "holdout"
        rc = main(
            ["evaluate", "--config", str(_write(tmp_path / "e.json", cfg)),
             "--out", str(tmp_path / "out")]
        )
        assert rc == 2
        assert "split must be" in capsys.readouterr().err

    def test_val_split_selectable(self, workspace, tmp_path):
        cfg = json.loads((workspace["root"] / "eval.json").read_text())
        cfg["split"] = "val"
        rc = main(
            ["evaluate", "--config", str(_write(tmp_path / "e.json", cfg)),
             "--out", str(tmp_path / "val")]
        )
        assert rc == 0
        report = json.loads((tmp_path / "val" / "report.json").read_text())
        assert report["n"] == 27


class TestCompare:
    def test_ranking(self, workspace, tmp_path):
        report = workspace["eval"] / "report.json"
        second = tmp_path / "copy.json"
        shutil.copy(report, second)
        cfg = {
            "reports": [
                {"name": "mlp", "path": str(report)},
                {"name": "mlp-copy", "path": str(second)},
            ]
        }
        out = tmp_path / "cmp"
        rc = main(
            ["compare", "--config", str(_write(tmp_path / "c.json", cfg)),
             "--out", str(out)]
        )
        assert rc == 0
        lines = (out / "ranking.csv").read_text().splitlines()
        assert lines[0] == "rank,model,n,mse,rmse,mae,pct_correct"
        assert len(lines) == 3
        assert (out / "ranking.txt").is_file()
        mses = [float(l.split(",")[3]) for l in lines[1:]]
        assert mses == sorted(mses)

    def test_extra_entry_key_fails(self, workspace, tmp_path, capsys):
        cfg = {"reports": [{"name": "x", "path": "y", "weight": 2}]}
        rc = main(
            ["compare", "--config", str(_write(tmp_path / "c.json", cfg)),
             "--out", str(tmp_path / "out")]
        )
        assert rc == 2
        assert "name/path" in capsys.readouterr().err


class TestGrid:
    def test_small_sweep(self, workspace, tmp_path):
        cfg = {
            "features": str(workspace["data"] / "features.csv"),
            "kind": "mlp",
            "grid": {"width": [8, 16]},
            "train": {"epochs": 6, "patience": 6, "batch_size": 64},
            "seed": 3,
        }
        out = tmp_path / "grid"
        rc = main(
            ["grid", "--config", str(_write(tmp_path / "g.json", cfg)),
             "--out", str(out)]
        )
        assert rc == 0
        lines = (out / "grid.csv").read_text().splitlines()
        assert lines[0] == "rank,config,seed,val_mse,error"
        assert len(lines) == 3
        assert (out / "grid.txt").is_file()

    def test_bad_kind_fails(self, workspace, tmp_path, capsys):
        cfg = {
            "features": str(workspace["data"] / "features.csv"),
            "kind": "rnn",
            "grid": {"width": [8]},
            "train": {"epochs": 2, "patience": 2},
            "seed": 3,
        }
        rc = main(
            ["grid", "--config", str(_write(tmp_path / "g.json", cfg)),
             "--out", str(tmp_path / "out")]
        )
        assert rc == 2
        assert "grid kind" in capsys.readouterr().err

    def test_unknown_axis_fails(self, workspace, tmp_path, capsys):
        cfg = {
            "features": str(workspace["data"] / "features.csv"),
            "kind": "mlp",
            "grid": {"width": [8], "momentum": [0.9]},
            "train": {"epochs": 2, "patience": 2},
            "seed": 3,
        }
        rc = main(
            ["grid", "--config", str(_write(tmp_path / "g.json", cfg)),
             "--out", str(tmp_path / "out")]
        )
        assert rc == 2
        assert "unknown grid axes" in capsys.readouterr().err


class TestConfigHygiene:
    def test_unknown_config_key_fails(self, tmp_path, capsys):
        cfg = dict(SYNTH_CONFIG, fancy_mode=True)
        rc = main(
            ["synth", "--config", str(_write(tmp_path / "s.json", cfg)),
             "--out", str(tmp_path / "out")]
        )
        assert rc == 2
        assert "unknown config keys" in capsys.readouterr().err

    def test_missing_required_key_fails(self, tmp_path, capsys):
        cfg = {k: v for k, v in SYNTH_CONFIG.items() if k != "tickers"}
        rc = main(
            ["synth", "--config", str(_write(tmp_path / "s.json", cfg)),
             "--out", str(tmp_path / "out")]
        )
        assert rc == 2
        assert "missing config keys" in capsys.readouterr().err

    def test_missing_config_file_fails(self, tmp_path, capsys):
        rc = main(
            ["synth", "--config", str(tmp_path / "nope.json"),
             "--out", str(tmp_path / "out")]
        )
        assert rc == 2
        assert "error:" in capsys.readouterr().err


class TestBsSubcommand:
    BASE = ["bs", "--spot", "100", "--strike", "95", "--rate", "0.05", "--ttm", "0.75"]

    def test_price_mode(self, capsys):
        rc = main(self.BASE + ["--mode", "price", "--vol", "0.3"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        expected = bs_call_price(BsInputs(100.0, 95.0, 0.05, 0.3, 0.75))
        assert payload["price"] == expected

    def test_iv_round_trip(self, capsys):
        price = bs_call_price(BsInputs(100.0, 95.0, 0.05, 0.3, 0.75))
        rc = main(self.BASE + ["--mode", "iv", "--price", repr(price)])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["implied_vol"] == pytest.approx(0.3, abs=1e-6)

    def test_mc_mode_deterministic(self, capsys):
        args = self.BASE + [
            "--mode", "mc", "--vol", "0.3", "--paths", "20000",
            "--seed", "11", "--antithetic",
        ]
        assert main(args) == 0
        first = json.loads(capsys.readouterr().out)
        assert main(args) == 0
        second = json.loads(capsys.readouterr().out)
        assert first == second
        price, se = mc_call_price(
            BsInputs(100.0, 95.0, 0.05, 0.3, 0.75),
            McConfig(paths=20000, seed=11, antithetic=True),
        )
        assert first == {"price": price, "std_error": se}

    def test_price_needs_vol(self, capsys):
        rc = main(self.BASE + ["--mode", "price"])
        assert rc == 2
        assert "--vol is required" in capsys.readouterr().err

    def test_mc_needs_seed(self, capsys):
        rc = main(self.BASE + ["--mode", "mc", "--vol", "0.3"])
        assert rc == 2
        assert "--seed is required" in capsys.readouterr().err

    def test_iv_needs_price(self, capsys):
        rc = main(self.BASE + ["--mode", "iv"])
        assert rc == 2
        assert "--price is required" in capsys.readouterr().err

    def test_arbitrage_violation_reports_error(self, capsys):
        rc = main(self.BASE + ["--mode", "iv", "--price", "200"])
        assert rc == 2
        assert "arbitrage" in capsys.readouterr().err
