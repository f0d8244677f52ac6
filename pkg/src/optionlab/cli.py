"""Batch command-line interface.

Seven subcommands cover the full workflow::

    optionlab synth     --config synth.json    --out runs/synth
    optionlab prepare   --config prepare.json  --out runs/data
    optionlab train     --config train.json    --out runs/mlp
    optionlab evaluate  --config eval.json     --out runs/mlp
    optionlab compare   --config compare.json  --out runs/cmp
    optionlab grid      --config grid.json     --out runs/grid [--jobs N]
    optionlab bs        --mode price|iv|mc --spot .. --strike .. ...

Every stochastic command needs an explicit seed (config key or --seed; the
flag wins); nothing ever falls back to wall-clock entropy.  Config files are
JSON with unknown keys rejected, so typos fail loudly.  All outputs are
deterministic functions of (config, seed), byte for byte.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import market_data as md
from .bs import BsInputs, McConfig, bs_call_price, implied_vol, mc_call_price
from .layers import ModelSpec, build_model, load_model, param_count, save_model
from .training import GridSpec, TrainConfig, grid_search, train
from .vol import STANDARD_WINDOWS

__all__ = ["main"]


def _fail(msg: str) -> ValueError:
    return ValueError(msg)


def _load_config(path, required: set, optional: set) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise _fail(f"config {path} must be a JSON object")
    unknown = set(cfg) - required - optional
    if unknown:
        raise _fail(f"unknown config keys in {path}: {sorted(unknown)}")
    missing = required - set(cfg)
    if missing:
        raise _fail(f"missing config keys in {path}: {sorted(missing)}")
    return cfg


def _need_seed(cfg: dict, args) -> int:
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.get("seed")
    if seed is None:
        raise _fail("a seed is required (config key 'seed' or --seed)")
    return int(seed)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    cfg = _load_config(
        args.config,
        required={"tickers", "start", "n_quote_days", "strike_multipliers", "expiry_days"},
        optional={
            "seed", "warmup_days", "rate", "rate_walk_std",
            "half_spread", "noise", "pricing_vol",
        },
    )
    seed = _need_seed(cfg, args)
    tickers = tuple(
        md.TickerConfig(
            name=t["name"], s0=float(t["s0"]),
            drift=float(t.get("drift", 0.0)), vol=float(t["vol"]),
        )
        for t in cfg["tickers"]
    )
    synth_cfg = md.SynthConfig(
        tickers=tickers,
        start=date.fromisoformat(cfg["start"]),
        n_quote_days=int(cfg["n_quote_days"]),
        strike_multipliers=cfg["strike_multipliers"],
        expiry_days=cfg["expiry_days"],
        warmup_days=int(cfg.get("warmup_days", 120)),
        rate=float(cfg.get("rate", 0.03)),
        rate_walk_std=float(cfg.get("rate_walk_std", 0.0)),
        half_spread=float(cfg.get("half_spread", 0.0)),
        noise=float(cfg.get("noise", 0.0)),
        pricing_vol=cfg.get("pricing_vol", "gbm"),
    )
    data = md.generate_synthetic_dataset(synth_cfg, seed)
    out = _outdir(args)
    md.write_quotes_csv(data.quotes, out / "quotes.csv")
    md.write_underlying_csv(data.underlying, out / "underlying.csv")
    md.write_rates_csv(data.rates, out / "rates.csv")
    _write_json(
        out / "manifest.json",
        {
            "seed": seed,
            "n_quotes": len(data.quotes),
            "n_tickers": len(tickers),
            "n_quote_days": synth_cfg.n_quote_days,
            "pricing_vol": synth_cfg.pricing_vol,
        },
    )
    print(f"synth: wrote {len(data.quotes)} quotes to {out}")
    return 0


# ---------------------------------------------------------------------------
# prepare


def cmd_prepare(args) -> int:
    cfg = _load_config(
        args.config,
        required={"quotes", "underlying", "rates"},
        optional={"vol_windows"},
    )
    records = md.read_quotes_csv(cfg["quotes"])
    underlying = md.read_underlying_csv(cfg["underlying"])
    rates = md.read_rates_csv(cfg["rates"])
    windows = tuple(cfg.get("vol_windows", STANDARD_WINDOWS))

    quotes, join_skipped = md.attach_market_data(records, underlying, rates)
    built = md.build_features(quotes, underlying, rates, vol_windows=windows)
    filtered = md.filter_rows(built.rows)

    out = _outdir(args)
    md.write_features_csv(filtered.rows, out / "features.csv", vol_windows=windows)
    _write_json(
        out / "manifest.json",
        {
            "n_quotes_read": len(records),
            "join_skipped": join_skipped,
            "build_skipped": built.skipped,
            "n_feature_rows": len(built.rows),
            "filter_dropped": filtered.dropped,
            "n_final_rows": len(filtered.rows),
            "vol_windows": list(windows),
        },
    )
    print(
        f"prepare: {len(records)} quotes -> {len(filtered.rows)} rows "
        f"(dropped {filtered.dropped})"
    )
    return 0


# ---------------------------------------------------------------------------
# windowing shared by train/evaluate


def _window_split(rows, mode: str, timesteps: int):
    """Per-ticker sequence windows over a chronologically sorted row list.

    Returns (inputs [M, T, F], targets [M], target_rows).  Tickers with too
    few rows contribute nothing.  ``mode`` is "causal" (targets strictly
    after their window) or "overlapping" (target = last window row).
    """
    by_ticker: dict = {}
    for r in rows:
        by_ticker.setdefault(r.ticker, []).append(r)
    xs, ys, target_rows = [], [], []
    for ticker in sorted(by_ticker):
        t_rows = sorted(by_ticker[ticker], key=lambda r: r.quote_date)
        x, y = md.feature_matrix(t_rows)
        try:
            if mode == "causal":
                batch = md.windows_causal(x, y, timesteps)
                target_rows += t_rows[timesteps:]
            elif mode == "overlapping":
                batch = md.windows_overlapping(x, y, timesteps)
                target_rows += t_rows[timesteps - 1 :]
            else:
                raise _fail(f"windowing mode must be causal or overlapping, got {mode!r}")
        except ValueError:
            continue  # not enough rows for one window
        xs.append(batch.inputs)
        ys.append(batch.targets)
    if not xs:
        raise _fail(f"no ticker has enough rows for {timesteps}-step windows")
    return np.concatenate(xs), np.concatenate(ys), target_rows


def _split_arrays(rows, spec: ModelSpec, windowing: dict | None):
    """Chronological split, then flat or windowed arrays per the model mode."""
    split = md.split_chronological(rows)
    mode = spec.mode()
    if mode in ("mlp", "kan"):
        out = {}
        for name, part in (("train", split.train), ("val", split.val), ("test", split.test)):
            x, y = md.feature_matrix(part)
            out[name] = (x, y, part)
        return out
    if spec.timesteps is None:
        raise _fail("sequence models need 'timesteps' in the model spec")
    wmode = (windowing or {}).get(
        "mode", "overlapping" if mode == "conv" else "causal"
    )
    out = {}
    for name, part in (("train", split.train), ("val", split.val), ("test", split.test)):
        x, y, target_rows = _window_split(part, wmode, spec.timesteps)
        out[name] = (x, y, target_rows)
    return out


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _load_config(
        args.config,
        required={"features", "model", "train"},
        optional={"seed", "windowing"},
    )
    seed = _need_seed(cfg, args)
    spec = ModelSpec.from_dict(cfg["model"])

    t_allowed = {
        "epochs", "batch_size", "patience", "restore_best",
        "learning_rate", "shuffle", "standardize",
    }
    t_cfg = cfg["train"]
    unknown = set(t_cfg) - t_allowed
    if unknown:
        raise _fail(f"unknown train keys: {sorted(unknown)}")
    train_cfg = TrainConfig(seed=seed, **t_cfg)

    windowing = cfg.get("windowing")
    if windowing is not None and set(windowing) - {"mode", "timesteps"}:
        raise _fail(f"unknown windowing keys: {sorted(set(windowing) - {'mode', 'timesteps'})}")
    if windowing and "timesteps" in windowing:
        if spec.timesteps is not None and spec.timesteps != int(windowing["timesteps"]):
            raise _fail("windowing.timesteps conflicts with model.timesteps")

    rows = md.read_features_csv(cfg["features"])
    arrays = _split_arrays(rows, spec, windowing)
    x_train, y_train, _ = arrays["train"]
    x_val, y_val, _ = arrays["val"]
    x_test, y_test, _ = arrays["test"]

    model = build_model(spec, seed)
    result = train(model, (x_train, y_train), (x_val, y_val), train_cfg)

    test_pred = model.predict(x_test)
    test_mse, test_rmse, test_mae = ev.error_metrics(test_pred, y_test)

    out = _outdir(args)
    save_model(model, out / "model.bin")
    _write_json(out / "model_spec.json", spec.to_dict())
    with open(out / "history.csv", "w") as fh:
        fh.write("epoch,train_mse,val_mse\n")
        for epoch, tr, va in result.history:
            fh.write(f"{epoch},{tr!r},{va!r}\n")
    _write_json(
        out / "train_summary.json",
        {
            "seed": seed,
            "param_count": param_count(spec),
            "epochs_run": len(result.history),
            "stopped_early": result.stopped_early,
            "best_epoch": result.best_epoch,
            "best_val_mse": result.best_val_mse,
            "test_mse": test_mse,
            "test_rmse": test_rmse,
            "test_mae": test_mae,
            "n_train": int(np.asarray(x_train).shape[0]),
            "n_val": int(np.asarray(x_val).shape[0]),
            "n_test": int(np.asarray(x_test).shape[0]),
        },
    )
    print(
        f"train: {param_count(spec)} params, best val mse {result.best_val_mse:.6g} "
        f"at epoch {result.best_epoch}, test mse {test_mse:.6g}"
    )
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    cfg = _load_config(
        args.config,
        required={"features", "checkpoint"},
        optional={"margin", "baseline_windows", "split", "windowing"},
    )
    model = load_model(cfg["checkpoint"])
    rows = md.read_features_csv(cfg["features"])
    margin = float(cfg.get("margin", ev.DEFAULT_MARGIN))
    which = cfg.get("split", "test")
    if which not in ("train", "val", "test"):
        raise _fail(f"split must be train, val, or test, got {which!r}")

    arrays = _split_arrays(rows, model.spec, cfg.get("windowing"))
    x, y, eval_rows = arrays[which]
    pred = model.predict(x)
    report = ev.build_report(pred, eval_rows, margin=margin)

    windows = tuple(cfg.get("baseline_windows", STANDARD_WINDOWS))
    table = ev.baseline_window_table(eval_rows, windows=windows, margin=margin)

    out = _outdir(args)
    (out / "report.json").write_text(ev.report_to_json(report) + "\n")
    ev.write_report_csv(report, out / "report.csv")
    (out / "report.txt").write_text(ev.format_report_text(report, title=which) + "\n")
    (out / "baseline_windows.txt").write_text(ev.format_window_table(table) + "\n")
    with open(out / "baseline_windows.csv", "w") as fh:
        fh.write("window,mse,rmse,mae,pct_correct\n")
        for w, r in table:
            fh.write(f"{w},{r.mse!r},{r.rmse!r},{r.mae!r},{r.pct_correct!r}\n")
    with open(out / "predictions.csv", "w") as fh:
        fh.write("quote_date,ticker,actual,predicted,class\n")
        for row, p in zip(eval_rows, pred):
            cls = ev.pricing_class(float(p), row.target, margin)
            fh.write(
                f"{row.quote_date.isoformat()},{row.ticker},"
                f"{row.target!r},{float(p)!r},{cls}\n"
            )
    print(ev.format_report_text(report, title=which))
    print()
    print(ev.format_window_table(table))
    return 0


# ---------------------------------------------------------------------------
# compare


def cmd_compare(args) -> int:
    cfg = _load_config(args.config, required={"reports"}, optional=set())
    entries = []
    for item in cfg["reports"]:
        if set(item) - {"name", "path"}:
            raise _fail(f"report entries need only name/path, got {sorted(item)}")
        payload = json.loads(Path(item["path"]).read_text())
        entries.append((item["name"], payload))
    entries.sort(key=lambda e: e[1]["mse"])

    out = _outdir(args)
    lines = ["{:<20} {:>10} {:>12} {:>12} {:>9}".format("model", "n", "mse", "rmse", "correct%")]
    with open(out / "ranking.csv", "w") as fh:
        fh.write("rank,model,n,mse,rmse,mae,pct_correct\n")
        for rank, (name, r) in enumerate(entries, start=1):
            fh.write(
                f"{rank},{name},{r['n']},{r['mse']!r},{r['rmse']!r},"
                f"{r['mae']!r},{r['pct_correct']!r}\n"
            )
            lines.append(
                "{:<20} {:>10} {:>12.6g} {:>12.6g} {:>9.2f}".format(
                    name, r["n"], r["mse"], r["rmse"], r["pct_correct"]
                )
            )
    text = "\n".join(lines)
    (out / "ranking.txt").write_text(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class _SpecBuilder:
    """Module-level (hence picklable) model factory for grid entries."""

    kind: str
    input_dim: int

    def spec_for(self, combo: dict) -> ModelSpec:
        from .layers import LayerSpec

        dropout = float(combo.get("dropout", 0.0))
        if self.kind == "mlp":
            layers = [
                LayerSpec(
                    kind="dense",
                    width=int(combo["width"]),
                    activation=combo.get("activation", "tanh"),
                    dropout=dropout,
                )
                for _ in range(int(combo.get("n_layers", 2)))
            ]
        elif self.kind == "kan":
            degrees = combo["degrees"]
            layers = [
                LayerSpec(
                    kind="kan",
                    width=int(combo["width"]),
                    degree=int(d),
                    family=combo.get("family", "chebyshev2"),
                    dropout=dropout,
                )
                for d in degrees
            ]
        else:
            raise ValueError(f"grid kind must be mlp or kan, got {self.kind!r}")
        return ModelSpec(layers=tuple(layers), input_dim=self.input_dim)

    def __call__(self, combo: dict, seed: int):
        return build_model(self.spec_for(combo), seed)


_GRID_AXES = {
    "mlp": {"width", "n_layers", "activation", "dropout", "learning_rate"},
    "kan": {"width", "degrees", "family", "dropout", "learning_rate"},
}


def cmd_grid(args) -> int:
    cfg = _load_config(
        args.config,
        required={"features", "kind", "grid", "train"},
        optional={"seed"},
    )
    seed = _need_seed(cfg, args)
    kind = cfg["kind"]
    if kind not in _GRID_AXES:
        raise _fail(f"grid kind must be one of {sorted(_GRID_AXES)}, got {kind!r}")
    bad = set(cfg["grid"]) - _GRID_AXES[kind]
    if bad:
        raise _fail(f"unknown grid axes for {kind}: {sorted(bad)}")

    t_cfg = dict(cfg["train"])
    unknown = set(t_cfg) - {
        "epochs", "batch_size", "patience", "restore_best",
        "learning_rate", "shuffle", "standardize",
    }
    if unknown:
        raise _fail(f"unknown train keys: {sorted(unknown)}")
    train_cfg = TrainConfig(seed=seed, **t_cfg)

    rows = md.read_features_csv(cfg["features"])
    split = md.split_chronological(rows)
    x_train, y_train = md.feature_matrix(split.train)
    x_val, y_val = md.feature_matrix(split.val)

    grid = GridSpec(axes={k: tuple(v) for k, v in cfg["grid"].items()})
    builder = _SpecBuilder(kind=kind, input_dim=x_train.shape[1])
    results = grid_search(
        grid, builder, (x_train, y_train), (x_val, y_val),
        train_cfg, master_seed=seed, jobs=args.jobs,
    )

    out = _outdir(args)
    lines = ["{:<60} {:>12}".format("config", "val_mse")]
    with open(out / "grid.csv", "w") as fh:
        fh.write("rank,config,seed,val_mse,error\n")
        for rank, r in enumerate(results, start=1):
            blob = json.dumps(r.config, sort_keys=True)
            val = "" if r.val_mse is None else repr(r.val_mse)
            err = r.error or ""
            fh.write(f'{rank},"{blob.replace(chr(34), chr(34) * 2)}",{r.seed},{val},{err}\n')
            lines.append(
                "{:<60} {:>12}".format(
                    blob, f"{r.val_mse:.6g}" if r.val_mse is not None else f"FAILED"
                )
            )
    text = "\n".join(lines)
    (out / "grid.txt").write_text(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# bs


def cmd_bs(args) -> int:
    if args.mode == "price":
        if args.vol is None:
            raise _fail("--vol is required for --mode price")
        p = BsInputs(args.spot, args.strike, args.rate, args.vol, args.ttm)
        print(json.dumps({"price": bs_call_price(p)}))
    elif args.mode == "iv":
        if args.price is None:
            raise _fail("--price is required for --mode iv")
        vol = implied_vol(args.price, args.spot, args.strike, args.rate, args.ttm)
        print(json.dumps({"implied_vol": vol}))
    else:  # mc
        if args.vol is None:
            raise _fail("--vol is required for --mode mc")
        if args.seed is None:
            raise _fail("--seed is required for --mode mc")
        p = BsInputs(args.spot, args.strike, args.rate, args.vol, args.ttm)
        price, se = mc_call_price(
            p, McConfig(paths=args.paths, seed=args.seed, antithetic=args.antithetic)
        )
        print(json.dumps({"price": price, "std_error": se}))
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="optionlab",
        description="Option-pricing laboratory: synthesis, features, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, needs_out=True, needs_seed=False, needs_jobs=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config path")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        if needs_seed:
            p.add_argument("--seed", type=int, default=None, help="overrides config seed")
        if needs_jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel workers")
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate a synthetic market", needs_seed=True)
    add("prepare", cmd_prepare, "quotes + underlying + rates -> filtered feature rows")
    add("train", cmd_train, "train one model from a features file", needs_seed=True)
    add("evaluate", cmd_evaluate, "score a checkpoint and emit reports")
    add("compare", cmd_compare, "rank evaluation reports")
    add("grid", cmd_grid, "exhaustive hyperparameter sweep", needs_seed=True, needs_jobs=True)

    p_bs = sub.add_parser("bs", help="closed-form price, implied vol, or Monte Carlo check")
    p_bs.add_argument("--mode", required=True, choices=("price", "iv", "mc"))
    p_bs.add_argument("--spot", type=float, required=True)
    p_bs.add_argument("--strike", type=float, required=True)
    p_bs.add_argument("--rate", type=float, required=True)
    p_bs.add_argument("--ttm", type=float, required=True)
    p_bs.add_argument("--vol", type=float, default=None)
    p_bs.add_argument("--price", type=float, default=None)
    p_bs.add_argument("--paths", type=int, default=100_000)
    p_bs.add_argument("--seed", type=int, default=None)
    p_bs.add_argument("--antithetic", action="store_true")
    p_bs.set_defaults(func=cmd_bs)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
