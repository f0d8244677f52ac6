"""Mispricing metrics, classification into over/under/correct, and reports.

All evaluation happens in C/K units (the training target).  A prediction is
"correct" when it lands within a relative margin (default 5%) of the observed
value, boundaries inclusive; otherwise it is "over" or "under" by sign.
Reports carry the error metrics, the three class percentages (always summing
to 100 for non-empty inputs), and per-ticker / per-moneyness breakdowns.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .bs import call_price_grid
from .market_data import FeatureRow  # noqa: F401  (documented row type)
from .vol import STANDARD_WINDOWS

__all__ = [
    "DEFAULT_MARGIN",
    "EvalReport",
    "error_metrics",
    "pricing_class",
    "class_percentages",
    "build_report",
    "bs_baseline",
    "baseline_window_table",
    "constant_mean_mse",
    "report_to_dict",
    "format_report_text",
    "write_report_csv",
    "format_window_table",
]

DEFAULT_MARGIN = 0.05


def error_metrics(pred, actual) -> tuple[float, float, float]:
    """(mse, rmse, mae) with rmse = sqrt(mse) exactly.  Rejects empty input."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {actual.shape}")
    if pred.size == 0:
        raise ValueError("cannot compute metrics on empty arrays")
    diff = pred - actual
    mse = float(np.mean(diff * diff))
    return mse, math.sqrt(mse), float(np.mean(np.abs(diff)))


def pricing_class(pred: float, actual: float, margin: float = DEFAULT_MARGIN) -> str:
    """"correct" iff |pred - actual| <= margin * actual, else "over"/"under".

    Boundary cases are correct by construction.  ``actual`` must be positive
    (C/K is positive for any live quote).
    """
    if actual <= 0.0:
        raise ValueError(f"actual must be positive, got {actual}")
    if margin < 0.0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    if abs(pred - actual) <= margin * actual:
        return "correct"
    return "over" if pred > actual else "under"


def class_percentages(pred, actual, margin: float = DEFAULT_MARGIN):
    """(pct_over, pct_under, pct_correct), summing to 100 for non-empty input."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("cannot classify an empty set")
    counts = {"over": 0, "under": 0, "correct": 0}
    for p, a in zip(pred, actual):
        counts[pricing_class(float(p), float(a), margin)] += 1
    n = pred.size
    return (
        100.0 * counts["over"] / n,
        100.0 * counts["under"] / n,
        100.0 * counts["correct"] / n,
    )


@dataclass
class EvalReport:
    """Metrics plus class percentages for one slice of the data.

    ``by_ticker`` and ``by_moneyness`` hold sub-reports (leaves have both
    empty).  Invariants: rmse^2 == mse, percentages sum to 100, every
    sub-report's n sums back to this report's n within its breakdown.
    """

    n: int
    mse: float
    rmse: float
    mae: float
    pct_over: float
    pct_under: float
    pct_correct: float
    by_ticker: dict = field(default_factory=dict)
    by_moneyness: dict = field(default_factory=dict)


def _leaf_report(pred, actual, margin) -> EvalReport:
    mse, rmse, mae = error_metrics(pred, actual)
    over, under, correct = class_percentages(pred, actual, margin)
    return EvalReport(
        n=int(np.asarray(pred).size),
        mse=mse,
        rmse=rmse,
        mae=mae,
        pct_over=over,
        pct_under=under,
        pct_correct=correct,
    )


def build_report(pred, rows, margin: float = DEFAULT_MARGIN) -> EvalReport:
    """Overall report with per-ticker and per-moneyness breakdowns.

    ``pred`` aligns with ``rows`` (FeatureRow order); actuals are the rows'
    targets.  Breakdown labels are ticker strings and the moneyness category
    values ("otm", "atm", "itm"); empty slices are simply absent.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape[0] != len(rows):
        raise ValueError(
            f"{pred.shape[0]} predictions for {len(rows)} rows"
        )
    actual = np.array([r.target for r in rows], dtype=np.float64)
    report = _leaf_report(pred, actual, margin)

    by_ticker_idx: dict = {}
    by_money_idx: dict = {}
    for i, row in enumerate(rows):
        by_ticker_idx.setdefault(row.ticker, []).append(i)
        by_money_idx.setdefault(row.moneyness().value, []).append(i)
    for label, idx in sorted(by_ticker_idx.items()):
        report.by_ticker[label] = _leaf_report(pred[idx], actual[idx], margin)
    for label in ("otm", "atm", "itm"):
        if label in by_money_idx:
            idx = by_money_idx[label]
            report.by_moneyness[label] = _leaf_report(pred[idx], actual[idx], margin)
    return report


def bs_baseline(rows, window: int) -> np.ndarray:
    """Closed-form C/K using the window-w realized vol as the vol input.

    The closed form is homogeneous of degree one in (spot, strike), so
    C/K = price(S/K, 1, r, sigma_w, tau); the baseline needs only the
    published features.  Raises if any row lacks the requested window.
    """
    for r in rows:
        if window not in r.sigmas:
            raise ValueError(
                f"row {r.ticker} {r.quote_date} has no sigma_{window} feature"
            )
    s_over_k = np.array([r.s_over_k for r in rows])
    rate = np.array([r.rate for r in rows])
    vol = np.array([r.sigmas[window] for r in rows])
    ttm = np.array([r.ttm_years for r in rows])
    return call_price_grid(s_over_k, 1.0, rate, vol, ttm)


def baseline_window_table(rows, windows=STANDARD_WINDOWS, margin=DEFAULT_MARGIN):
    """One baseline report per vol window: [(window, EvalReport), ...].

    The interesting read is how the error moves as the window lengthens:
    short windows track current conditions but are noisy, long windows are
    stable but stale, and which effect dominates depends on how close the
    pricing vol is to a long-run level.
    """
    actual = np.array([r.target for r in rows], dtype=np.float64)
    out = []
    for w in windows:
        pred = bs_baseline(rows, w)
        out.append((w, _leaf_report(pred, actual, margin)))
    return out


def constant_mean_mse(train_targets, eval_targets) -> float:
    """MSE of always predicting the training-target mean; a floor for 'learned anything'."""
    train_targets = np.asarray(train_targets, dtype=np.float64)
    eval_targets = np.asarray(eval_targets, dtype=np.float64)
    if train_targets.size == 0 or eval_targets.size == 0:
        raise ValueError("empty targets")
    mean = float(train_targets.mean())
    diff = eval_targets - mean
    return float(np.mean(diff * diff))


# ---------------------------------------------------------------------------
# emitters


def report_to_dict(report: EvalReport) -> dict:
    out = {
        "n": report.n,
        "mse": report.mse,
        "rmse": report.rmse,
        "mae": report.mae,
        "pct_over": report.pct_over,
        "pct_under": report.pct_under,
        "pct_correct": report.pct_correct,
    }
    if report.by_ticker:
        out["by_ticker"] = {k: report_to_dict(v) for k, v in report.by_ticker.items()}
    if report.by_moneyness:
        out["by_moneyness"] = {
            k: report_to_dict(v) for k, v in report.by_moneyness.items()
        }
    return out


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=True)


_ROW = "{:<12} {:>8} {:>12} {:>12} {:>12} {:>8} {:>8} {:>9}"


def format_report_text(report: EvalReport, title: str = "overall") -> str:
    lines = [
        _ROW.format("slice", "n", "mse", "rmse", "mae", "over%", "under%", "correct%")
    ]

    def emit(label, r):
        lines.append(
            _ROW.format(
                label,
                r.n,
                f"{r.mse:.6g}",
                f"{r.rmse:.6g}",
                f"{r.mae:.6g}",
                f"{r.pct_over:.2f}",
                f"{r.pct_under:.2f}",
                f"{r.pct_correct:.2f}",
            )
        )

    emit(title, report)
    for label, sub in report.by_ticker.items():
        emit(f"  {label}", sub)
    for label, sub in report.by_moneyness.items():
        emit(f"  {label}", sub)
    return "\n".join(lines)


def write_report_csv(report: EvalReport, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["scope", "label", "n", "mse", "rmse", "mae", "pct_over", "pct_under", "pct_correct"]
        )

        def emit(scope, label, r):
            w.writerow(
                [scope, label, r.n, repr(r.mse), repr(r.rmse), repr(r.mae),
                 repr(r.pct_over), repr(r.pct_under), repr(r.pct_correct)]
            )

        emit("overall", "", report)
        for label, sub in report.by_ticker.items():
            emit("ticker", label, sub)
        for label, sub in report.by_moneyness.items():
            emit("moneyness", label, sub)


def format_window_table(table) -> str:
    """Render [(window, EvalReport)] as a fixed-width text table."""
    lines = ["{:>8} {:>12} {:>12} {:>12} {:>9}".format("window", "mse", "rmse", "mae", "correct%")]
    for window, r in table:
        lines.append(
            "{:>8} {:>12.6g} {:>12.6g} {:>12.6g} {:>9.2f}".format(
                window, r.mse, r.rmse, r.mae, r.pct_correct
            )
        )
    return "\n".join(lines)
