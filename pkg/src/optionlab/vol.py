"""Realized volatility from daily closes.

A window-w estimate as of day t is the sample standard deviation (n-1
denominator) of the last w daily log returns ending at t, annualised by
sqrt(trading_days).  Estimates only ever look backwards: the value dated t
depends on closes up to and including t and nothing later.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "VolEstimate",
    "STANDARD_WINDOWS",
    "TRADING_DAYS_PER_YEAR",
    "log_returns",
    "realized_vol",
    "rolling_vols",
]

STANDARD_WINDOWS = (20, 30, 40, 50, 65, 90)
TRADING_DAYS_PER_YEAR = 252


@dataclass(frozen=True)
class VolEstimate:
    """One annualised estimate: the window length, the value, and its as-of key.

    ``as_of`` is whatever keys the price series (a date for real series, an
    integer index when the caller passed bare prices).
    """

    window_days: int
    value: float
    as_of: object = None

    def __post_init__(self):
        if self.window_days < 2:
            raise ValueError(f"window_days must be >= 2, got {self.window_days}")
        if not (self.value >= 0.0 and math.isfinite(self.value)):
            raise ValueError(f"value must be finite and >= 0, got {self.value}")


def log_returns(prices) -> np.ndarray:
    """ln(p[t+1] / p[t]) for consecutive closes.  Length len(prices) - 1."""
    arr = np.asarray(prices, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError(f"need a 1-D series of at least 2 prices, got shape {arr.shape}")
    if not np.all(arr > 0.0):
        raise ValueError("prices must all be positive to take log returns")
    return np.diff(np.log(arr))


def realized_vol(
    prices,
    window: int,
    trading_days: int = TRADING_DAYS_PER_YEAR,
    as_of=None,
) -> VolEstimate:
    """Annualised realized vol from the last ``window`` log returns.

    Needs at least window + 1 prices (a window of w returns).  Constant
    prices give exactly 0.
    """
    if window < 2:
        raise ValueError(f"window must be >= 2, got {window}")
    rets = log_returns(prices)
    if rets.size < window:
        raise ValueError(
            f"need at least {window + 1} prices for a {window}-day window, "
            f"got {rets.size + 1}"
        )
    value = float(np.std(rets[-window:], ddof=1) * math.sqrt(trading_days))
    return VolEstimate(window_days=window, value=value, as_of=as_of)


def rolling_vols(
    prices,
    windows=STANDARD_WINDOWS,
    dates=None,
    trading_days: int = TRADING_DAYS_PER_YEAR,
) -> dict:
    """All backward-looking estimates for every requested window.

    Returns {as_of_key: {window: VolEstimate}}.  The key for index i is
    dates[i] when ``dates`` is given (must align with prices) and i itself
    otherwise.  A date appears once any window has enough history there; the
    inner dict holds only the windows that do.  With n prices, window w has
    estimates at indices w .. n-1 (n - w of them).
    """
    arr = np.asarray(prices, dtype=np.float64)
    rets = log_returns(arr)
    if dates is not None and len(dates) != arr.size:
        raise ValueError(
            f"dates length {len(dates)} does not match prices length {arr.size}"
        )
    windows = tuple(int(w) for w in windows)
    for w in windows:
        if w < 2:
            raise ValueError(f"window must be >= 2, got {w}")

    out: dict = {}
    ann = math.sqrt(trading_days)
    for w in windows:
        if rets.size < w:
            continue
        sliding = np.lib.stride_tricks.sliding_window_view(rets, w)
        values = sliding.std(axis=1, ddof=1) * ann
        # sliding[j] covers returns j .. j+w-1, whose last return is dated
        # price index j + w
        for j, value in enumerate(values):
            idx = j + w
            key = dates[idx] if dates is not None else idx
            out.setdefault(key, {})[w] = VolEstimate(
                window_days=w, value=float(value), as_of=key
            )
    return out
