"""Factor-model abnormal returns: event-window CARs and quarterly alphas.

Daily abnormal returns come from a Carhart 4-factor model with loadings
estimated on a pre-event window; quarterly alphas use FF5 or q5 monthly
factor sets with loadings from a trailing estimation window. All outputs
are in percent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

__all__ = [
    "EventError",
    "InsufficientHistoryError",
    "MissingWindowDayError",
    "IncompleteQuarterError",
    "NonpositivePriceError",
    "NonpositiveCapexError",
    "FactorLoadings",
    "CARHART_FACTORS",
    "FF5_FACTORS",
    "Q5_FACTORS",
    "estimate_betas",
    "car",
    "adjusted_quarterly_return",
    "earnings_surprise",
    "analyst_forecast_change",
]


class EventError(Exception):
    pass


class InsufficientHistoryError(EventError):
    pass


class MissingWindowDayError(EventError):
    pass


class IncompleteQuarterError(EventError):
    pass


class NonpositivePriceError(EventError):
    pass


class NonpositiveCapexError(EventError):
    pass


CARHART_FACTORS = ["mkt_rf", "smb", "hml", "mom"]
FF5_FACTORS = ["mkt_rf", "smb", "hml", "rmw", "cma"]
Q5_FACTORS = ["mkt_rf", "size", "ia", "roe", "eg"]


@dataclass(frozen=True)
class FactorLoadings:
    alpha: float
    betas: dict[str, float]
    n_obs: int

    def implied_excess(self, factors: pd.DataFrame) -> np.ndarray:
        """Model-implied excess return for each row of ``factors``."""
        out = np.full(len(factors), self.alpha)
        for name, b in self.betas.items():
            out = out + b * factors[name].to_numpy(dtype=float)
        return out


def _ols(y: np.ndarray, X: np.ndarray) -> np.ndarray:
    Xc = np.column_stack([np.ones(len(X)), X])
    coef, *_ = np.linalg.lstsq(Xc, y, rcond=None)
    return coef


def _align(
    stock: pd.DataFrame,
    factors: pd.DataFrame,
    factor_names: list[str],
    spine: bool = False,
) -> pd.DataFrame:
    """Join stock returns to factor rows on date.

    With ``spine`` the factor calendar defines the rows, so a stock day
    missing from an otherwise open market shows up as a NaN return instead
    of silently closing the gap.
    """
    cols = factor_names + ["rf"]
    if spine:
        merged = factors[["date"] + cols].merge(stock, on="date", how="left")
    else:
        merged = stock.merge(factors[["date"] + cols], on="date", how="inner")
    return merged.sort_values("date").reset_index(drop=True)


def trading_day_zero(dates: pd.Series, event_date) -> int:
    """Position of the first trading day on/after the event date."""
    dates = pd.to_datetime(dates).reset_index(drop=True)
    event_date = pd.Timestamp(event_date)
    after = dates[dates >= event_date]
    if after.empty:
        raise MissingWindowDayError(f"no trading day on/after {event_date.date()}")
    return int(after.index[0])


def estimate_betas(
    stock: pd.DataFrame,
    factors: pd.DataFrame,
    event_date,
    window: int = 100,
    min_obs: int = 60,
    factor_names: list[str] | None = None,
) -> FactorLoadings:
    """Pre-event factor loadings from OLS of daily excess returns.

    The estimation window is the ``window`` trading days ending the day
    before day 0; fewer than ``min_obs`` valid observations raises.
    """
    factor_names = factor_names or CARHART_FACTORS
    merged = _align(stock, factors, factor_names)
    day0 = trading_day_zero(merged["date"], event_date)
    pre = merged.iloc[max(0, day0 - window) : day0].dropna(subset=["ret"] + factor_names)
    if len(pre) < min_obs:
        raise InsufficientHistoryError(
            f"{len(pre)} pre-event observations, need {min_obs}"
        )
    y = (pre["ret"] - pre["rf"]).to_numpy(dtype=float)
    X = pre[factor_names].to_numpy(dtype=float)
    coef = _ols(y, X)
    return FactorLoadings(
        alpha=float(coef[0]),
        betas=dict(zip(factor_names, coef[1:].tolist())),
        n_obs=len(pre),
    )


def car(
    stock: pd.DataFrame,
    factors: pd.DataFrame,
    loadings: FactorLoadings,
    event_date,
    horizon: int,
) -> float:
    """Cumulative abnormal return over days 0..horizon, in percent."""
    factor_names = list(loadings.betas)
    merged = _align(stock, factors, factor_names, spine=True)
    day0 = trading_day_zero(merged["date"], event_date)
    window = merged.iloc[day0 : day0 + horizon + 1]
    if len(window) != horizon + 1 or window[["ret"] + factor_names].isna().any().any():
        raise MissingWindowDayError(
            f"event window [0,{horizon}] has {len(window)} usable days"
        )
    realized = window["ret"].to_numpy(dtype=float)
    implied = window["rf"].to_numpy(dtype=float) + loadings.implied_excess(window)
    return float((realized - implied).sum() * 100.0)


def adjusted_quarterly_return(
    monthly: pd.DataFrame,
    factors: pd.DataFrame,
    model: str,
    quarter: str,
    estimation_months: int = 36,
    min_months: int = 24,
) -> float:
    """Annualized quarterly alpha: mean monthly abnormal return x 12, percent.

    ``monthly`` needs month ('YYYY-MM') and ret columns; loadings are
    estimated over the trailing ``estimation_months`` months ending before
    the quarter.
    """
    if model == "ff5":
        factor_names = FF5_FACTORS
    elif model == "q5":
        factor_names = Q5_FACTORS
    else:
        raise ValueError(f"bad model {model!r}, want 'ff5' or 'q5'")
    merged = monthly.merge(factors[["month"] + factor_names + ["rf"]], on="month", how="inner")
    merged = merged.sort_values("month").reset_index(drop=True)
    year, q = quarter.split("Q")
    months = [f"{year}-{int(q) * 3 - 2 + i:02d}" for i in range(3)]
    in_q = merged[merged["month"].isin(months)]
    if len(in_q) != 3 or in_q[["ret"] + factor_names].isna().any().any():
        raise IncompleteQuarterError(f"quarter {quarter} has {len(in_q)} usable months")

    pre = merged[merged["month"] < months[0]].dropna(subset=["ret"] + factor_names)
    pre = pre.tail(estimation_months)
    if len(pre) < min_months:
        raise InsufficientHistoryError(f"{len(pre)} estimation months, need {min_months}")
    coef = _ols((pre["ret"] - pre["rf"]).to_numpy(dtype=float), pre[factor_names].to_numpy(dtype=float))
    loadings = FactorLoadings(float(coef[0]), dict(zip(factor_names, coef[1:].tolist())), len(pre))

    realized_excess = (in_q["ret"] - in_q["rf"]).to_numpy(dtype=float)
    # Abnormal relative to factor exposure only; the estimated alpha is the
    # quantity being measured, so it stays in the abnormal return.
    implied = loadings.implied_excess(in_q) - loadings.alpha
    abnormal = realized_excess - implied
    return float(abnormal.mean() * 12.0 * 100.0)


def earnings_surprise(eps_t: float, eps_t_minus_4: float, price_t: float) -> float:
    """Year-over-year EPS change scaled by price."""
    if price_t <= 0:
        raise NonpositivePriceError(f"price {price_t} must be positive")
    return (eps_t - eps_t_minus_4) / price_t


def analyst_forecast_change(pre_consensus: float, post_consensus: float, capex_t: float) -> float:
    """Post-call minus pre-call consensus, scaled by capex, x 100."""
    if capex_t <= 0:
        raise NonpositiveCapexError(f"capex {capex_t} must be positive")
    return (post_consensus - pre_consensus) / capex_t * 100.0
