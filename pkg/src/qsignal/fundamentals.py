"""Firm-quarter variable construction, winsorization, and panel assembly.

Input is a CSV-backed DataFrame of raw accounting/market fields per firm
and fiscal quarter; output is the analysis panel with every derived ratio,
the intangible capital stock from the perpetual inventory recursion, and
materialized lead columns for the forecasting designs.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np
import pandas as pd

__all__ = [
    "FundamentalsError",
    "NonConsecutiveQuartersError",
    "ZeroCapitalError",
    "JoinKeyCollisionError",
    "quarter_index",
    "quarter_label",
    "intangible_capital",
    "total_q",
    "derive_panel",
    "winsorize",
    "assemble_panel",
    "scores_to_firm_quarter",
    "RAW_REQUIRED_COLUMNS",
    "SGA_INTANGIBLE_SHARE",
    "INTANGIBLE_DEPRECIATION",
    "MARGINAL_TAX_RATE",
]


class FundamentalsError(Exception):
    pass


class NonConsecutiveQuartersError(FundamentalsError):
    pass


class ZeroCapitalError(FundamentalsError):
    pass


class JoinKeyCollisionError(FundamentalsError):
    pass


SGA_INTANGIBLE_SHARE = 0.3
INTANGIBLE_DEPRECIATION = 0.025  # quarterly
MARGINAL_TAX_RATE = 0.30

RAW_REQUIRED_COLUMNS = [
    "firm_id",
    "fiscal_quarter",
    "book_assets",
    "capx",
    "rd",
    "sga",
    "ppe",
    "long_term_debt",
    "short_term_debt",
    "shares_out",
    "price_qtr_end",
    "current_assets",
    "income_before_extraordinary",
    "depreciation",
    "sales",
    "retained_earnings",
    "current_liabilities",
    "operating_income_before_depreciation",
    "eps",
]

_QTR_RE = re.compile(r"^(\d{4})Q([1-4])$")


def quarter_index(label: str) -> int:
    """Map 'YYYYQn' to a consecutive integer index."""
    m = _QTR_RE.match(str(label))
    if not m:
        raise ValueError(f"bad fiscal_quarter {label!r}")
    return int(m.group(1)) * 4 + int(m.group(2)) - 1


def quarter_label(index: int) -> str:
    return f"{index // 4}Q{index % 4 + 1}"


def intangible_capital(
    rd: np.ndarray,
    sga: np.ndarray,
    delta: float = INTANGIBLE_DEPRECIATION,
    g0: str | float = "steady_state",
) -> np.ndarray:
    """Perpetual-inventory intangible stock G_t = (1-delta) G_{t-1} + inv_t.

    ``inv_t = rd_t + 0.3 * sga_t``; missing flows count as zero. ``g0`` picks
    the pre-sample stock: "steady_state" seeds inv_1/delta, "zero" seeds 0,
    or pass a number directly. Inputs must cover consecutive quarters; the
    caller checks that (see :func:`derive_panel`).
    """
    rd = np.nan_to_num(np.asarray(rd, dtype=float))
    sga = np.nan_to_num(np.asarray(sga, dtype=float))
    if rd.shape != sga.shape:
        raise ValueError("rd and sga must be aligned")
    inv = rd + SGA_INTANGIBLE_SHARE * sga
    n = inv.size
    if isinstance(g0, str):
        if g0 == "steady_state":
            if delta == 0:
                seed = 0.0
            else:
                seed = inv[0] / delta if n else 0.0
        elif g0 == "zero":
            seed = 0.0
        else:
            raise ValueError(f"bad g0 rule {g0!r}")
    else:
        seed = float(g0)
    out = np.empty(n)
    prev = seed
    for i in range(n):
        prev = (1.0 - delta) * prev + inv[i]
        out[i] = prev
    return out


def total_q(market_cap, debt_book, current_assets, total_capital):
    """(market cap + book debt - current assets) / total capital."""
    total_capital = np.asarray(total_capital, dtype=float)
    if np.any(total_capital == 0):
        raise ZeroCapitalError("total_capital must be nonzero")
    q = (
        np.asarray(market_cap, dtype=float)
        + np.asarray(debt_book, dtype=float)
        - np.asarray(current_assets, dtype=float)
    ) / total_capital
    return float(q) if q.ndim == 0 else q


def _require_consecutive(group: pd.DataFrame, firm: str) -> None:
    idx = group["qtr_index"].to_numpy()
    if np.any(np.diff(idx) != 1):
        raise NonConsecutiveQuartersError(f"firm {firm!r} has gaps in fiscal quarters")


def derive_panel(raw: pd.DataFrame, g0: str | float = "steady_state") -> pd.DataFrame:
    """Compute every derived firm-quarter variable from the raw table.

    Rows without positive book assets are dropped; missing R&D/SG&A are
    flagged and treated as zero inside the intangible stock recursion.
    Ratio variables prefixed with investment/capex are in percent of their
    denominators; total_cash_flow is a plain ratio.
    """
    missing = [c for c in RAW_REQUIRED_COLUMNS if c not in raw.columns]
    if missing:
        raise FundamentalsError(f"raw table missing columns: {missing}")
    df = raw.copy()
    df["qtr_index"] = df["fiscal_quarter"].map(quarter_index)
    df = df.sort_values(["firm_id", "qtr_index"], kind="stable").reset_index(drop=True)

    n_dropped_assets = int((~(df["book_assets"] > 0)).sum())
    df = df[df["book_assets"] > 0].reset_index(drop=True)
    df.attrs["n_dropped_nonpositive_assets"] = n_dropped_assets
    df["missing_rd_flag"] = df["rd"].isna()
    df["missing_sga_flag"] = df["sga"].isna()

    stocks = []
    for firm, group in df.groupby("firm_id", sort=False):
        _require_consecutive(group, firm)
        stocks.append(
            pd.Series(
                intangible_capital(group["rd"].to_numpy(), group["sga"].to_numpy(), g0=g0),
                index=group.index,
            )
        )
    df["intangible_capital_stock"] = pd.concat(stocks)
    df["physical_capital_stock"] = df["ppe"]
    df["total_capital_stock"] = df["intangible_capital_stock"] + df["physical_capital_stock"]

    rd = df["rd"].fillna(0.0)
    sga = df["sga"].fillna(0.0)
    intangible_inv_flow = rd + SGA_INTANGIBLE_SHARE * sga
    cap = df["total_capital_stock"].where(df["total_capital_stock"] != 0)

    df["capital_expenditure"] = df["capx"] / df["book_assets"] * 100.0
    df["physical_investment"] = df["capx"] / cap * 100.0
    df["intangible_investment"] = intangible_inv_flow / cap * 100.0
    df["total_investment"] = df["physical_investment"] + df["intangible_investment"]
    df["rd_pct"] = rd / cap * 100.0

    debt = df["long_term_debt"].fillna(0.0) + df["short_term_debt"].fillna(0.0)
    mktcap = df["shares_out"] * df["price_qtr_end"]
    df["total_q"] = (mktcap + debt - df["current_assets"]) / cap
    for day, col in ((0, "total_q_c"), (1, "total_q_c1"), (5, "total_q_c5")):
        price_col = f"price_call_day{day}"
        if price_col in df.columns:
            df[col] = (df["shares_out"] * df[price_col] + debt - df["current_assets"]) / cap

    # Flow over capital; the inverted phrasing in the source definition is
    # not usable as a regression control, so flow/capital is implemented.
    cash_flow = (
        df["income_before_extraordinary"]
        + df["depreciation"]
        + (1.0 - MARGINAL_TAX_RATE) * intangible_inv_flow
    )
    df["total_cash_flow"] = cash_flow / cap

    df["leverage"] = debt / (debt + mktcap).where(debt + mktcap != 0)
    df["size"] = np.log(df["book_assets"])
    df["z_score"] = (
        3.3 * df["operating_income_before_depreciation"]
        + df["sales"]
        + 1.4 * df["retained_earnings"]
        + 1.2 * (df["current_assets"] - df["current_liabilities"])
    ) / df["book_assets"]
    df["profitability"] = (
        df["operating_income_before_depreciation"] - df["depreciation"]
    ) / df["book_assets"]
    df["sales_growth"] = df.groupby("firm_id")["sales"].pct_change()

    for opt in ("hhi", "top4shares", "life1", "life2", "life3", "life4"):
        if opt not in df.columns:
            df[opt] = np.nan
    return df


def winsorize(
    panel: pd.DataFrame,
    columns: list[str],
    tail: float = 0.01,
    by: str | None = None,
) -> pd.DataFrame:
    """Clamp each column's tails at the tail/(1-tail) quantiles.

    Quantiles use linear interpolation between order statistics and are
    computed over the pooled sample by default; pass ``by`` for per-group
    winsorization. Row order is preserved and bounds are recorded in
    ``result.attrs["winsor_bounds"]``.
    """
    if not 0 < tail < 0.5:
        raise ValueError("tail must be in (0, 0.5)")
    out = panel.copy()
    bounds: dict[str, tuple[float, float]] = {}

    def clamp(s: pd.Series) -> pd.Series:
        vals = s.dropna()
        if vals.empty:
            return s
        lo = float(np.quantile(vals, tail))
        hi = float(np.quantile(vals, 1 - tail))
        return s.clip(lo, hi)

    for col in columns:
        if by is None:
            vals = out[col].dropna()
            if vals.empty:
                continue
            lo = float(np.quantile(vals, tail))
            hi = float(np.quantile(vals, 1 - tail))
            bounds[col] = (lo, hi)
            out[col] = out[col].clip(lo, hi)
        else:
            out[col] = out.groupby(by, group_keys=False)[col].apply(clamp)
    out.attrs["winsor_bounds"] = bounds
    return out


def scores_to_firm_quarter(score_rows: pd.DataFrame, calls: pd.DataFrame) -> pd.DataFrame:
    """Pivot call-level scores into one wide row per firm-quarter.

    ``score_rows`` holds call_id, policy, mean_score, maxabs_score;
    ``calls`` maps call_id to firm_id and fiscal_quarter.
    """
    merged = score_rows.merge(calls[["call_id", "firm_id", "fiscal_quarter"]], on="call_id")
    wide = merged.pivot_table(
        index=["firm_id", "fiscal_quarter"],
        columns="policy",
        values=["mean_score", "maxabs_score"],
        aggfunc="first",
    )
    out = pd.DataFrame(index=wide.index)
    renames = {
        ("mean_score", "investment"): "chatgpt_score",
        ("maxabs_score", "investment"): "chatgpt_alt_score",
        ("mean_score", "dividend"): "dividend_score",
        ("mean_score", "employment"): "employment_score",
    }
    for key, name in renames.items():
        if key in wide.columns:
            out[name] = wide[key]
    return out.reset_index()


def assemble_panel(
    scores: pd.DataFrame,
    fundamentals: pd.DataFrame,
    extras: pd.DataFrame | None = None,
    lead_columns: list[str] | None = None,
    horizons: range = range(2, 11),
) -> pd.DataFrame:
    """Inner-join scores with fundamentals and materialize lead columns.

    Leads are built within firm on the quarter index, so gaps produce
    missing leads rather than misaligned ones. A drop report is attached in
    ``result.attrs["join_report"]``.
    """
    keys = ["firm_id", "fiscal_quarter"]
    for name, df in (("scores", scores), ("fundamentals", fundamentals)):
        if df.duplicated(keys).any():
            raise JoinKeyCollisionError(f"{name} has duplicate {keys} rows")
    panel = fundamentals.merge(scores, on=keys, how="inner")
    if extras is not None:
        if extras.duplicated(keys).any():
            raise JoinKeyCollisionError(f"extras has duplicate {keys} rows")
        panel = panel.merge(extras, on=keys, how="left")
    panel = panel.sort_values(["firm_id", "qtr_index"], kind="stable").reset_index(drop=True)

    report = {
        "n_scores": int(len(scores)),
        "n_fundamentals": int(len(fundamentals)),
        "n_joined": int(len(panel)),
        "n_scores_dropped": int(len(scores) - len(panel)),
        "n_fundamentals_dropped": int(len(fundamentals) - len(panel)),
    }

    if lead_columns:
        for col in lead_columns:
            base = panel.set_index(["firm_id", "qtr_index"])[col]
            for n in horizons:
                shifted = base.copy()
                shifted.index = pd.MultiIndex.from_arrays(
                    [
                        shifted.index.get_level_values(0),
                        shifted.index.get_level_values(1) - n,
                    ],
                    names=["firm_id", "qtr_index"],
                )
                shifted = shifted[~shifted.index.duplicated()]
                panel[f"{col}_lead{n}"] = (
                    panel.set_index(["firm_id", "qtr_index"]).index.map(shifted)
                )
    panel.attrs["join_report"] = report
    return panel


def write_panel(panel: pd.DataFrame, csv_path, manifest_path=None) -> None:
    """Emit the panel CSV plus a manifest of winsor bounds and drop counts."""
    panel.to_csv(csv_path, index=False)
    if manifest_path is not None:
        manifest = {
            "n_rows": int(len(panel)),
            "columns": list(panel.columns),
            "winsor_bounds": panel.attrs.get("winsor_bounds", {}),
            "join_report": panel.attrs.get("join_report", {}),
        }
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
