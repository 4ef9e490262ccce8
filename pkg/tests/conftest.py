import numpy as np
import pandas as pd
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_raw_fundamentals(n_firms=3, n_quarters=8, seed=7):
    """Small raw accounting table with consecutive quarters per firm."""
    rng = np.random.default_rng(seed)
    rows = []
    for f in range(n_firms):
        for t in range(n_quarters):
            year, q = 2015 + t // 4, t % 4 + 1
            rows.append(
                {
                    "firm_id": f"F{f}",
                    "fiscal_quarter": f"{year}Q{q}",
                    "book_assets": 100.0 + 10 * rng.random(),
                    "capx": 5.0 + rng.random(),
                    "rd": 2.0 + rng.random(),
                    "sga": 10.0 + rng.random(),
                    "ppe": 60.0 + rng.random(),
                    "long_term_debt": 20.0,
                    "short_term_debt": 5.0,
                    "shares_out": 10.0,
                    "price_qtr_end": 12.0 + rng.random(),
                    "current_assets": 30.0,
                    "income_before_extraordinary": 3.0 + rng.random(),
                    "depreciation": 2.0,
                    "sales": 50.0 + 5 * rng.random(),
                    "retained_earnings": 25.0,
                    "current_liabilities": 20.0,
                    "operating_income_before_depreciation": 8.0 + rng.random(),
                    "eps": 1.0 + 0.1 * rng.random(),
                }
            )
    return pd.DataFrame(rows)
