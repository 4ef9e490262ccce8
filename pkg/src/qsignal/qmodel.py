"""Three-period disclosure/investment model and synthetic-panel generation.

Capital earns a linear profit a*K; adjusting the capital stock costs
c1*I + c2*K*(I/K)^2. The manager discloses a private signal about next
period's marginal value of capital, which moves investment, the
announcement return, and the expected future return in closed form. The
module also generates planted-coefficient panels for end-to-end pipeline
tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

__all__ = [
    "ModelError",
    "NonpositiveValueError",
    "NonpositiveQError",
    "ModelParams",
    "ModelOutcome",
    "optimal_investment",
    "firm_value",
    "disclosure_return",
    "expected_return",
    "solve",
    "verify_propositions",
    "PropositionReport",
    "simulate_panel",
    "PlantedTruth",
]


class ModelError(Exception):
    pass


class NonpositiveValueError(ModelError):
    pass


class NonpositiveQError(ModelError):
    pass


@dataclass(frozen=True)
class ModelParams:
    """Model primitives; defaults are the baseline admissible point."""

    c1: float = 0.0  # linear adjustment cost
    c2: float = 0.5  # quadratic adjustment cost, > 0
    delta: float = 0.1  # depreciation rate
    profit_slope: float = 1.1  # profit per unit of capital
    q_e: float = 1.0  # expected component of q
    q_m: float = 0.0  # disclosed managerial signal
    capital: float = 1.0

    def __post_init__(self):
        if self.c2 <= 0:
            raise ValueError("c2 must be > 0")
        if self.c1 < 0:
            raise ValueError("c1 must be >= 0")
        if not 0 <= self.delta <= 1:
            raise ValueError("delta must be in [0, 1]")
        if self.capital <= 0:
            raise ValueError("capital must be > 0")


@dataclass(frozen=True)
class ModelOutcome:
    investment: float
    capital_next: float
    value_pre: float
    value_post: float
    short_return: float
    expected_return: float


def optimal_investment(q: float, p: ModelParams, capital: float | None = None) -> float:
    """First-order-condition investment I = K (q - c1) / (2 c2).

    Negative values mean disinvestment; the adjustment technology never
    imposes irreversibility.
    """
    K = p.capital if capital is None else capital
    if K <= 0:
        raise ValueError("capital must be > 0")
    return K * (q - p.c1) / (2.0 * p.c2)


def firm_value(q: float, p: ModelParams) -> float:
    """Value at the optimal investment for expected marginal value ``q``.

    profit - adjustment cost + (post-investment capital) * q.
    """
    K = p.capital
    inv = optimal_investment(q, p)
    cost = p.c1 * inv + p.c2 * K * (inv / K) ** 2
    return p.profit_slope * K - cost + ((1.0 - p.delta) * K + inv) * q


def disclosure_return(p: ModelParams) -> float:
    """Ratio of firm value just after to just before the signal release."""
    v_pre = firm_value(p.q_e, p)
    if v_pre <= 0:
        raise NonpositiveValueError(f"pre-disclosure value {v_pre:.6g} <= 0")
    v_post = firm_value(p.q_e + p.q_m, p)
    return v_post / v_pre


def expected_return(p: ModelParams) -> float:
    """Expected next-period return a / q under linear profit.

    Terminal value per unit of capital is the profit slope, so the return is
    that slope divided by the realized marginal value of capital.
    """
    q = p.q_e + p.q_m
    if q <= 0:
        raise NonpositiveQError(f"realized q {q:.6g} must be positive")
    return p.profit_slope / q


def solve(p: ModelParams) -> ModelOutcome:
    """All model outcomes at one parameter point."""
    q = p.q_e + p.q_m
    inv = optimal_investment(q, p)
    v_pre = firm_value(p.q_e, p)
    if v_pre <= 0:
        raise NonpositiveValueError(f"pre-disclosure value {v_pre:.6g} <= 0")
    v_post = firm_value(q, p)
    return ModelOutcome(
        investment=inv,
        capital_next=(1.0 - p.delta) * p.capital + inv,
        value_pre=v_pre,
        value_post=v_post,
        short_return=v_post / v_pre,
        expected_return=expected_return(p),
    )


@dataclass
class PropositionReport:
    investment_monotone: bool
    short_return_monotone: bool
    expected_return_monotone: bool
    violations: list[dict] = field(default_factory=list)

    @property
    def all_pass(self) -> bool:
        return (
            self.investment_monotone
            and self.short_return_monotone
            and self.expected_return_monotone
        )


def verify_propositions(
    base_params: list[ModelParams],
    q_m_grid: np.ndarray | None = None,
) -> list[PropositionReport]:
    """Check strict monotonicity in the signal on each parameter set.

    Investment and the disclosure return must strictly increase in the
    signal; the expected future return must strictly decrease. Any violating
    consecutive pair is reported with its parameters.
    """
    if q_m_grid is None:
        q_m_grid = np.linspace(-0.2, 0.2, 101)
    if len(q_m_grid) < 2:
        raise ValueError("q_m grid needs at least 2 points")
    reports = []
    for base in base_params:
        inv, short, exp = [], [], []
        for qm in q_m_grid:
            out = solve(replace(base, q_m=float(qm)))
            inv.append(out.investment)
            short.append(out.short_return)
            exp.append(out.expected_return)
        violations = []
        flags = []
        for name, series, increasing in (
            ("investment", inv, True),
            ("short_return", short, True),
            ("expected_return", exp, False),
        ):
            ok = True
            for i in range(1, len(series)):
                good = series[i] > series[i - 1] if increasing else series[i] < series[i - 1]
                if not good:
                    ok = False
                    violations.append(
                        {
                            "quantity": name,
                            "q_m": (float(q_m_grid[i - 1]), float(q_m_grid[i])),
                            "values": (series[i - 1], series[i]),
                            "params": base,
                        }
                    )
            flags.append(ok)
        reports.append(PropositionReport(*flags, violations=violations))
    return reports


def default_param_grid() -> list[ModelParams]:
    """Shipped admissible parameter sets for the proposition checks."""
    grid = []
    for c1 in (0.0, 0.1):
        for c2 in (0.3, 0.5, 1.0):
            for delta in (0.05, 0.1):
                grid.append(
                    ModelParams(c1=c1, c2=c2, delta=delta, profit_slope=1.1, q_e=1.0)
                )
    return grid


@dataclass
class PlantedTruth:
    """Ground truth recorded alongside a simulated panel."""

    beta_score: float
    beta_q: float
    beta_return: float
    beta_q_return: float
    seed: int
    n_firms: int
    n_quarters: int
    sd_score: float
    sd_capex_dep: float
    sd_return_dep: float

    @property
    def std_effect_capex(self) -> float:
        """Planted effect of a 1-SD score move on the capex dependent, in SDs."""
        return self.beta_score * self.sd_score / self.sd_capex_dep

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)


def simulate_panel(
    n_firms: int,
    n_quarters: int,
    seed: int,
    beta_score: float = 0.638,
    beta_q: float = 0.177,
    beta_return: float = -9.795,
    beta_q_return: float = -15.64,
    score_q_corr: float = 0.3,
    firm_effect_sd: float = 1.0,
    time_effect_sd: float = 0.5,
    noise_sd: float = 0.3,
    return_noise_sd: float = 8.0,
    lead: int = 2,
) -> tuple[pd.DataFrame, PlantedTruth]:
    """Generate a firm-quarter panel with planted regression coefficients.

    Future capex (at ``lead`` quarters) responds to the score and q plus
    firm/time effects and noise; a future return responds negatively to the
    score. Score and q are drawn with the requested correlation. The panel
    is bit-reproducible for a fixed seed and is directly consumable by the
    fixed-effects estimator (lead columns are materialized).
    """
    rng = np.random.default_rng(seed)
    n = n_firms * n_quarters
    firm_ids = np.repeat(np.arange(n_firms), n_quarters)
    qtr = np.tile(np.arange(n_quarters), n_firms)

    latent = rng.normal(size=n)
    score = 0.2 * (score_q_corr * latent + math.sqrt(1 - score_q_corr**2) * rng.normal(size=n))
    q = 1.0 + 0.8 * (score_q_corr * latent + math.sqrt(1 - score_q_corr**2) * rng.normal(size=n))

    firm_fx = rng.normal(scale=firm_effect_sd, size=n_firms)
    time_fx = rng.normal(scale=time_effect_sd, size=n_quarters)
    firm_fx_r = rng.normal(scale=firm_effect_sd, size=n_firms)
    time_fx_r = rng.normal(scale=time_effect_sd, size=n_quarters)

    capex_dep = (
        beta_score * score
        + beta_q * q
        + firm_fx[firm_ids]
        + time_fx[qtr]
        + rng.normal(scale=noise_sd, size=n)
    )
    ret_dep = (
        beta_return * score
        + beta_q_return * q
        + firm_fx_r[firm_ids]
        + time_fx_r[qtr]
        + rng.normal(scale=return_noise_sd, size=n)
    )

    panel = pd.DataFrame(
        {
            "firm_id": [f"F{i:05d}" for i in firm_ids],
            "fiscal_quarter": [f"{2000 + t // 4}Q{t % 4 + 1}" for t in qtr],
            "qtr_index": qtr,
            "chatgpt_score": score,
            "total_q": q,
            f"capital_expenditure_lead{lead}": capex_dep,
            f"return_lead{lead}": ret_dep,
        }
    )
    # The lead columns above are the dependents themselves; also expose the
    # contemporaneous series so lead materialization can be exercised.
    panel["capital_expenditure"] = np.nan
    panel["return"] = np.nan
    truth = PlantedTruth(
        beta_score=beta_score,
        beta_q=beta_q,
        beta_return=beta_return,
        beta_q_return=beta_q_return,
        seed=seed,
        n_firms=n_firms,
        n_quarters=n_quarters,
        sd_score=float(np.std(score, ddof=1)),
        sd_capex_dep=float(np.std(capex_dep, ddof=1)),
        sd_return_dep=float(np.std(ret_dep, ddof=1)),
    )
    return panel, truth
