"""Panel regressions: two-way FE OLS, clustered errors, cumulant EIV.

The within transformation uses alternating projections over the fixed-effect
dimensions; estimation then runs OLS on the demeaned system with a
cluster-robust sandwich variance. The errors-in-variables estimator
identifies the slope of one mismeasured regressor from third-order moments
of the partialled data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

__all__ = [
    "RegressionSpec",
    "RegressionResult",
    "EconometricsError",
    "NoConvergenceError",
    "RankDeficientError",
    "TooFewClustersError",
    "IdentificationError",
    "ZeroVarianceError",
    "within_transform",
    "fe_ols",
    "ejw_cumulant",
    "standardized_effect",
    "run_table",
    "format_table",
    "stars",
]


class EconometricsError(Exception):
    pass


class NoConvergenceError(EconometricsError):
    def __init__(self, residual: float, sweeps: int):
        self.residual = residual
        self.sweeps = sweeps
        super().__init__(f"no convergence after {sweeps} sweeps, residual {residual:.3e}")


class RankDeficientError(EconometricsError):
    def __init__(self, dropped: list[str]):
        self.dropped = dropped
        super().__init__(f"design matrix rank deficient; absorbed columns: {dropped}")


class TooFewClustersError(EconometricsError):
    pass


class IdentificationError(EconometricsError):
    pass


class ZeroVarianceError(EconometricsError):
    pass


@dataclass(frozen=True)
class RegressionSpec:
    """Declarative regression design.

    ``dependent`` may carry a lead offset via ``lead`` (the panel must hold a
    materialized ``{dependent}_lead{lead}`` column). ``interactions`` are
    pairs of column names whose product is added as a regressor.
    ``mismeasured`` switches estimation to the cumulant EIV path.
    """

    dependent: str
    regressors: tuple[str, ...]
    lead: int = 0
    interactions: tuple[tuple[str, str], ...] = ()
    fe_dims: tuple[str, ...] = ("firm_id", "fiscal_quarter")
    cluster_dim: str = "firm_id"
    filter_query: str | None = None
    mismeasured: str | None = None
    cumulant_order: int = 3
    label: str | None = None

    def __post_init__(self):
        if self.mismeasured is not None and self.mismeasured not in self.regressors:
            raise ValueError("mismeasured column must be among the regressors")
        if not self.fe_dims:
            raise ValueError("fe_dims must be nonempty for within estimation")

    @property
    def dependent_column(self) -> str:
        return f"{self.dependent}_lead{self.lead}" if self.lead else self.dependent

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionSpec":
        return cls(
            dependent=d["dependent"],
            regressors=tuple(d["regressors"]),
            lead=int(d.get("lead", 0)),
            interactions=tuple((a, b) for a, b in d.get("interactions", [])),
            fe_dims=tuple(d.get("fe", ["firm_id", "fiscal_quarter"])),
            cluster_dim=d.get("cluster", "firm_id"),
            filter_query=d.get("filter"),
            mismeasured=d.get("mismeasured"),
            cumulant_order=int(d.get("cumulant_order", 3)),
            label=d.get("label"),
        )


@dataclass
class RegressionResult:
    coefficients: dict[str, float]
    se: dict[str, float]
    t_stats: dict[str, float]
    r_squared: float
    within_r_squared: float
    n_obs: int
    n_clusters: int
    rho_squared: float | None = None
    dropped: list[str] = field(default_factory=list)
    label: str | None = None


def within_transform(
    data: pd.DataFrame,
    columns: list[str],
    fe_dims: list[str],
    tol: float = 1e-10,
    max_sweeps: int = 10_000,
) -> pd.DataFrame:
    """Demean ``columns`` by alternating projections over ``fe_dims``.

    One dimension converges in a single sweep; with several dimensions,
    sweeping continues until the largest cell change falls below ``tol``.
    Singleton groups demean to zero and contribute no within variation.
    """
    for dim in fe_dims:
        if data[dim].nunique() < 1:
            raise EconometricsError(f"fixed-effect dimension {dim!r} is empty")
    work = data[columns].to_numpy(dtype=float).copy()
    group_codes = [pd.factorize(data[dim].to_numpy())[0] for dim in fe_dims]
    counts = [np.bincount(codes).astype(float) for codes in group_codes]

    if len(fe_dims) == 1:
        codes = group_codes[0]
        means = np.zeros((counts[0].size, work.shape[1]))
        np.add.at(means, codes, work)
        means /= counts[0][:, None]
        work -= means[codes]
        return pd.DataFrame(work, columns=columns, index=data.index)

    for sweep in range(max_sweeps):
        max_change = 0.0
        for codes, cnt in zip(group_codes, counts):
            means = np.zeros((cnt.size, work.shape[1]))
            np.add.at(means, codes, work)
            means /= cnt[:, None]
            delta = means[codes]
            work -= delta
            change = np.abs(delta).max() if delta.size else 0.0
            max_change = max(max_change, change)
        if max_change < tol:
            break
    else:
        raise NoConvergenceError(max_change, max_sweeps)
    return pd.DataFrame(work, columns=columns, index=data.index)


def _materialize_design(spec: RegressionSpec, panel: pd.DataFrame) -> tuple[pd.DataFrame, list[str]]:
    """Filter, add interaction products, and drop incomplete rows."""
    df = panel
    if spec.filter_query:
        df = df.query(spec.filter_query)
    names = list(spec.regressors)
    df = df.copy()
    for a, b in spec.interactions:
        name = f"{a}:{b}"
        df[name] = df[a] * df[b]
        names.append(name)
    needed = [spec.dependent_column] + names + list(spec.fe_dims) + [spec.cluster_dim]
    needed = list(dict.fromkeys(needed))
    df = df.dropna(subset=needed)
    if df.empty:
        raise EconometricsError("no complete observations for this specification")
    return df.reset_index(drop=True), names


def _drop_collinear(X: np.ndarray, names: list[str], tol: float = 1e-8):
    """Greedy QR-based pruning of columns absorbed or collinear after demeaning."""
    keep: list[int] = []
    dropped: list[str] = []
    for j in range(X.shape[1]):
        cand = X[:, keep + [j]]
        if np.linalg.matrix_rank(cand, tol=tol * max(1.0, np.abs(cand).max())) == len(keep) + 1:
            keep.append(j)
        else:
            dropped.append(names[j])
    return keep, dropped


def _cluster_sandwich(
    Xd: np.ndarray, resid: np.ndarray, clusters: np.ndarray, k_model: int
) -> tuple[np.ndarray, int]:
    """Cluster-robust vcov with the G/(G-1) * (N-1)/(N-K) correction."""
    n = Xd.shape[0]
    codes, uniques = pd.factorize(clusters)
    G = uniques.size
    if G < 2:
        raise TooFewClustersError(f"need at least 2 clusters, got {G}")
    XtX_inv = np.linalg.inv(Xd.T @ Xd)
    k = Xd.shape[1]
    scores = Xd * resid[:, None]
    meat = np.zeros((k, k))
    for g in range(G):
        sg = scores[codes == g].sum(axis=0)
        meat += np.outer(sg, sg)
    c = G / (G - 1) * (n - 1) / (n - k_model)
    return c * XtX_inv @ meat @ XtX_inv, G


def _fe_dof(df: pd.DataFrame, fe_dims) -> int:
    # Absorbed parameters: one grand mean plus (levels - 1) per dimension.
    return 1 + sum(df[dim].nunique() - 1 for dim in fe_dims)


def fe_ols(spec: RegressionSpec, panel: pd.DataFrame) -> RegressionResult:
    """Fixed-effects OLS with cluster-robust standard errors."""
    df, names = _materialize_design(spec, panel)
    ycol = spec.dependent_column
    demeaned = within_transform(df, [ycol] + names, list(spec.fe_dims))
    y = demeaned[ycol].to_numpy()
    X = demeaned[names].to_numpy()

    keep, dropped = _drop_collinear(X, names)
    if not keep:
        raise RankDeficientError(dropped)
    Xk = X[:, keep]
    kept_names = [names[j] for j in keep]

    beta, *_ = np.linalg.lstsq(Xk, y, rcond=None)
    resid = y - Xk @ beta
    k_model = len(keep) + _fe_dof(df, spec.fe_dims)
    vcov, G = _cluster_sandwich(Xk, resid, df[spec.cluster_dim].to_numpy(), k_model)
    se = np.sqrt(np.diag(vcov))

    ssr = float(resid @ resid)
    y_raw = df[ycol].to_numpy()
    sst_raw = float(((y_raw - y_raw.mean()) ** 2).sum())
    sst_within = float((y**2).sum())
    r2 = 1.0 - ssr / sst_raw if sst_raw > 0 else float("nan")
    r2_within = 1.0 - ssr / sst_within if sst_within > 0 else float("nan")

    coefs = dict(zip(kept_names, beta.tolist()))
    ses = dict(zip(kept_names, se.tolist()))
    tstats = {k: coefs[k] / ses[k] if ses[k] > 0 else float("nan") for k in kept_names}
    return RegressionResult(
        coefficients=coefs,
        se=ses,
        t_stats=tstats,
        r_squared=r2,
        within_r_squared=r2_within,
        n_obs=len(df),
        n_clusters=G,
        dropped=dropped,
        label=spec.label,
    )


def _partial_out(target: np.ndarray, Z: np.ndarray) -> np.ndarray:
    if Z.shape[1] == 0:
        return target
    coef, *_ = np.linalg.lstsq(Z, target, rcond=None)
    return target - Z @ coef


def ejw_cumulant(
    spec: RegressionSpec,
    panel: pd.DataFrame,
    identification_tol: float = 0.2,
) -> RegressionResult:
    """Third-order cumulant estimator for one mismeasured regressor.

    Fixed effects and the perfectly measured controls are partialled out of
    the dependent variable and the mismeasured regressor; the slope is the
    ratio E[y^2 x] / E[y x^2] of the partialled data. A (scale-normalized)
    third cross-moment near zero means the latent regressor is symmetric and
    the slope is not identified. Standard errors come from the clustered
    influence function of the moment ratio. ``rho_squared`` is the implied
    hypothetical OLS R^2, beta * E[y x] / Var(y).
    """
    if spec.mismeasured is None:
        raise ValueError("spec.mismeasured must be set for cumulant estimation")
    if spec.cumulant_order != 3:
        raise NotImplementedError("only cumulant order 3 is implemented")
    df, names = _materialize_design(spec, panel)
    ycol = spec.dependent_column
    controls = [c for c in names if c != spec.mismeasured]
    demeaned = within_transform(df, [ycol] + names, list(spec.fe_dims))
    Z = demeaned[controls].to_numpy()
    y = _partial_out(demeaned[ycol].to_numpy(), Z)
    x = _partial_out(demeaned[spec.mismeasured].to_numpy(), Z)

    n = y.size
    A = float(np.mean(y * y * x))
    B = float(np.mean(y * x * x))
    sy = float(np.std(y))
    sx2 = float(np.var(x))
    scale = sy * sx2
    if scale == 0 or abs(B) / scale < identification_tol:
        raise IdentificationError(
            f"third cross-moment too small (|E[yx^2]|/scale = {abs(B) / scale if scale else 0:.4f}); "
            "latent regressor appears symmetric"
        )
    beta = A / B

    # Influence function of the ratio, summed within clusters.
    psi = (y * y * x - A - beta * (y * x * x - B)) / B
    codes, uniques = pd.factorize(df[spec.cluster_dim].to_numpy())
    G = uniques.size
    if G < 2:
        raise TooFewClustersError(f"need at least 2 clusters, got {G}")
    cluster_sums = np.zeros(G)
    np.add.at(cluster_sums, codes, psi)
    var_beta = G / (G - 1) * float((cluster_sums**2).sum()) / n**2
    se_beta = math.sqrt(var_beta)

    # Controls recovered by substituting the identified slope back in.
    coefs = {spec.mismeasured: beta}
    ses = {spec.mismeasured: se_beta}
    if controls:
        y_net = demeaned[ycol].to_numpy() - beta * demeaned[spec.mismeasured].to_numpy()
        gam, *_ = np.linalg.lstsq(Z, y_net, rcond=None)
        resid = y_net - Z @ gam
        k_model = len(controls) + _fe_dof(df, spec.fe_dims)
        vcov, _ = _cluster_sandwich(Z, resid, df[spec.cluster_dim].to_numpy(), k_model)
        gses = np.sqrt(np.diag(vcov))
        coefs.update(dict(zip(controls, gam.tolist())))
        ses.update(dict(zip(controls, gses.tolist())))

    var_y = float(np.var(y))
    rho2 = beta * float(np.mean(y * x)) / var_y if var_y > 0 else float("nan")
    tstats = {k: coefs[k] / ses[k] if ses[k] > 0 else float("nan") for k in coefs}
    return RegressionResult(
        coefficients=coefs,
        se=ses,
        t_stats=tstats,
        r_squared=float("nan"),
        within_r_squared=float("nan"),
        n_obs=n,
        n_clusters=G,
        rho_squared=rho2,
        label=spec.label,
    )


def standardized_effect(
    result: RegressionResult,
    panel: pd.DataFrame,
    regressor: str,
    dependent: str,
) -> float:
    """coef * sd(regressor) / sd(dependent), SDs from the raw sample."""
    sx = float(panel[regressor].std())
    sy = float(panel[dependent].std())
    if not sx or not sy or math.isnan(sx) or math.isnan(sy):
        raise ZeroVarianceError(f"zero or undefined SD for {regressor!r} or {dependent!r}")
    return result.coefficients[regressor] * sx / sy


def stars(t_stat: float) -> str:
    """Two-sided significance stars at 0.10 / 0.05 / 0.01 (normal critical values)."""
    at = abs(t_stat)
    if at >= 2.5758293035489004:
        return "***"
    if at >= 1.959963984540054:
        return "**"
    if at >= 1.6448536269514722:
        return "*"
    return ""


def run_table(specs: list[RegressionSpec], panel: pd.DataFrame) -> list[RegressionResult | Exception]:
    """Estimate each spec, isolating failures to their own column."""
    out: list[RegressionResult | Exception] = []
    for spec in specs:
        try:
            if spec.mismeasured is not None:
                out.append(ejw_cumulant(spec, panel))
            else:
                out.append(fe_ols(spec, panel))
        except EconometricsError as exc:
            out.append(exc)
    return out


def format_table(results: list[RegressionResult | Exception]) -> str:
    """Fixed-width text table with coefficient/(t-stat) stacking per column."""
    ok = [r for r in results if isinstance(r, RegressionResult)]
    rows: list[str] = []
    for r in ok:
        for name in r.coefficients:
            if name not in rows:
                rows.append(name)
    headers = [
        r.label if isinstance(r, RegressionResult) and r.label else f"({i + 1})"
        for i, r in enumerate(results)
    ]
    width = max([24] + [len(h) + 2 for h in headers])
    name_w = max([20] + [len(n) + 2 for n in rows])

    def cell(text: str) -> str:
        return text.rjust(width)

    lines = ["".ljust(name_w) + "".join(cell(h) for h in headers)]
    for name in rows:
        coef_cells, t_cells = [], []
        for r in results:
            if isinstance(r, Exception):
                coef_cells.append(cell("ERROR"))
                t_cells.append(cell(""))
            elif name in r.coefficients:
                c = r.coefficients[name]
                t = r.t_stats[name]
                coef_cells.append(cell(f"{c:.4g}{stars(t)}"))
                t_cells.append(cell(f"({t:.2f})"))
            else:
                coef_cells.append(cell(""))
                t_cells.append(cell(""))
        lines.append(name.ljust(name_w) + "".join(coef_cells))
        lines.append("".ljust(name_w) + "".join(t_cells))
    for label, attr in (("N", "n_obs"), ("Clusters", "n_clusters")):
        cells = []
        for r in results:
            cells.append(cell("" if isinstance(r, Exception) else str(getattr(r, attr))))
        lines.append(label.ljust(name_w) + "".join(cells))
    r2_cells, rho_cells = [], []
    for r in results:
        if isinstance(r, Exception):
            r2_cells.append(cell(str(r)[:width - 1]))
            rho_cells.append(cell(""))
        else:
            r2_cells.append(cell("" if math.isnan(r.r_squared) else f"{r.r_squared:.3f}"))
            rho_cells.append(cell("" if r.rho_squared is None else f"{r.rho_squared:.3f}"))
    lines.append("R-squared".ljust(name_w) + "".join(r2_cells))
    if any(isinstance(r, RegressionResult) and r.rho_squared is not None for r in results):
        lines.append("Rho-squared".ljust(name_w) + "".join(rho_cells))
    return "\n".join(lines) + "\n"


def results_to_csv(results: list[RegressionResult | Exception], path) -> None:
    records = []
    for i, r in enumerate(results):
        if isinstance(r, Exception):
            records.append({"column": i + 1, "error": str(r)})
            continue
        for name, c in r.coefficients.items():
            records.append(
                {
                    "column": i + 1,
                    "label": r.label or "",
                    "term": name,
                    "coef": c,
                    "se": r.se[name],
                    "t": r.t_stats[name],
                    "stars": stars(r.t_stats[name]),
                    "n_obs": r.n_obs,
                    "n_clusters": r.n_clusters,
                    "r_squared": r.r_squared,
                    "rho_squared": r.rho_squared,
                }
            )
    pd.DataFrame.from_records(records).to_csv(path, index=False)


def load_specs(path) -> list[RegressionSpec]:
    """Read a declarative JSON spec file (a list of spec objects)."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return [RegressionSpec.from_dict(d) for d in raw]
