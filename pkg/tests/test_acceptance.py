"""Acceptance suite: one test per release criterion, each printing a
pass/fail line with its number so the run log doubles as the checklist."""

import json
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from fixture_calls import fixture_corpus
from test_corpus import oracle_mask
from test_econometrics import EIV_SPEC, dummy_ols, eiv_panel, make_panel
from test_events import EVENT_DATE, daily_fixture, monthly_fixture, normal_equations_betas
from test_qmodel import golden_section_max, value_objective

from qsignal.cli import main as cli_main
from qsignal.corpus import MaskRules, TextChunk, Transcript, chunk, mask_identity
from qsignal.econometrics import (
    IdentificationError,
    RegressionSpec,
    ejw_cumulant,
    fe_ols,
    standardized_effect,
)
from qsignal.events import (
    adjusted_quarterly_return,
    analyst_forecast_change,
    car,
    earnings_surprise,
    estimate_betas,
    trading_day_zero,
)
from qsignal.qmodel import default_param_grid, firm_value, optimal_investment, verify_propositions
from qsignal.scoring import (
    CHOICE_SCORES,
    PolicyKind,
    ProviderConfig,
    build_prompt,
    parse_response,
    query_provider,
    score_corpus,
)


@contextmanager
def criterion(capsys, num, desc):
    try:
        yield
    except BaseException:
        with capsys.disabled():
            print(f"[ACCEPTANCE {num}] FAIL  {desc}")
        raise
    with capsys.disabled():
        print(f"[ACCEPTANCE {num}] PASS  {desc}")


def hand_maxabs(vals):
    peak = max(abs(v) for v in vals)
    if peak == 0:
        return 0.0
    if peak in vals and -peak in vals:
        return 0.0
    return peak if peak in vals else -peak


def test_1_score_mechanics(capsys):
    with criterion(capsys, 1, "stub scoring matches hand labels and aggregation rules"):
        start = time.monotonic()
        corpus_fixture = fixture_corpus()
        assert len(corpus_fixture) == 50
        cfg = ProviderConfig(backend="stub")

        chunks_by_call = {}
        for call_id, labeled in corpus_fixture.items():
            chunks = []
            for idx, (text, want_choice, want_score) in enumerate(labeled):
                c = TextChunk(call_id, idx, text, len(text.split()))
                chunks.append(c)
                raw = query_provider(build_prompt(PolicyKind.INVESTMENT, c), cfg)
                got = parse_response(raw, PolicyKind.INVESTMENT, call_id, idx)
                assert got.choice.value == want_choice, (call_id, idx, got.choice)
                assert got.score == want_score
                assert got.score == CHOICE_SCORES[got.choice]
            chunks_by_call[call_id] = chunks

        results = {r.call_id: r for r in score_corpus(chunks_by_call, [PolicyKind.INVESTMENT], cfg)}
        assert len(results) == 50
        for call_id, labeled in corpus_fixture.items():
            vals = [score for _, _, score in labeled]
            r = results[call_id]
            assert r.mean_score == sum(vals) / len(vals)
            assert r.maxabs_score == hand_maxabs(vals)
            assert r.n_errors == 0

        # The engineered tie case: +1 and -1 chunks aggregate to maxabs 0.
        assert results["call000"].maxabs_score == 0.0
        assert results["call000"].mean_score == 0.0
        assert time.monotonic() - start < 5.0


def test_2_chunker_round_trip(capsys, rng):
    with criterion(capsys, 2, "chunk round-trip and size bound on 1,000 random transcripts"):
        start = time.monotonic()
        vocab = np.array([f"w{i}" for i in range(4096)])
        lengths = np.exp(rng.uniform(np.log(100), np.log(20_000), size=1000)).astype(int)
        lengths[0], lengths[1] = 100, 20_000  # pin the advertised extremes
        for i, n in enumerate(lengths):
            words = vocab[rng.integers(0, vocab.size, size=n)]
            t = Transcript(f"c{i}", "T", "2020Q1", pd.Timestamp("2020-01-05").date(),
                           " ".join(words))
            chunks = chunk(t, max_words=2500)
            assert all(c.word_count <= 2500 for c in chunks)
            assert " ".join(c.text for c in chunks).split() == t.text.split()
        assert time.monotonic() - start < 10.0


def test_3_masking_oracle(capsys, rng):
    with criterion(capsys, 3, "masking matches the brute-force token-rule oracle"):
        rules = MaskRules(entity_lexicon=frozenset({"acme", "globex", "initech"}))
        vocab = [
            "Acme", "GLOBEX", "initech", "revenue", "March", "sept", "May",
            "1899", "1900", "1999", "2015", "2099", "2100", "12345", "123",
            "margin,", "(2001)", "growth.", "q4", "x2001", "maybe",
        ]
        texts = [" ".join(rng.choice(vocab, size=rng.integers(8, 60))) for _ in range(100)]
        for text in texts:
            c = TextChunk("c", 0, text, len(text.split()))
            once = mask_identity(c, rules)
            assert once.text == oracle_mask(text, rules)
            assert mask_identity(once, rules).text == once.text  # idempotent
            assert len(once.text.split()) == len(text.split())

        edge = mask_identity(TextChunk("c", 0, "1899 1900 2099 2100 March Acme", 6), rules)
        assert edge.text == "1899 ### ### 2100 ### ###"


def test_4_fixed_effects_engine(capsys):
    with criterion(capsys, 4, "within estimator matches dummy OLS; clustered SEs match sandwich oracle"):
        # Dummy-variable equivalence on a panel under 500 rows.
        df = make_panel(25, 12, seed=20)
        assert len(df) <= 500
        spec = RegressionSpec(dependent="y", regressors=("x1", "x2"))
        got = fe_ols(spec, df)
        want = dummy_ols(df, "y", ["x1", "x2"], ["firm_id", "fiscal_quarter"])
        for k in ("x1", "x2"):
            assert abs(got.coefficients[k] - want[k]) < 1e-8

        # Zero-noise planted model recovered exactly.
        clean = make_panel(20, 10, seed=21, noise=0.0, betas=(1.25, -0.4))
        res = fe_ols(spec, clean)
        assert abs(res.coefficients["x1"] - 1.25) < 1e-8
        assert abs(res.coefficients["x2"] + 0.4) < 1e-8

        # 20-row hand-rolled cluster sandwich.
        rng = np.random.default_rng(22)
        small = pd.DataFrame(
            {
                "firm_id": [f"F{i}" for i in np.repeat(np.arange(5), 4)],
                "fiscal_quarter": [f"Q{t}" for t in np.tile(np.arange(4), 5)],
                "y": rng.normal(size=20),
                "x1": rng.normal(size=20),
            }
        )
        sspec = RegressionSpec(dependent="y", regressors=("x1",))
        sres = fe_ols(sspec, small)

        D = np.hstack(
            [
                pd.get_dummies(small["firm_id"]).to_numpy(float),
                pd.get_dummies(small["fiscal_quarter"], drop_first=True).to_numpy(float),
            ]
        )

        def resid(v):
            coef, *_ = np.linalg.lstsq(D, v, rcond=None)
            return v - D @ coef

        yt = resid(small["y"].to_numpy(float))
        xt = resid(small["x1"].to_numpy(float))
        beta = float(xt @ yt / (xt @ xt))
        u = yt - xt * beta
        meat = 0.0
        for f in small["firm_id"].unique():
            m = (small["firm_id"] == f).to_numpy()
            sg = float((xt[m] * u[m]).sum())
            meat += sg * sg
        k_model = 1 + 1 + 4 + 3
        c = 5 / 4 * 19 / (20 - k_model)
        se = math.sqrt(c * meat / (xt @ xt) ** 2)
        assert abs(sres.coefficients["x1"] - beta) < 1e-10
        assert abs(sres.se["x1"] - se) < 1e-10


def test_5_eiv_monte_carlo(capsys):
    with criterion(capsys, 5, "cumulant estimator de-attenuates beta over 20 Monte Carlo seeds"):
        start = time.monotonic()
        ols_spec = RegressionSpec(dependent="y", regressors=("x",))
        ols_slopes, eiv_slopes = [], []
        for seed in range(20):
            df = eiv_panel(seed)
            assert len(df) == 10_000
            ols_slopes.append(fe_ols(ols_spec, df).coefficients["x"])
            eiv_slopes.append(ejw_cumulant(EIV_SPEC, df).coefficients["x"])
        assert 0.45 <= np.mean(ols_slopes) <= 0.55
        assert 0.95 <= np.mean(eiv_slopes) <= 1.05

        with pytest.raises(IdentificationError):
            ejw_cumulant(EIV_SPEC, eiv_panel(99, latent="gaussian"))
        assert time.monotonic() - start < 60.0


def test_6_event_engine(capsys):
    with criterion(capsys, 6, "event CARs and quarterly alphas vanish under exact factor pricing"):
        stock, factors, _ = daily_fixture(seed=30)
        loadings = estimate_betas(stock, factors, EVENT_DATE)
        want = normal_equations_betas(stock, factors, EVENT_DATE)
        assert abs(loadings.alpha - want[0]) < 1e-10
        for i, name in enumerate(loadings.betas):
            assert abs(loadings.betas[name] - want[i + 1]) < 1e-10
        for w in (1, 3, 5):
            assert abs(car(stock, factors, loadings, EVENT_DATE, w)) < 1e-8

        # CAR additivity on a noisy event.
        noisy, nfactors, _ = daily_fixture(seed=31, noise=0.02)
        nl = estimate_betas(noisy, nfactors, EVENT_DATE)
        merged = noisy.merge(nfactors, on="date").sort_values("date").reset_index(drop=True)
        day0 = trading_day_zero(merged["date"], EVENT_DATE)
        daily = []
        for offset in range(6):
            row = merged.iloc[day0 + offset]
            implied = row["rf"] + nl.alpha + sum(nl.betas[f] * row[f] for f in nl.betas)
            daily.append((row["ret"] - implied) * 100.0)
        for w in (1, 3, 5):
            assert abs(car(noisy, nfactors, nl, EVENT_DATE, w) - sum(daily[: w + 1])) < 1e-10

        for model in ("ff5", "q5"):
            monthly, mfactors = monthly_fixture(seed=32, model=model)
            assert abs(adjusted_quarterly_return(monthly, mfactors, model, "2019Q3")) < 1e-8

        assert earnings_surprise(1.05, 1.00, 10.0) == pytest.approx(0.005, abs=1e-15)
        assert analyst_forecast_change(5.0, 6.0, 5.0) == 20.0


def test_7_model_propositions(capsys):
    with criterion(capsys, 7, "proposition monotonicity, dI/dq, and closed-form value agreement"):
        start = time.monotonic()
        grid = default_param_grid()
        assert len(grid) >= 10
        q_m = np.linspace(-0.2, 0.2, 101)
        reports = verify_propositions(grid, q_m)
        assert all(r.all_pass for r in reports)

        for p in grid:
            h = 1e-6
            fd = (optimal_investment(1.0 + h, p) - optimal_investment(1.0 - h, p)) / (2 * h)
            assert abs(fd - p.capital / (2 * p.c2)) / (p.capital / (2 * p.c2)) < 1e-6
            for q in (0.9, 1.1):
                f = value_objective(q, p)
                _, v_star = golden_section_max(f, -10 * p.capital, 10 * p.capital)
                assert abs(firm_value(q, p) - v_star) < 1e-8
        assert time.monotonic() - start < 10.0


SIM_ARGS = ["--seed", "2024", "--n-firms", "500", "--n-quarters", "40"]

PIPELINE_SPECS = [
    {
        "dependent": "capital_expenditure",
        "regressors": ["chatgpt_score", "total_q"],
        "lead": 2,
        "label": "capex",
    },
    {
        "dependent": "return",
        "regressors": ["chatgpt_score", "total_q"],
        "lead": 2,
        "label": "returns",
    },
]


def run_pipeline(out: Path, spec_file: Path):
    runner = CliRunner()
    steps = [
        ["simulate", "--out", str(out)] + SIM_ARGS,
        ["panel", "--out", str(out), "--panel-in", str(out / "panel.csv")],
        ["regress", "--out", str(out), "--specs", str(spec_file)],
        ["report", "--out", str(out)],
    ]
    for step in steps:
        res = runner.invoke(cli_main, step)
        assert res.exit_code == 0, (step, res.output)


def test_8_end_to_end_plant_recovery(capsys, tmp_path):
    with criterion(capsys, 8, "pipeline recovers planted coefficients and SD-units effect"):
        start = time.monotonic()
        out = tmp_path / "run"
        spec_file = tmp_path / "specs.json"
        spec_file.write_text(json.dumps(PIPELINE_SPECS))
        run_pipeline(out, spec_file)

        truth = json.loads((out / "planted_truth.json").read_text())
        table = pd.read_csv(out / "regressions.csv")
        capex_coef = table[(table["label"] == "capex") & (table["term"] == "chatgpt_score")]["coef"].iloc[0]
        ret_coef = table[(table["label"] == "returns") & (table["term"] == "chatgpt_score")]["coef"].iloc[0]
        assert abs(capex_coef - truth["beta_score"]) <= 0.10 * abs(truth["beta_score"])
        assert abs(ret_coef - truth["beta_return"]) <= 0.10 * abs(truth["beta_return"])

        panel = pd.read_csv(out / "panel.csv")
        spec = RegressionSpec(
            dependent="capital_expenditure", regressors=("chatgpt_score", "total_q"), lead=2
        )
        res = fe_ols(spec, panel)
        got_effect = standardized_effect(res, panel, "chatgpt_score", "capital_expenditure_lead2")
        want_effect = truth["beta_score"] * truth["sd_score"] / truth["sd_capex_dep"]
        assert abs(got_effect - want_effect) <= 0.005

        report = (out / "report.txt").read_text()
        assert "chatgpt_score" in report
        assert time.monotonic() - start < 120.0


def test_9_determinism(capsys, tmp_path):
    with criterion(capsys, 9, "repeat pipeline runs are byte-identical (warm cache included)"):
        out = tmp_path / "run"
        spec_file = tmp_path / "specs.json"
        spec_file.write_text(json.dumps(PIPELINE_SPECS))
        transcripts = tmp_path / "transcripts.jsonl"
        transcripts.write_text(
            "\n".join(
                json.dumps(
                    {
                        "call_id": f"c{i}",
                        "ticker": f"F{i}",
                        "fiscal_quarter": "2015Q1",
                        "call_date": "2015-02-10",
                        "text": text,
                    }
                )
                for i, text in enumerate(
                    [
                        "We plan to expand capacity at three sites.",
                        "We are lowering our capital spending this year.",
                        "Nothing notable happened this quarter.",
                    ]
                )
            )
            + "\n"
        )

        def run_all():
            runner = CliRunner()
            res = runner.invoke(
                cli_main,
                ["score", "--transcripts", str(transcripts), "--out", str(out),
                 "--provider", "stub", "--policy", "investment", "--policy", "dividend"],
            )
            assert res.exit_code == 0, res.output
            run_pipeline(out, spec_file)

        def snapshot():
            return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.is_file()}

        run_all()
        first = snapshot()
        run_all()
        second = snapshot()
        assert set(first) == set(second)
        for name in first:
            assert first[name] == second[name], f"artifact {name} changed between runs"
