"""Batch pipeline orchestration: one subcommand per stage.

Each stage reads its inputs from a JSON config (overridable by flags),
writes its artifacts plus a machine-readable run manifest (input hashes,
parameters, package version), and exits nonzero with a structured error on
failure. Stages compose: the score stage's CSV is valid input to the panel
stage, and the panel CSV feeds regress/report.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import __version__, corpus, econometrics, events, fundamentals, qmodel, scoring


class ConfigError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(p, encoding="utf-8") as fh:
        return json.load(fh)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(out_dir: Path, stage: str, inputs: list[Path], params: dict) -> None:
    manifest = {
        "stage": stage,
        "version": __version__,
        "inputs": {str(p): _sha256_file(p) for p in inputs if p and Path(p).exists()},
        "params": params,
    }
    with open(out_dir / f"{stage}_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _out_dir(config: dict, out: str | None) -> Path:
    d = Path(out or config.get("output_dir", "out"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _fail(stage: str, exc: Exception) -> None:
    click.echo(json.dumps({"stage": stage, "error": type(exc).__name__, "message": str(exc)}), err=True)
    sys.exit(1)


@click.group()
def main():
    """Earnings-call policy scoring and validation pipeline."""


_config_opt = click.option("--config", "config_path", default=None, help="JSON config file.")
_out_opt = click.option("--out", "out", default=None, help="Output directory.")


@main.command()
@_config_opt
@_out_opt
@click.option("--transcripts", default=None, help="Line-delimited JSON transcript file.")
def ingest(config_path, out, transcripts):
    """Validate transcripts and report corpus statistics."""
    try:
        config = _load_config(config_path)
        path = Path(transcripts or config["paths"]["transcripts"])
        calls = corpus.read_transcripts_jsonl(path, on_duplicate=config.get("on_duplicate", "reject"))
        out_dir = _out_dir(config, out)
        rows = [
            {
                "call_id": t.call_id,
                "ticker": t.ticker,
                "fiscal_quarter": t.fiscal_quarter,
                "call_date": t.call_date.isoformat(),
                "word_count": len(t.text.split()),
            }
            for t in calls
        ]
        pd.DataFrame(rows).to_csv(out_dir / "calls.csv", index=False)
        _write_manifest(out_dir, "ingest", [path], {"n_calls": len(calls)})
        click.echo(f"ingested {len(calls)} transcripts")
    except Exception as exc:  # noqa: BLE001 - stage boundary
        _fail("ingest", exc)


@main.command()
@_config_opt
@_out_opt
@click.option("--transcripts", default=None)
@click.option("--entities", default=None, help="Entity lexicon file (one name per line).")
def mask(config_path, out, transcripts, entities):
    """Mask years, months, and lexicon entities in every chunk."""
    try:
        config = _load_config(config_path)
        path = Path(transcripts or config["paths"]["transcripts"])
        lex_path = entities or config.get("paths", {}).get("entities")
        lexicon = corpus.load_lexicon(lex_path) if lex_path else frozenset()
        rules = corpus.MaskRules(entity_lexicon=lexicon)
        max_words = int(config.get("chunk_max_words", 2500))
        out_dir = _out_dir(config, out)
        calls = corpus.read_transcripts_jsonl(path)
        with open(out_dir / "masked_chunks.jsonl", "w", encoding="utf-8") as fh:
            for t in sorted(calls, key=lambda t: t.call_id):
                for c in corpus.chunk(t, max_words):
                    masked = corpus.mask_identity(c, rules)
                    fh.write(
                        json.dumps(
                            {
                                "call_id": masked.call_id,
                                "chunk_index": masked.chunk_index,
                                "text": masked.text,
                                "word_count": masked.word_count,
                            }
                        )
                        + "\n"
                    )
        _write_manifest(
            out_dir, "mask", [path] + ([Path(lex_path)] if lex_path else []),
            {"max_words": max_words, "n_entities": len(lexicon)},
        )
        click.echo(f"masked {len(calls)} transcripts")
    except Exception as exc:  # noqa: BLE001
        _fail("mask", exc)


@main.command()
@_config_opt
@_out_opt
@click.option("--transcripts", default=None)
@click.option("--policy", "policies", multiple=True,
              type=click.Choice(["investment", "dividend", "employment"]))
@click.option("--provider", default=None, type=click.Choice(["remote", "stub"]))
def score(config_path, out, transcripts, policies, provider):
    """Chunk, prompt, and score every transcript for the selected policies."""
    try:
        config = _load_config(config_path)
        path = Path(transcripts or config["paths"]["transcripts"])
        out_dir = _out_dir(config, out)
        provider_cfg = scoring.ProviderConfig(**config.get("provider", {}))
        if provider:
            provider_cfg = replace(provider_cfg, backend=provider)
        if provider_cfg.cache_path is None:
            provider_cfg = replace(provider_cfg, cache_path=str(out_dir / "response_cache.jsonl"))
        kinds = [scoring.PolicyKind(p) for p in (policies or ("investment",))]
        max_words = int(config.get("chunk_max_words", 2500))
        calls = corpus.read_transcripts_jsonl(path)
        chunks = {t.call_id: corpus.chunk(t, max_words) for t in calls}
        results = scoring.score_corpus(chunks, kinds, provider_cfg)
        scoring.write_score_csv(results, out_dir / "scores.csv")
        meta = pd.DataFrame(
            {
                "call_id": [t.call_id for t in calls],
                "ticker": [t.ticker for t in calls],
                "firm_id": [t.ticker for t in calls],
                "fiscal_quarter": [t.fiscal_quarter for t in calls],
                "call_date": [t.call_date.isoformat() for t in calls],
            }
        ).sort_values("call_id")
        meta.to_csv(out_dir / "calls.csv", index=False)
        _write_manifest(
            out_dir, "score", [path],
            {
                "policies": [k.value for k in kinds],
                "backend": provider_cfg.backend,
                "model": provider_cfg.model_name,
                "max_words": max_words,
            },
        )
        click.echo(f"scored {len(calls)} calls x {len(kinds)} policies")
    except Exception as exc:  # noqa: BLE001
        _fail("score", exc)


@main.command()
@_config_opt
@_out_opt
@click.option("--scores", "scores_path", default=None, help="Score CSV (from the score stage).")
@click.option("--calls", "calls_path", default=None, help="Call metadata CSV.")
@click.option("--fundamentals", "fundamentals_path", default=None, help="Raw firm-quarter CSV.")
@click.option("--panel-in", "panel_in", default=None,
              help="Prebuilt panel CSV (e.g. from simulate); skips derivation and joins.")
def panel(config_path, out, scores_path, calls_path, fundamentals_path, panel_in):
    """Derive variables, winsorize, and join scores into the analysis panel."""
    try:
        config = _load_config(config_path)
        out_dir = _out_dir(config, out)
        paths = config.get("paths", {})
        panel_in = panel_in or paths.get("panel_in")
        if panel_in:
            prebuilt = pd.read_csv(panel_in)
            fundamentals.write_panel(prebuilt, out_dir / "panel.csv", out_dir / "panel_stats.json")
            _write_manifest(out_dir, "panel", [Path(panel_in)], {"mode": "passthrough"})
            click.echo(f"panel rows: {len(prebuilt)}")
            return
        scores_p = Path(scores_path or paths.get("scores", out_dir / "scores.csv"))
        calls_p = Path(calls_path or paths.get("calls", out_dir / "calls.csv"))
        fund_p = Path(fundamentals_path or paths["fundamentals"])

        raw = pd.read_csv(fund_p)
        derived = fundamentals.derive_panel(raw, g0=config.get("intangible_g0", "steady_state"))
        winsor_cols = config.get(
            "winsorize_columns",
            ["capital_expenditure", "total_q", "total_cash_flow", "leverage"],
        )
        tail = float(config.get("winsorize_tail", 0.01))
        derived = fundamentals.winsorize(derived, [c for c in winsor_cols if c in derived], tail)

        score_rows = pd.read_csv(scores_p)
        calls = pd.read_csv(calls_p)
        wide = fundamentals.scores_to_firm_quarter(score_rows, calls)
        lead_cols = config.get("lead_columns", ["capital_expenditure", "total_investment"])
        merged = fundamentals.assemble_panel(
            wide, derived, lead_columns=[c for c in lead_cols if c in derived]
        )
        merged.attrs["winsor_bounds"] = derived.attrs.get("winsor_bounds", {})
        fundamentals.write_panel(merged, out_dir / "panel.csv", out_dir / "panel_stats.json")
        _write_manifest(
            out_dir, "panel", [scores_p, calls_p, fund_p],
            {"winsorize_tail": tail, "winsorize_columns": winsor_cols},
        )
        click.echo(f"panel rows: {len(merged)}")
    except Exception as exc:  # noqa: BLE001
        _fail("panel", exc)


@main.command()
@_config_opt
@_out_opt
@click.option("--panel", "panel_path", default=None, help="Panel CSV.")
@click.option("--specs", "specs_path", default=None, help="Regression spec JSON file.")
def regress(config_path, out, panel_path, specs_path):
    """Estimate every regression spec and emit CSV + text tables."""
    try:
        config = _load_config(config_path)
        out_dir = _out_dir(config, out)
        panel_p = Path(panel_path or config.get("paths", {}).get("panel", out_dir / "panel.csv"))
        spec_files = [specs_path] if specs_path else config.get("regression_specs", [])
        if not spec_files:
            raise ConfigError("no regression spec files given")
        for spec_file in spec_files:
            if not Path(spec_file).exists():
                raise ConfigError(f"spec file not found: {spec_file}")
        data = pd.read_csv(panel_p)
        all_results = []
        for spec_file in spec_files:
            specs = econometrics.load_specs(Path(spec_file))
            all_results.extend(econometrics.run_table(specs, data))
        econometrics.results_to_csv(all_results, out_dir / "regressions.csv")
        with open(out_dir / "regressions.txt", "w", encoding="utf-8") as fh:
            fh.write(econometrics.format_table(all_results))
        _write_manifest(
            out_dir, "regress", [panel_p] + [Path(f) for f in spec_files],
            {"n_specs": len(all_results)},
        )
        n_failed = sum(isinstance(r, Exception) for r in all_results)
        click.echo(f"estimated {len(all_results) - n_failed}/{len(all_results)} specifications")
    except Exception as exc:  # noqa: BLE001
        _fail("regress", exc)


@main.command("events")
@_config_opt
@_out_opt
@click.option("--returns", "returns_path", default=None, help="Daily return CSV (firm_id,date,ret).")
@click.option("--factors", "factors_path", default=None, help="Daily factor CSV.")
@click.option("--calls", "calls_path", default=None, help="Call metadata CSV with call_date.")
def events_cmd(config_path, out, returns_path, factors_path, calls_path):
    """Compute event-window CARs for every call."""
    try:
        config = _load_config(config_path)
        out_dir = _out_dir(config, out)
        paths = config.get("paths", {})
        returns_p = Path(returns_path or paths["returns"])
        factors_p = Path(factors_path or paths["factors"])
        calls_p = Path(calls_path or paths.get("calls", out_dir / "calls.csv"))
        returns = pd.read_csv(returns_p, parse_dates=["date"])
        factors = pd.read_csv(factors_p, parse_dates=["date"])
        calls = pd.read_csv(calls_p)
        rows = []
        for rec in calls.itertuples():
            stock = returns[returns["firm_id"] == rec.firm_id]
            row = {"call_id": rec.call_id}
            try:
                loadings = events.estimate_betas(stock, factors, rec.call_date)
                for w in (1, 3, 5):
                    row[f"car_0_{w}"] = events.car(stock, factors, loadings, rec.call_date, w)
            except events.EventError as exc:
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
        pd.DataFrame(rows).to_csv(out_dir / "events.csv", index=False)
        _write_manifest(out_dir, "events", [returns_p, factors_p, calls_p], {})
        click.echo(f"computed events for {len(rows)} calls")
    except Exception as exc:  # noqa: BLE001
        _fail("events", exc)


@main.command()
@_config_opt
@_out_opt
@click.option("--seed", default=None, type=int)
@click.option("--n-firms", default=500, type=int)
@click.option("--n-quarters", default=40, type=int)
def simulate(config_path, out, seed, n_firms, n_quarters):
    """Generate a planted-coefficient synthetic panel."""
    try:
        config = _load_config(config_path)
        out_dir = _out_dir(config, out)
        sim = config.get("simulate", {})
        seed = seed if seed is not None else int(config.get("seed", 0))
        data, truth = qmodel.simulate_panel(
            n_firms=n_firms, n_quarters=n_quarters, seed=seed, **sim
        )
        data.to_csv(out_dir / "panel.csv", index=False)
        truth.to_json(out_dir / "planted_truth.json")
        _write_manifest(out_dir, "simulate", [], {"seed": seed, "n_firms": n_firms,
                                                 "n_quarters": n_quarters, **sim})
        click.echo(f"simulated {len(data)} firm-quarters")
    except Exception as exc:  # noqa: BLE001
        _fail("simulate", exc)


@main.command("verify-model")
@_config_opt
@_out_opt
def verify_model(config_path, out):
    """Run the proposition monotonicity checks on the shipped parameter grid."""
    try:
        config = _load_config(config_path)
        out_dir = _out_dir(config, out)
        grid = qmodel.default_param_grid()
        q_m_grid = np.linspace(-0.2, 0.2, int(config.get("q_m_points", 101)))
        reports = qmodel.verify_propositions(grid, q_m_grid)
        lines = []
        n_pass = 0
        for params, rep in zip(grid, reports):
            status = "PASS" if rep.all_pass else "FAIL"
            n_pass += rep.all_pass
            lines.append(
                f"{status} c1={params.c1} c2={params.c2} delta={params.delta}: "
                f"investment={'ok' if rep.investment_monotone else 'VIOLATED'} "
                f"short_return={'ok' if rep.short_return_monotone else 'VIOLATED'} "
                f"expected_return={'ok' if rep.expected_return_monotone else 'VIOLATED'}"
            )
        summary = f"{n_pass}/{len(grid)} parameter sets pass all 3 propositions"
        lines.append(summary)
        (out_dir / "model_verification.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        _write_manifest(out_dir, "verify-model", [], {"q_m_points": len(q_m_grid)})
        click.echo(summary)
        if n_pass != len(grid):
            sys.exit(1)
    except Exception as exc:  # noqa: BLE001
        _fail("verify-model", exc)


@main.command()
@_config_opt
@_out_opt
@click.option("--regressions", "regressions_path", default=None, help="Regression CSV.")
def report(config_path, out, regressions_path):
    """Re-emit the regression results as an aligned text table."""
    try:
        config = _load_config(config_path)
        out_dir = _out_dir(config, out)
        path = Path(regressions_path or out_dir / "regressions.csv")
        df = pd.read_csv(path)
        lines = []
        for col, group in df.groupby("column"):
            label = group["label"].iloc[0] if "label" in group else ""
            lines.append(f"-- column ({col}) {label}")
            for rec in group.itertuples():
                lines.append(
                    f"  {rec.term:<28}{rec.coef:>12.4g}{rec.stars:<4}(t={rec.t:.2f})"
                )
            n_obs = group["n_obs"].iloc[0]
            r2 = group["r_squared"].iloc[0]
            lines.append(f"  {'N':<28}{int(n_obs):>12}")
            if not np.isnan(r2):
                lines.append(f"  {'R-squared':<28}{r2:>12.3f}")
        text = "\n".join(lines) + "\n"
        (out_dir / "report.txt").write_text(text, encoding="utf-8")
        _write_manifest(out_dir, "report", [path], {})
        click.echo(text)
    except Exception as exc:  # noqa: BLE001
        _fail("report", exc)


if __name__ == "__main__":
    main()
