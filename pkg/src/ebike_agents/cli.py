"""Command-line entry point: ``ebike-agents {extract,fit,evaluate,report,all,simulate}``.

Exit status is 0 when the command's outputs were fully written, 1 for data
problems (unreadable or inconsistent inputs, unidentifiable models) and 2
for configuration problems (missing credentials, bad flags, bad rules file).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from collections import Counter
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .agents import LLMBackend, RuleBackend, run_pipeline
from .codebook import FULL_FIELDS, PREDICTOR_FIELDS, RESTRICTED_FIELDS, PredictorEncoder, build_predictor_vector
from .exceptions import ConfigurationError, EbikeAgentsError, IdentifiabilityError, RecordExcluded, SchemaError
from .inference import lr_test
from .ingest import filter_for_model, load_reports, read_structured, write_rejects, write_structured
from .llm_gateway import DEFAULT_MODEL, LLMGateway, ResponseCache, RetryPolicy, cache_stats
from .metrics import class_metrics, render_table, report_json, tally
from .ordlogit import ModelData, fit_ordered_logit, sample_ordered_logit
from .records import Component, StructuredIncident
from .report import build_tables, emit_report
from .rules import load_rules

logger = logging.getLogger("ebike_agents")

EXIT_OK, EXIT_DATA, EXIT_CONFIG = 0, 1, 2
STRUCTURED = "structured.jsonl"


class DataError(EbikeAgentsError):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _structured_path(args) -> Path:
    if args.input:
        return Path(args.input)
    return Path(args.out) / STRUCTURED


def _write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------- extract

def _backend(args, transport=None):
    rules = load_rules(args.rules)
    if args.backend == "rules":
        return RuleBackend(rules), None
    cache_path = Path(args.cache) if args.cache else Path(args.out) / "llm_cache.jsonl"
    policy = RetryPolicy(max_in_flight=args.jobs, requests_per_minute=args.rpm)
    gateway = LLMGateway.from_env(cache=ResponseCache(cache_path), policy=policy, transport=transport)
    return LLMBackend(gateway, args.model, prompt_dir=args.prompts, rules=rules), gateway


def cmd_extract(args, transport=None) -> int:
    if not args.input:
        raise ConfigurationError("extract needs --input")
    backend, gateway = _backend(args, transport)
    loaded = load_reports(args.input)
    out = _out_dir(args)
    records, summary = run_pipeline(loaded.reports, backend, jobs=args.jobs, rules=backend.rules)
    write_structured(records, out / STRUCTURED)
    if loaded.rejects:
        write_rejects(loaded.rejects, out / "rejects.csv")
    _, filtered = filter_for_model(records, args.drop_unspecified_gender)
    payload = {"run": summary.to_dict(), "rejected_rows": len(loaded.rejects),
               "model_filter": asdict(filtered)}
    _write_json(out / "run_summary.json", payload)
    print(f"extract: {summary} rejected_rows={len(loaded.rejects)}")
    if gateway is not None:
        stats = cache_stats(gateway.cache)
        print(f"cache: entries={stats.entries} hits={stats.hits} misses={stats.misses}")
    print(f"wrote {out / STRUCTURED}")
    return EXIT_OK


# ----------------------------------------------------------------- fit

def admitted_records(records, rules, drop_unspecified_gender=False):
    """Records usable for modeling and a count of exclusion reasons."""
    candidates = [r for r in records if r.is_ebike == "yes" and r.status == "ok"]
    candidates, _ = filter_for_model(candidates, drop_unspecified_gender)
    kept, vectors, reasons = [], [], Counter()
    for r in candidates:
        try:
            vectors.append(build_predictor_vector(r, rules))
        except RecordExcluded as exc:
            reasons[str(exc).split(":")[0]] += 1
            continue
        kept.append(r)
    return kept, vectors, reasons


def fit_models(records, rules, dummy_coding=False, drop_unspecified_gender=False, alpha=0.05):
    """Fit the restricted and full models; returns ``(fits, lr, notes)``."""
    kept, vectors, reasons = admitted_records(records, rules, drop_unspecified_gender)
    notes = [f"admitted {len(kept)} records"]
    notes += [f"excluded {n}: {why}" for why, n in sorted(reasons.items())]
    if not kept:
        raise IdentifiabilityError("no records admissible for modeling")
    severities = np.array([r.severity_code for r in kept])
    levels = np.unique(severities)
    if len(levels) < 2:
        raise IdentifiabilityError(f"all admitted records share severity level {levels[0]}; "
                                   "thresholds are not identifiable")
    if not np.array_equal(levels, np.arange(levels[0], levels[0] + len(levels))):
        notes.append(f"observed severity levels {levels.tolist()} renumbered 1..{len(levels)}")
    y = np.searchsorted(levels, severities) + 1
    if dummy_coding:
        notes.append("categorical predictors dummy coded against base levels "
                     "(gender Female, cause type Equipment-related, conditions Favorable, age Children)")
    X = np.array([v.as_tuple() for v in vectors], dtype=float)

    fits = {}
    for name, columns in (("full", FULL_FIELDS), ("restricted", RESTRICTED_FIELDS)):
        enc = PredictorEncoder(columns=columns, dummy_coding=dummy_coding).fit(X)
        Z = enc.transform(X)
        keep = Z.std(axis=0) > 0
        dropped = [n for n, k in zip(enc.get_feature_names_out(), keep) if not k]
        if dropped:
            notes.append(f"{name}: constant predictor(s) {dropped} dropped")
        names = tuple(str(n) for n, k in zip(enc.get_feature_names_out(), keep) if k)
        data = ModelData(Z[:, keep], y, K=len(levels), feature_names=names)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fits[name] = fit_ordered_logit(data)
    lr = lr_test(fits["restricted"], fits["full"], alpha)
    return fits, lr, notes


def _load_structured(args):
    path = _structured_path(args)
    try:
        return read_structured(path)
    except FileNotFoundError as exc:
        raise DataError(f"structured file not found: {path}") from exc


def cmd_fit(args, transport=None) -> int:
    records = _load_structured(args)
    rules = load_rules(args.rules)
    fits, lr, notes = fit_models(records, rules, args.dummy_coding,
                                 args.drop_unspecified_gender, args.alpha)
    out = _out_dir(args)
    emit_report([], out, fits=fits, lr=lr, notes=notes)
    print((out / "fit_report.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


# ------------------------------------------------------------ evaluate

def read_truth(path):
    """Ground-truth causal components: CSV with ``record_id,component``.

    A row with an empty component marks a record with no causal component.
    """
    truth: dict[str, set] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"record_id", "component"} <= set(reader.fieldnames):
            raise SchemaError(f"{path}: truth file needs columns record_id,component")
        for lineno, row in enumerate(reader, start=2):
            rid = (row["record_id"] or "").strip()
            if not rid:
                raise SchemaError(f"{path}:{lineno}: empty record_id")
            items = truth.setdefault(rid, set())
            name = (row["component"] or "").strip()
            if name:
                try:
                    items.add(Component.parse(name))
                except ValueError as exc:
                    raise SchemaError(f"{path}:{lineno}: {exc}") from None
    if not truth:
        raise DataError(f"{path}: truth file has no records")
    return truth


def evaluate(records, truth):
    predictions = {r.record_id: {Component.parse(c) for c in r.components_caused}
                   for r in records if r.is_ebike == "yes"}
    counts = tally(predictions, truth, list(Component))
    per_class = class_metrics({c.display_name: n for c, n in counts.items()})
    return per_class


def cmd_evaluate(args, transport=None) -> int:
    if not args.truth:
        raise ConfigurationError("evaluate needs --truth")
    truth = read_truth(args.truth)
    records = _load_structured(args)
    try:
        per_class = evaluate(records, truth)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = _out_dir(args)
    text = render_table(per_class)
    (out / "evaluation.txt").write_text(text, encoding="utf-8")
    (out / "evaluation.json").write_text(report_json(per_class), encoding="utf-8")
    print(text, end="")
    return EXIT_OK


# -------------------------------------------------------------- report

def cmd_report(args, transport=None) -> int:
    records = _load_structured(args)
    rules = load_rules(args.rules)
    notes = []
    fits = lr = None
    try:
        fits, lr, notes = fit_models(records, rules, args.dummy_coding,
                                     args.drop_unspecified_gender, args.alpha)
    except IdentifiabilityError as exc:
        print(f"report: model not fitted: {exc}", file=sys.stderr)
    out = _out_dir(args)
    manifest = emit_report(build_tables(records), out, fits=fits, lr=lr, notes=notes)
    print(f"report: wrote {len(manifest['files'])} files to {out}")
    return EXIT_OK


def cmd_all(args, transport=None) -> int:
    cmd_extract(args, transport)
    args.input = None  # later stages read the structured output
    cmd_report(args, transport)
    if args.truth:
        cmd_evaluate(args, transport)
    return EXIT_OK


# ------------------------------------------------------------ simulate

SIM_THETA = (-1.0, 0.5, 2.0)
SIM_BETA = {"age_cat": 0.3, "gender": 0.5, "cause_type_code": -0.6, "weather": -0.8,
            "road": 0.4, "time": -0.5, "modes_count": 0.2}


def simulate_records(n: int, seed: int):
    """Synthetic coded records with severities drawn from a known model."""
    rng = np.random.default_rng(seed)
    ages = rng.integers(5, 90, size=n)
    genders = rng.choice(["Female", "Male"], size=n)
    cause = rng.choice(["HumanRelated", "EquipmentRelated", "Both"], size=n, p=[0.48, 0.48, 0.04])
    weather = rng.choice(["clear", "rainy"], size=n, p=[0.8, 0.2])
    road = rng.choice(["dry", "wet"], size=n, p=[0.85, 0.15])
    time = rng.choice(["morning", "night"], size=n, p=[0.7, 0.3])
    modes = rng.integers(1, 4, size=n)
    records = []
    for i in range(n):
        records.append(StructuredIncident(
            record_id=f"S{i:05d}", is_ebike="yes", modes_count=int(modes[i]),
            modes=["electric bicycle"] + ["car", "truck"][: int(modes[i]) - 1],
            time_raw=str(time[i]), weather_raw=str(weather[i]), road_raw=str(road[i]),
            cause_type=str(cause[i]), age_years=int(ages[i]), gender_raw=str(genders[i]),
            severity_code=1,  # placeholder until the outcome is drawn below
        ))
    vectors = [build_predictor_vector(r) for r in records]
    X = np.array([v.as_tuple() for v in vectors], dtype=float)
    beta = np.array([SIM_BETA[f] for f in PREDICTOR_FIELDS])
    y = sample_ordered_logit(np.array(SIM_THETA), beta, X, rng)
    for r, v, sev in zip(records, vectors, y):
        r.severity_code = int(sev)
        r.predictors = v.to_dict()
    return records


def cmd_simulate(args, transport=None) -> int:
    out = _out_dir(args)
    records = simulate_records(args.n, args.seed)
    write_structured(records, out / STRUCTURED)
    _write_json(out / "simulation.json", {"seed": args.seed, "n": args.n,
                                          "theta": list(SIM_THETA), "beta": SIM_BETA})
    print(f"simulate: wrote {len(records)} records to {out / STRUCTURED}")
    return EXIT_OK


# ---------------------------------------------------------------- main

COMMANDS = {"extract": cmd_extract, "fit": cmd_fit, "evaluate": cmd_evaluate,
            "report": cmd_report, "all": cmd_all, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", help="raw reports (extract/all) or structured JSONL")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--backend", choices=("rules", "llm"), default="rules")
    common.add_argument("--model", default=DEFAULT_MODEL, help="LLM model name")
    common.add_argument("--cache", help="LLM response cache (default: OUT/llm_cache.jsonl)")
    common.add_argument("--rules", help="rules.toml overriding the packaged vocabulary")
    common.add_argument("--prompts", help="directory overriding the packaged prompt templates")
    common.add_argument("--jobs", type=int, default=4, help="worker threads for extraction")
    common.add_argument("--rpm", type=float, default=60.0, help="LLM requests per minute")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--n", type=int, default=1000, help="records to simulate")
    common.add_argument("--drop-unspecified-gender", action="store_true")
    common.add_argument("--dummy-coding", action="store_true")
    common.add_argument("--truth", help="ground-truth CSV with record_id,component")
    common.add_argument("--alpha", type=float, default=0.05)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ebike-agents", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "extract": "classify and extract narratives into structured JSONL",
        "fit": "fit restricted and full ordered logit models with an LR test",
        "evaluate": "score extracted causal components against ground truth",
        "report": "write aggregate tables, charts and the fit report",
        "all": "extract, then report (and evaluate when --truth is given)",
        "simulate": "write a synthetic structured corpus from a known model",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv=None, transport=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1 or args.rpm <= 0 or not 0 < args.alpha < 1:
        print("error: --jobs must be >= 1, --rpm > 0 and 0 < --alpha < 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, transport)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError, IdentifiabilityError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
