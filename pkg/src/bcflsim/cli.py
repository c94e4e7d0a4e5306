"""Command-line entry point: generate data, run scenarios, emit tables and traces.

Commands::

    bcfl-sim generate --config cfg.json --out data/
    bcfl-sim run --config cfg.json --mode mcgp --malicious 1 --out results/
    bcfl-sim suite --config cfg.json --out results/
    bcfl-sim trace --config cfg.json --patient 23 --method mcgp --last 1000 --out trace.csv

Exit codes: 0 success, 2 quorum abort (partial bundle written), 64 usage or
config error. All outputs are deterministic functions of (config, seeds).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .chain import events_to_jsonl
from .config import ConfigError, ScenarioConfig, apply_seed_overrides, dump_config, load_config
from .data import generate_malicious_series, generate_patient, series_to_csv
from .learners import Predictor, predict_batch
from .scenarios import (
    MALICIOUS_PATIENT_BASE,
    RunResult,
    SuiteResult,
    build_world,
    run_central,
    run_fedavg_scenario,
    run_mcgp,
    run_mode,
    run_single,
    run_suite,
)
from .seeding import derive_seed

EXIT_OK = 0
EXIT_QUORUM = 2
EXIT_USAGE = 64

TRACE_METHODS = (
    "h1single", "h2single", "h3single", "h4single", "h5single",
    "h6single", "h7single", "h8single", "h9single",
    "central", "central_mal", "fedavg", "fedavg_mal", "mcgp", "mcgp_mal",
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit(2); the CLI reserves 2 for quorum
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="bcfl-sim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON config path (defaults apply if omitted)")
        p.add_argument("--seed-override", action="append", default=[], metavar="NAME=VALUE",
                       help="override one of the data/init/train/chain seeds; repeatable")

    g = sub.add_parser("generate", help="write per-patient CSV series and a manifest")
    common(g)
    g.add_argument("--out", type=Path, required=True)

    r = sub.add_parser("run", help="run one scenario and write a report bundle")
    common(r)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--mode", choices=("single", "central", "fedavg", "mcgp"), default=None)
    r.add_argument("--hospital", type=int, default=None, help="hospital index for single mode")
    r.add_argument("--malicious", type=int, choices=(0, 1), default=None)

    s = sub.add_parser("suite", help="run every method on one world and write comparison CSVs")
    common(s)
    s.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("trace", help="write ground truth vs per-method predictions for one patient")
    common(t)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--patient", type=int, required=True)
    t.add_argument("--method", action="append", default=None, choices=TRACE_METHODS,
                   help="method to trace; repeatable (default: mcgp)")
    t.add_argument("--last", type=int, default=1000, help="number of trailing test points")
    return parser


def _load(args) -> ScenarioConfig:
    cfg = load_config(args.config)
    return apply_seed_overrides(cfg, args.seed_override)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def cmd_generate(cfg: ScenarioConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for pid in cfg.current_patient_ids + cfg.unseen_patient_ids:
        name = f"patient_{pid:03d}.csv"
        series_to_csv(generate_patient(pid, cfg.days, cfg.seeds.data), out / name)
        files.append(name)
    if cfg.malicious_hospitals:
        for i in range(1, cfg.patients_per_hospital + 1):
            pid = MALICIOUS_PATIENT_BASE + i
            name = f"malicious_{pid:03d}.csv"
            series = generate_malicious_series(
                cfg.days, seed=derive_seed("malicious", cfg.seeds.data, i), patient_id=pid
            )
            series_to_csv(series, out / name)
            files.append(name)
    manifest = {"config": cfg.to_dict(), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(files)} series to {out}")
    return EXIT_OK


def _write_bundle(cfg: ScenarioConfig, result: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(dump_config(cfg))
    rows = []
    unseen = set(cfg.unseen_patient_ids)
    for pid in sorted(result.per_patient):
        m = result.per_patient[pid]
        rows.append(
            [
                result.method,
                pid,
                "unseen" if pid in unseen else "current",
                _fmt(result.seen[pid]),
                _fmt(m.rmse),
                _fmt(m.mard),
                m.n,
            ]
        )
    _write_csv(out / "metrics.csv", ["method", "patient_id", "cohort", "seen", "rmse", "mard", "n"], rows)
    if result.round_val_losses:
        _write_csv(
            out / "rounds.csv",
            ["round", "val_loss"],
            [[i + 1, _fmt(v)] for i, v in enumerate(result.round_val_losses)],
        )
    if result.events:
        (out / "events.jsonl").write_text(events_to_jsonl(result.events))


def cmd_run(cfg: ScenarioConfig, out: Path) -> int:
    result = run_mode(cfg)
    _write_bundle(cfg, result, out)
    if result.aborted:
        print("quorum lost: partial bundle written", file=sys.stderr)
        return EXIT_QUORUM
    print(f"{result.method}: bundle written to {out}")
    return EXIT_OK


def cmd_suite(cfg: ScenarioConfig, out: Path) -> int:
    suite = run_suite(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(dump_config(cfg))
    _write_csv(
        out / "suite_patients.csv",
        ["method", "patient_id", "seen", "rmse", "mard"],
        [
            [r["method"], r["patient_id"], _fmt(r["seen"]), _fmt(r["rmse"]), _fmt(r["mard"])]
            for r in suite.patient_rows()
        ],
    )
    _write_csv(
        out / "suite_summary.csv",
        ["method", "avg_rmse", "avg_mard", "delta_avg_rmse", "delta_avg_mard", "cohort"],
        [
            [
                r["method"],
                _fmt(r["avg_rmse"]),
                _fmt(r["avg_mard"]),
                _fmt(r["delta_avg_rmse"]),
                _fmt(r["delta_avg_mard"]),
                r["cohort"],
            ]
            for r in suite.summary_rows()
        ],
    )
    for res in suite.results:
        if res.events:
            slug = res.method.lower().replace(" ", "_").replace("/", "")
            (out / f"events_{slug}.jsonl").write_text(events_to_jsonl(res.events))
    print(f"suite written to {out}")
    return EXIT_OK


def _trace_result(token: str, cfg: ScenarioConfig, world) -> RunResult:
    if token.endswith("single"):
        return run_single(cfg, world, int(token[1:-6]))
    mal = token.endswith("_mal")
    base = token[:-4] if mal else token
    if mal and not cfg.malicious_hospitals:
        raise ConfigError(f"method {token!r} needs malicious_hospitals=1 in the config")
    if base == "central":
        return run_central(cfg, world, include_malicious=mal)
    if base == "fedavg":
        return run_fedavg_scenario(cfg, world, include_malicious=mal)
    return run_mcgp(cfg, world, include_malicious=mal)


def cmd_trace(cfg: ScenarioConfig, out: Path, patient: int, methods: list[str], last: int) -> int:
    eval_ids = set(cfg.selected_patients) | set(cfg.unseen_patient_ids)
    if patient not in eval_ids:
        cfg = replace(cfg, selected_patients=tuple(sorted(set(cfg.selected_patients) | {patient})))
    world = build_world(cfg)
    ev = world.eval_sets[patient]

    n = len(ev.y)
    if last > n:
        print(f"warning: only {n} test points available, requested {last}", file=sys.stderr)
        last = n
    results = [_trace_result(tok, cfg, world) for tok in methods]
    preds = [predict_batch(Predictor(res.params, *ev.target_scale), ev.X) for res in results]
    rows = []
    for i in range(n - last, n):
        rows.append(
            [int(ev.target_steps[i]), _fmt(float(ev.y[i]))] + [_fmt(float(p[i])) for p in preds]
        )
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, ["step", "ground_truth"] + methods, rows)
    print(f"trace for patient {patient} written to {out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = _load(args)
        if args.command == "run":
            over = {}
            if args.mode is not None:
                over["mode"] = args.mode
            if args.hospital is not None:
                over["hospital"] = args.hospital
            if args.malicious is not None:
                over["malicious_hospitals"] = args.malicious
            if over:
                cfg = replace(cfg, **over)
            return cmd_run(cfg, args.out)
        if args.command == "generate":
            return cmd_generate(cfg, args.out)
        if args.command == "suite":
            return cmd_suite(cfg, args.out)
        methods = args.method or ["mcgp"]
        return cmd_trace(cfg, args.out, args.patient, methods, args.last)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
