"""Headless entry point.

Subcommands: validate a scenario bundle, print the deployment-planning
report, run a simulation with a scripted operator, start the HTTP
service, and diff the KPI reports of two runs. Machine-readable output
is available everywhere via --json; simulate always prints the KPI
report as canonical JSON so identical invocations produce identical
bytes.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .engine import Engine
from .scenario import (
    ScenarioError,
    canonical_json,
    load_scenario,
    record_run,
    resolve_scenario,
)
from .sim import compute_kpis
from .strategy import answer_six_questions


def _load(name_or_path: str):
    return load_scenario(resolve_scenario(name_or_path))


def _fail(errors: list[str], as_json: bool) -> int:
    if as_json:
        print(canonical_json({"ok": False, "errors": errors}))
    else:
        for line in errors:
            print(f"error: {line}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# validate


def cmd_validate(args) -> int:
    try:
        scenario = _load(args.scenario)
    except ScenarioError as exc:
        return _fail(exc.errors, args.json)
    if args.json:
        print(
            canonical_json(
                {
                    "ok": True,
                    "scenario": scenario.name,
                    "content_hash": scenario.content_hash(),
                }
            )
        )
    else:
        print(f"{scenario.name}: OK ({scenario.content_hash()[:12]})")
    return 0


# ---------------------------------------------------------------------------
# plan


def cmd_plan(args) -> int:
    try:
        scenario = _load(args.scenario)
    except ScenarioError as exc:
        return _fail(exc.errors, args.json)
    report = answer_six_questions(scenario.network, scenario.catalog, scenario.census)
    if args.json:
        print(canonical_json(report.to_dict()))
        return 0

    print(f"deployment plan for {scenario.name}")
    print("\n[1] network elements")
    for kind, count in sorted(report.network_summary.items()):
        if count:
            print(f"    {kind}: {count}")
    print("\n[2] end users in the area")
    for user, count in report.end_user_census.items():
        print(f"    {user}: {count}")
    print("\n[3] recurring problems to manage")
    for problem in report.common_problems:
        print(f"    {problem}")
    print("\n[4] available services by deployment scale")
    for scale, ids in report.available_services.items():
        print(f"    {scale}: {', '.join(ids)}")
    print("\n[5] services usable for active traffic management")
    print(f"    {', '.join(report.operational_services)}")
    print("\n[6] strategy contributions (service: level x applicable elements)")
    for sid, levels in report.contribution_map.items():
        parts = [f"{level} ({len(elems)} elements)" for level, elems in levels.items()]
        print(f"    {sid}: {'; '.join(parts)}")
    return 0


# ---------------------------------------------------------------------------
# simulate


def _read_script(path: Path) -> list[dict]:
    records = []
    errors = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append(f"script line {lineno}: invalid JSON ({exc.msg})")
            continue
        tick = record.get("tick")
        command = record.get("command")
        if not isinstance(tick, int) or tick < 0 or not isinstance(command, dict):
            errors.append(
                f"script line {lineno}: expected {{tick: int >= 0, command: object}}"
            )
            continue
        records.append({"tick": tick, "command": command, "line": lineno})
    if errors:
        raise ScenarioError("; ".join(errors), errors)
    records.sort(key=lambda r: (r["tick"], r["line"]))
    return records


def cmd_simulate(args) -> int:
    try:
        scenario = _load(args.scenario)
        script = _read_script(Path(args.script)) if args.script else []
    except ScenarioError as exc:
        return _fail(exc.errors, args.json)
    except OSError as exc:
        return _fail([f"script: {exc}"], args.json)
    if args.seed is not None:
        scenario.seed = args.seed

    engine = Engine(scenario)
    errors: list[str] = []
    pending = list(script)

    def run_due() -> None:
        while pending and pending[0]["tick"] == engine.state.tick:
            record = pending.pop(0)
            result = engine.execute(record["command"])
            if not result.get("ok"):
                errors.append(
                    f"script line {record['line']} (tick {record['tick']}): "
                    f"{result.get('error')}"
                )

    for _ in range(args.ticks):
        run_due()
        if errors:
            break
        engine.advance(1)
    run_due()
    for record in pending:
        errors.append(
            f"script line {record['line']}: tick {record['tick']} is past the "
            f"run horizon ({args.ticks})"
        )
    if errors:
        return _fail(errors, args.json)

    kpis = engine.kpis()
    if args.out:
        record = record_run(
            Path(args.out), scenario, engine.run_log, kpis, 0, engine.state.tick
        )
        print(f"run {record.run_id}: log at {record.log_path}", file=sys.stderr)
    print(canonical_json(kpis))
    return 0


# ---------------------------------------------------------------------------
# serve


def cmd_serve(args) -> int:
    try:
        scenario = _load(args.scenario)
    except ScenarioError as exc:
        return _fail(exc.errors, args.json)
    host, _, port = args.bind.rpartition(":")
    from .api import serve

    serve(
        Engine(scenario),
        host=host or "127.0.0.1",
        port=int(port),
        runs_store=Path(args.store) if args.store else None,
        rate=args.rate,
        paused=args.paused,
    )
    return 0


# ---------------------------------------------------------------------------
# compare


def _load_kpis(path: Path) -> dict:
    text = path.read_text()
    try:
        document = json.loads(text)
        if isinstance(document, dict) and "event" not in document:
            return document
    except json.JSONDecodeError:
        pass
    records = [json.loads(line) for line in text.splitlines() if line.strip()]
    return compute_kpis(records)


def cmd_compare(args) -> int:
    try:
        first = _load_kpis(Path(args.run_a))
        second = _load_kpis(Path(args.run_b))
    except (OSError, json.JSONDecodeError) as exc:
        return _fail([f"compare: {exc}"], args.json)

    keys = sorted(set(first) | set(second))
    delta = {}
    for key in keys:
        a, b = first.get(key), second.get(key)
        if isinstance(a, (int, float)) and isinstance(b, (int, float)):
            delta[key] = round(b - a, 6)
    if args.json:
        print(canonical_json({"a": first, "b": second, "delta": delta}))
        return 0
    for key in keys:
        a, b = first.get(key), second.get(key)
        if key in delta:
            print(f"{key}: {a} -> {b} ({delta[key]:+g})")
        else:
            print(f"{key}: {canonical_json(a)} -> {canonical_json(b)}")
    return 0


# ---------------------------------------------------------------------------


def _nonneg(value: str) -> int:
    ticks = int(value)
    if ticks < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return ticks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="citsim", description="traffic management engine and simulator"
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("validate", help="check every document of a scenario")
    p.add_argument("scenario", help="bundled scenario name or directory path")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("plan", help="print the deployment-planning report")
    p.add_argument("scenario")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("simulate", help="run headless and print the KPI report")
    p.add_argument("scenario")
    p.add_argument("--script", help="operator script, one {tick, command} per line")
    p.add_argument("--ticks", type=_nonneg, default=600)
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", help="directory that receives the run log and record")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("serve", help="start the HTTP control service")
    p.add_argument("scenario")
    p.add_argument("--bind", default="127.0.0.1:8000")
    p.add_argument("--rate", type=float, default=10.0, help="ticks per second")
    p.add_argument("--paused", action="store_true", help="start paused")
    p.add_argument("--store", help="runs directory exposed at /runs")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("compare", help="print KPI deltas between two runs")
    p.add_argument("run_a", help="KPI report or run log file")
    p.add_argument("run_b")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_compare)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
