"""Scenario loading, content hashing, and the run record store.

A scenario is a plain directory of six JSON documents. Loading
validates all of them and aggregates every failure into one error, so
a broken scenario reports everything wrong at once. Run records append
to an index file next to the stored logs; nothing is ever rewritten.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .bus import BusError, EffectParameters, load_effects
from .catalog import CatalogError, EndUserType, ServiceCatalog, load_catalog
from .network import NetworkError, RoadNetwork, load_network
from .strategy import ResponsePlan, StrategyError, load_plans

SCHEMA_VERSION = 1

DOCUMENT_FILES = (
    "network.json",
    "catalog.json",
    "demand.json",
    "plans.json",
    "effects.json",
    "scenario.json",
)


class ScenarioError(Exception):
    """Carries the individual findings alongside the joined message."""

    def __init__(self, message: str, errors: list[str] | None = None):
        super().__init__(message)
        self.errors = list(errors) if errors is not None else [message]


@dataclass
class Scenario:
    name: str
    description: str
    network: RoadNetwork
    catalog: ServiceCatalog
    demand: dict
    plans: list[ResponsePlan]
    effects: EffectParameters
    census: dict
    seed: int
    dt: float
    scope_hops: int
    preferred_consecutive_ticks: int
    documents: dict[str, dict] = field(default_factory=dict, repr=False)

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for filename in DOCUMENT_FILES:
            digest.update(filename.encode())
            digest.update(b"\x00")
            digest.update(canonical_json(self.documents[filename]).encode())
            digest.update(b"\x00")
        return digest.hexdigest()


def canonical_json(document: object) -> str:
    return json.dumps(document, sort_keys=True, separators=(",", ":"))


def _validate_census(census: dict, errors: list[str]) -> None:
    known = {u.value for u in EndUserType}
    for key, value in census.items():
        if key not in known:
            errors.append(f"census: unknown end-user type {key!r}")
            continue
        count = value.get("count") if isinstance(value, dict) else value
        if not isinstance(count, int) or count < 0:
            errors.append(f"census {key}: count must be a non-negative integer")


def load_scenario(path: str | Path) -> Scenario:
    """Read and cross-validate one scenario directory."""
    root = Path(path)
    errors: list[str] = []
    documents: dict[str, dict] = {}

    if not root.is_dir():
        raise ScenarioError(f"scenario directory {root} does not exist")

    for filename in DOCUMENT_FILES:
        file_path = root / filename
        if not file_path.is_file():
            errors.append(f"missing required file {filename}")
            continue
        try:
            with open(file_path) as fh:
                documents[filename] = json.load(fh)
        except json.JSONDecodeError as exc:
            errors.append(f"{filename}: invalid JSON ({exc.msg} at line {exc.lineno})")

    for filename, document in documents.items():
        if document.get("schema_version") != SCHEMA_VERSION:
            errors.append(
                f"{filename}: unsupported schema_version"
                f" {document.get('schema_version')!r}"
            )

    network = catalog = effects = None
    plans: list[ResponsePlan] = []

    if "network.json" in documents:
        try:
            network = load_network(documents["network.json"])
        except NetworkError as exc:
            errors.append(f"network.json: {exc}")
    if "catalog.json" in documents:
        try:
            catalog = load_catalog(documents["catalog.json"])
        except CatalogError as exc:
            errors.append(f"catalog.json: {exc}")
    if "effects.json" in documents:
        try:
            effects = load_effects(documents["effects.json"])
        except BusError as exc:
            errors.append(f"effects.json: {exc}")
    if "plans.json" in documents and network is not None:
        try:
            plans = load_plans(documents["plans.json"], network)
        except StrategyError as exc:
            errors.append(f"plans.json: {exc}")

    manifest = documents.get("scenario.json", {})
    census = manifest.get("census", {})
    _validate_census(census, errors)

    demand = documents.get("demand.json", {})
    if network is not None:
        links = network.links
        for incident in demand.get("incidents", []):
            if incident.get("link") not in links:
                errors.append(
                    f"demand.json: incident {incident.get('id')!r} references"
                    f" unknown link {incident.get('link')!r}"
                )
        nodes = network.nodes
        for i, entry in enumerate(demand.get("entries", [])):
            for endpoint in ("origin", "destination"):
                if entry.get(endpoint) not in nodes:
                    errors.append(
                        f"demand.json: entry {i} references unknown node"
                        f" {entry.get(endpoint)!r}"
                    )
        for entry in demand.get("entries", []):
            user = entry.get("user_type")
            if user is not None and user not in {u.value for u in EndUserType}:
                errors.append(f"demand.json: unknown end-user type {user!r}")

    if errors:
        raise ScenarioError("; ".join(errors), errors)
    assert network is not None and catalog is not None and effects is not None

    return Scenario(
        name=manifest.get("name", root.name),
        description=manifest.get("description", ""),
        network=network,
        catalog=catalog,
        demand=demand,
        plans=plans,
        effects=effects,
        census=census,
        seed=int(manifest.get("seed", 0)),
        dt=float(manifest.get("dt", 10.0)),
        scope_hops=int(manifest.get("scope_hops", 2)),
        preferred_consecutive_ticks=int(manifest.get("preferred_consecutive_ticks", 6)),
        documents=documents,
    )


def serialize_scenario(scenario: Scenario, path: str | Path) -> None:
    """Write the scenario back out as a loadable directory."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for filename in DOCUMENT_FILES:
        with open(root / filename, "w") as fh:
            json.dump(scenario.documents[filename], fh, indent=2, sort_keys=True)
            fh.write("\n")


def builtin_scenario_path(name: str) -> Path:
    return Path(__file__).resolve().parent / "data" / "scenarios" / name


def resolve_scenario(name_or_path: str | Path) -> Path:
    """Accept either a bundled scenario name or a directory path."""
    direct = Path(name_or_path)
    if direct.is_dir():
        return direct
    bundled = builtin_scenario_path(str(name_or_path))
    if bundled.is_dir():
        return bundled
    raise ScenarioError(f"no scenario named {name_or_path!r}")


# ---------------------------------------------------------------------------
# Run records


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    scenario_name: str
    content_hash: str
    seed: int
    start_tick: int
    end_tick: int
    log_path: str
    kpis: dict

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "scenario_name": self.scenario_name,
            "content_hash": self.content_hash,
            "seed": self.seed,
            "start_tick": self.start_tick,
            "end_tick": self.end_tick,
            "log_path": self.log_path,
            "kpis": self.kpis,
        }


def write_run_log(log: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for record in log:
            fh.write(canonical_json(record))
            fh.write("\n")


def read_run_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def record_run(
    store: str | Path,
    scenario: Scenario,
    log: list[dict],
    kpis: dict,
    start_tick: int,
    end_tick: int,
) -> RunRecord:
    """Persist one run: log file plus an entry in the append-only index."""
    root = Path(store)
    root.mkdir(parents=True, exist_ok=True)
    index = root / "index.jsonl"
    existing = len(list_runs(root))
    run_id = f"run:{existing:04d}"
    log_name = f"{run_id.replace(':', '_')}.log.jsonl"
    write_run_log(log, root / log_name)
    record = RunRecord(
        run_id=run_id,
        scenario_name=scenario.name,
        content_hash=scenario.content_hash(),
        seed=scenario.seed,
        start_tick=start_tick,
        end_tick=end_tick,
        log_path=log_name,
        kpis=kpis,
    )
    with open(index, "a") as fh:
        fh.write(canonical_json(record.to_dict()))
        fh.write("\n")
    return record


def list_runs(store: str | Path) -> list[RunRecord]:
    index = Path(store) / "index.jsonl"
    if not index.is_file():
        return []
    records = []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        data = json.loads(line)
        records.append(RunRecord(**data))
    return records
