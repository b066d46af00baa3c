"""Scenario directory loading, hashing, and the run record store."""

import json
import shutil

import pytest

from citsim.catalog import EndUserType
from citsim.scenario import (
    RunRecord,
    ScenarioError,
    builtin_scenario_path,
    list_runs,
    load_scenario,
    read_run_log,
    record_run,
    resolve_scenario,
    serialize_scenario,
    write_run_log,
)


def copy_scenario(tmp_path, name="diamond"):
    dest = tmp_path / name
    shutil.copytree(builtin_scenario_path(name), dest)
    return dest


def patch_json(path, mutate):
    with open(path) as fh:
        document = json.load(fh)
    mutate(document)
    with open(path, "w") as fh:
        json.dump(document, fh)


# ---------------------------------------------------------------------------
# Loading


def test_bundled_scenarios_load():
    for name in ("diamond", "thessaloniki"):
        scenario = load_scenario(builtin_scenario_path(name))
        assert scenario.name == name
        assert scenario.network.links
        assert scenario.catalog.services
        assert scenario.seed >= 0


def test_thessaloniki_census_matches_manifest():
    scenario = load_scenario(builtin_scenario_path("thessaloniki"))
    assert scenario.census["driver"] == 6500
    assert scenario.census["commercial_fleet"] == 600
    assert scenario.census["vru"] == {"count": 50, "nonnormative": True}
    assert len(scenario.plans) == 1
    assert scenario.plans[0].id == "artery_queue"


def test_unknown_census_type_rejected(tmp_path):
    root = copy_scenario(tmp_path)
    patch_json(root / "scenario.json",
               lambda d: d["census"].update({"cyclists": 200}))
    with pytest.raises(ScenarioError, match="unknown end-user type"):
        load_scenario(root)


def test_missing_file_named_in_aggregate(tmp_path):
    root = copy_scenario(tmp_path)
    (root / "demand.json").unlink()
    with pytest.raises(ScenarioError, match="missing required file demand.json"):
        load_scenario(root)


def test_multiple_failures_aggregate(tmp_path):
    root = copy_scenario(tmp_path)
    (root / "demand.json").unlink()
    patch_json(root / "scenario.json",
               lambda d: d["census"].update({"cyclists": 200}))
    with pytest.raises(ScenarioError) as err:
        load_scenario(root)
    text = str(err.value)
    assert "demand.json" in text
    assert "cyclists" in text


def test_invalid_json_reported_with_filename(tmp_path):
    root = copy_scenario(tmp_path)
    (root / "plans.json").write_text("{not json")
    with pytest.raises(ScenarioError, match="plans.json: invalid JSON"):
        load_scenario(root)


def test_wrong_schema_version_rejected(tmp_path):
    root = copy_scenario(tmp_path)
    patch_json(root / "effects.json",
               lambda d: d.update({"schema_version": 99}))
    with pytest.raises(ScenarioError, match="effects.json: unsupported schema_version"):
        load_scenario(root)


def test_demand_cross_references_validated(tmp_path):
    root = copy_scenario(tmp_path)
    patch_json(
        root / "demand.json",
        lambda d: d["incidents"].append(
            {"id": "inc_x", "link": "L_GHOST", "capacity_factor": 0.5,
             "start_tick": 0, "end_tick": 1}
        ),
    )
    with pytest.raises(ScenarioError, match="unknown link 'L_GHOST'"):
        load_scenario(root)


def test_resolve_scenario_accepts_name_and_path(tmp_path):
    assert resolve_scenario("diamond") == builtin_scenario_path("diamond")
    root = copy_scenario(tmp_path)
    assert resolve_scenario(root) == root
    with pytest.raises(ScenarioError, match="no scenario named"):
        resolve_scenario("atlantis")


def test_census_types_cover_catalog_user_types():
    scenario = load_scenario(builtin_scenario_path("thessaloniki"))
    known = {u.value for u in EndUserType}
    assert set(scenario.census) <= known


# ---------------------------------------------------------------------------
# Round trip and hashing


def test_round_trip_preserves_documents_and_hash(tmp_path):
    original = load_scenario(builtin_scenario_path("thessaloniki"))
    out = tmp_path / "copy"
    serialize_scenario(original, out)
    reloaded = load_scenario(out)
    assert reloaded.documents == original.documents
    assert reloaded.content_hash() == original.content_hash()
    assert reloaded.census == original.census
    assert [p.id for p in reloaded.plans] == [p.id for p in original.plans]


def test_content_hash_tracks_document_changes(tmp_path):
    root = copy_scenario(tmp_path)
    before = load_scenario(root).content_hash()
    patch_json(root / "demand.json",
               lambda d: d["entries"][0].update({"rate": 901}))
    after = load_scenario(root).content_hash()
    assert before != after


def test_content_hash_stable_across_loads():
    a = load_scenario(builtin_scenario_path("diamond")).content_hash()
    b = load_scenario(builtin_scenario_path("diamond")).content_hash()
    assert a == b
    assert len(a) == 64


# ---------------------------------------------------------------------------
# Run records


def test_run_log_round_trip(tmp_path):
    log = [
        {"event": "tick_summary", "tick": 0, "total_queue": 0,
         "max_queue": 0, "created": 1, "completed": 0, "on_network": 1},
        {"event": "agent_completed", "tick": 1, "agent": "ag00000",
         "delay_seconds": 0.0},
    ]
    path = tmp_path / "run.jsonl"
    write_run_log(log, path)
    assert read_run_log(path) == log


def test_record_run_appends_in_order(tmp_path):
    scenario = load_scenario(builtin_scenario_path("diamond"))
    store = tmp_path / "runs"
    kpis = {"total_delay_veh_h": 0.0, "throughput": 0}
    ids = [
        record_run(store, scenario, [], kpis, 0, 10).run_id
        for _ in range(3)
    ]
    assert ids == ["run:0000", "run:0001", "run:0002"]
    records = list_runs(store)
    assert [r.run_id for r in records] == ids
    assert all(isinstance(r, RunRecord) for r in records)
    assert records[0].scenario_name == "diamond"
    assert records[0].kpis == kpis


def test_identical_runs_share_content_hash(tmp_path):
    scenario = load_scenario(builtin_scenario_path("diamond"))
    store = tmp_path / "runs"
    a = record_run(store, scenario, [], {"throughput": 1}, 0, 5)
    b = record_run(store, scenario, [], {"throughput": 1}, 0, 5)
    assert a.content_hash == b.content_hash
    assert a.run_id != b.run_id


def test_list_runs_empty_store(tmp_path):
    assert list_runs(tmp_path / "nowhere") == []
