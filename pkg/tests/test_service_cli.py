import json

import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from bftkit.cli import sim
from bftkit.harness import common_scenario, scenario_drop_commits
from bftkit.service import create_app


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200 and r.json() == {"ok": True}


def test_run_endpoint_common_case(client):
    r = client.post("/run", json={"scenario": {"f": 1, "seed": 3}, "include_trace": True})
    assert r.status_code == 200
    data = r.json()
    assert data["ok"] is True
    assert data["trial"]["terminate_view"] == 0
    assert data["trial"]["value"] == "v:01020304"
    assert data["trace_ndjson"].splitlines()
    assert all(c["ok"] for c in data["checks"].values())


def test_run_endpoint_without_trace(client):
    r = client.post("/run", json={"scenario": {"f": 1, "seed": 3}, "include_trace": False})
    assert r.status_code == 200 and r.json()["trace_ndjson"] is None


def test_run_endpoint_rejects_bad_horizon(client):
    r = client.post("/run", json={"scenario": {"f": 1, "stabilize_at_ms": 9000, "horizon_ms": 100}})
    assert r.status_code == 422


def test_run_endpoint_validates_schema(client):
    r = client.post("/run", json={"scenario": {"seed": 1}})  # missing f
    assert r.status_code == 422


def test_suite_endpoints(client):
    r = client.post("/suite/common", json={"f": 1, "trials": 2, "seed": 11})
    assert r.status_code == 200
    data = r.json()
    assert data["ok"] and len(data["trials"]) == 2
    assert data["csv"].startswith("scenario,")
    assert "client_latency_ms" in data["aggregates"]

    r = client.post("/suite/failure", json={"f": 2, "seed": 0})
    assert r.status_code == 200
    data = r.json()
    assert data["ok"] and [t["terminate_view"] for t in data["trials"]] == [1, 0, 2, 3]


def test_regressions_endpoint(client):
    r = client.post("/regressions", json={"seed": 0})
    assert r.status_code == 200
    data = r.json()
    assert data["ok"] and data["clean_ok"]
    assert all(b["detected"] for b in data["bugs"].values())


# --- CLI (thin client over the in-process service) ----------------------------


def test_cli_sim_run_writes_trace(tmp_path):
    scen_path = tmp_path / "scenario.json"
    scen_path.write_text(json.dumps(common_scenario(1, 8).to_json()))
    out_path = tmp_path / "trace.ndjson"
    result = CliRunner().invoke(sim, ["run", "--scenario", str(scen_path), "--out", str(out_path)])
    assert result.exit_code == 0, result.output
    report = json.loads(result.output)
    assert report["ok"] and report["trial"]["terminate_view"] == 0
    assert out_path.exists() and out_path.read_text().splitlines()


def test_cli_sim_run_failure_scenario(tmp_path):
    scen_path = tmp_path / "scenario.json"
    scen_path.write_text(json.dumps(scenario_drop_commits(1, 0).to_json()))
    result = CliRunner().invoke(sim, ["run", "--scenario", str(scen_path)])
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)["trial"]["terminate_view"] == 1


def test_cli_sim_suite_csv_and_json(tmp_path):
    csv_path = tmp_path / "out.csv"
    json_path = tmp_path / "out.json"
    result = CliRunner().invoke(
        sim, ["suite", "--f", "1", "--trials", "2", "--seed", "21",
              "--csv", str(csv_path), "--json", str(json_path)])
    assert result.exit_code == 0, result.output
    assert csv_path.read_text().startswith("scenario,")
    assert json.loads(json_path.read_text())["ok"] is True


def test_cli_sim_suite_failure():
    result = CliRunner().invoke(sim, ["suite", "--failure", "--seed", "0"])
    assert result.exit_code == 0, result.output
    data = json.loads(result.output)
    assert [t["terminate_view"] for t in data["trials"]] == [1, 0, 2, 3]


def test_cli_sim_regressions():
    result = CliRunner().invoke(sim, ["regressions", "--seed", "0"])
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)["ok"] is True
