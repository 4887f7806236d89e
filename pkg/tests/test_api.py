import json

import pytest
from fastapi.testclient import TestClient

from bgldown.main import app

SCENARIO = {"coarse_ncols": 4, "coarse_nrows": 3, "factor": 3, "train_years": 3, "holdout_years": 1, "nstoch": 2}


@pytest.fixture
def client():
    return TestClient(app)


@pytest.fixture
def scenario_config(tmp_path):
    path = tmp_path / "simulate.json"
    path.write_text(json.dumps({"scenario": SCENARIO, "output_dir": "scenario"}))
    return path


def test_full_run_over_http(client, scenario_config):
    response = client.post("/api/pipeline/simulate", json={"config": str(scenario_config), "seed": 5})
    assert response.status_code == 200
    config = response.json()["files"]["config"]

    response = client.post("/api/pipeline/fit", json={"config": config})
    assert response.status_code == 200
    assert len(response.json()["seasons"]) == 4
    assert response.json()["problems"] == []

    response = client.post("/api/pipeline/predict", json={"config": config, "months": ["2003-01", "2003-06"]})
    assert response.status_code == 200
    assert len(response.json()["files"]) == 4

    response = client.post("/api/pipeline/validate", json={"config": config})
    assert response.status_code == 200
    body = response.json()
    assert {row["method"] for row in body["rows"]} == {"GCM", "Standard", "BGL"}
    overall = {row["method"]: row for row in body["rows"] if row["season"] == "overall"}
    assert overall["Standard"]["pct_reduction_vs_Standard"] == 0.0
    assert overall["BGL"]["pct_reduction_vs_GCM"] is not None
    assert "BGL_over_Standard" in body["ratio_maps"]


def test_predict_before_fit_is_not_found(client, scenario_config):
    config = client.post("/api/pipeline/simulate", json={"config": str(scenario_config)}).json()["files"]["config"]
    response = client.post("/api/pipeline/predict", json={"config": config})
    assert response.status_code == 404
    assert response.json()["detail"].startswith("ModelMissing")


def test_bad_config_is_client_error(client, tmp_path):
    response = client.post("/api/pipeline/fit", json={"config": str(tmp_path / "missing.json")})
    assert response.status_code == 400
    assert "ConfigError" in response.json()["detail"]

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train_end": "2000-13"}))
    response = client.post("/api/pipeline/fit", json={"config": str(bad)})
    assert response.status_code == 400


def test_bad_month_is_client_error(client, scenario_config):
    config = client.post("/api/pipeline/simulate", json={"config": str(scenario_config)}).json()["files"]["config"]
    response = client.post("/api/pipeline/predict", json={"config": config, "months": ["2003/01"]})
    assert response.status_code == 400


def test_seed_only_accepted_where_used(client, scenario_config):
    config = client.post("/api/pipeline/simulate", json={"config": str(scenario_config)}).json()["files"]["config"]
    assert client.post("/api/pipeline/fit", json={"config": config, "seed": 9}).status_code == 200
    assert client.post("/api/pipeline/predict", json={"config": config, "seed": 9}).status_code == 422
