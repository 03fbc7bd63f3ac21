import time
import warnings

import numpy as np
import pytest

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient

from mopac import __version__
from mopac.bounds import random_scenario
from mopac.service.app import create_app


@pytest.fixture()
def client():
    with TestClient(create_app(), raise_server_exceptions=False) as c:
        yield c


def assert_error(resp, status, kind):
    assert resp.status_code == status
    body = resp.json()
    assert set(body) == {"error"}
    assert body["error"]["type"] == kind
    assert body["error"]["message"]


def test_health(client):
    assert client.get("/health").json() == {"status": "ok", "version": __version__}


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("svc")
    with TestClient(create_app()) as c:
        body = c.post("/runs", json={"config": {"preset": "smoke", "total_epochs": 1}, "seed": 4, "output_dir": str(out), "wait": True})
        listed = c.get("/runs").json()
        fetched = c.get(f"/runs/{body.json()['run_id']}").json()
    return body, listed, fetched, out


def test_blocking_run(finished_run):
    resp, listed, fetched, out = finished_run
    assert resp.status_code == 201
    status = resp.json()
    assert status["status"] == "ok" and status["seed"] == 4
    assert status["epochs_done"] == 1 and status["env_steps"] == 1000
    assert status["output_dir"] == str(out)
    assert status["last_metrics"]["epoch"] == 1
    assert [r["run_id"] for r in listed] == [status["run_id"]]
    assert fetched == status


def test_background_run_can_be_polled(client, tmp_path):
    resp = client.post("/runs", json={"config": {"preset": "smoke", "total_epochs": 0}, "output_dir": str(tmp_path)})
    assert resp.status_code == 201
    run_id = resp.json()["run_id"]
    for _ in range(200):
        status = client.get(f"/runs/{run_id}").json()["status"]
        if status not in ("pending", "running"):
            break
        time.sleep(0.05)
    assert status == "ok"


def test_unknown_run(client):
    assert_error(client.get("/runs/nope"), 404, "not_found")


def test_invalid_config_is_422(client):
    assert_error(client.post("/runs", json={"config": {"algorithm": "ppo"}}), 422, "configuration_error")


def test_malformed_body_is_422(client):
    assert_error(client.post("/runs", json={"config": 5}), 422, "invalid_request")
    assert_error(client.post("/evaluate", json={"checkpoint": "x", "episodes": 0}), 422, "invalid_request")


def test_evaluate(client, finished_run):
    out = finished_run[3]
    resp = client.post("/evaluate", json={"checkpoint": str(out / "checkpoint"), "episodes": 2})
    assert resp.status_code == 200
    body = resp.json()
    assert len(body["returns"]) == 2 and body["mean"] == pytest.approx(np.mean(body["returns"]))
    assert body["ci95_low"] <= body["mean"] <= body["ci95_high"]


def test_evaluate_errors(client, finished_run, tmp_path):
    assert_error(client.post("/evaluate", json={"checkpoint": str(tmp_path / "none")}), 422, "contract_violation")
    ckpt = str(finished_run[3] / "checkpoint")
    assert_error(client.post("/evaluate", json={"checkpoint": ckpt, "env_id": "valve"}), 422, "contract_violation")
    assert_error(client.post("/evaluate", json={"checkpoint": ckpt, "env_id": "cartpole"}), 422, "configuration_error")


def test_bounds_check(client):
    resp = client.post("/bounds/check", json=random_scenario(1).to_dict())
    assert resp.status_code == 200
    assert resp.json()["satisfied"] is True


def test_bounds_sweep_generated(client):
    resp = client.post("/bounds/sweep", json={"generate": {"count": 5, "seed": 0}})
    body = resp.json()
    assert body["total"] == 5 and body["satisfied"] == 5
    assert [r["seed"] for r in body["rows"]] == list(range(5))


def test_bounds_sweep_needs_exactly_one_source(client):
    assert_error(client.post("/bounds/sweep", json={}), 422, "configuration_error")


def test_bounds_rejects_invalid_mdp(client):
    scenario = random_scenario(1).to_dict()
    scenario["mdp"]["P"][0][0] = [2.0] + [0.0] * (len(scenario["mdp"]["P"][0][0]) - 1)
    assert_error(client.post("/bounds/check", json=scenario), 422, "contract_violation")


def test_mpr_weights(client):
    body = client.post("/mpr/weights", json={"costs": [0.0, float(np.log(3.0))], "lam": 1.0}).json()
    np.testing.assert_allclose(body["weights"], [0.75, 0.25], atol=1e-9)
    assert body["ess"] == pytest.approx(1 / (0.75**2 + 0.25**2))
