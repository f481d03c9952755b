"""
HTTP surface: health, experiment runs and error mapping.
"""
from fastapi.testclient import TestClient

from app.main import app


client = TestClient(app)

SMALL_SYSTEM = {"K": 3, "Nt": 2, "D": 4, "seed": 5}


def test_root():
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["health"] == "/api/v1/health"


def test_health():
    response = client.get("/api/v1/health")
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "healthy"
    assert body["max_trials"] > 0


class TestExperiments:
    """POST /api/v1/experiments/{kind}."""

    def test_beamform(self):
        response = client.post("/api/v1/experiments/beamform", json={"system": SMALL_SYSTEM, "schemes": ["ZF"]})
        assert response.status_code == 200
        body = response.json()
        assert body["kind"] == "beamform"
        assert len(body["config_hash"]) == 12
        assert [row["device"] for row in body["rows"]] == [0, 1, 2]
        assert body["passed"] is None

    def test_hyphenated_kind(self):
        response = client.post(
            "/api/v1/experiments/mse-sweep",
            json={"system": SMALL_SYSTEM, "schemes": ["ZF"], "grid": [10.0], "trials": 2},
        )
        assert response.status_code == 200
        assert response.json()["rows"][0]["scheme"] == "ZF"

    def test_unknown_kind(self):
        response = client.post("/api/v1/experiments/simulate", json={})
        assert response.status_code == 404

    def test_trial_budget(self):
        response = client.post("/api/v1/experiments/mse_sweep", json={"trials": 10 ** 6})
        assert response.status_code == 400

    def test_too_few_antennas(self):
        response = client.post("/api/v1/experiments/beamform", json={"system": {"K": 5, "Nt": 2}})
        assert response.status_code == 422

    def test_unknown_scheme(self):
        response = client.post(
            "/api/v1/experiments/beamform", json={"system": SMALL_SYSTEM, "schemes": ["OFDMA"]}
        )
        assert response.status_code == 422
        assert response.json()["error_type"] == "ConfigurationError"
