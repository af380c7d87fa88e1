import pytest
from fastapi.testclient import TestClient

from api import app


@pytest.fixture
def client(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with TestClient(app) as c:
        yield c


def test_root_and_health(client):
    root = client.get("/")
    assert root.status_code == 200
    assert "train" in root.json()["endpoints"]
    health = client.get("/health").json()
    assert health["status"] == "healthy"
    assert health["runner_ready"] is True


def test_config_lists_methods_and_variants(client):
    body = client.get("/config").json()
    assert body["methods"] == ["direct", "meda_nc", "meda_c"]
    assert "medac_omit_even" in body["variants"]


def test_train_and_report(client, tiny_experiment):
    response = client.post("/train", json={"config": tiny_experiment, "overrides": {"run.k": 2}})
    assert response.status_code == 200
    summary = response.json()
    assert summary["variant"] == "meda_nc"
    assert len(summary["records"]) == 2
    assert 0.0 <= summary["best_auc"] <= 1.0

    report = client.post("/report", json={"csv_paths": [summary["outputs"]["metrics"]]})
    assert report.status_code == 200
    rows = report.json()["rows"]
    assert rows[0]["run_id"] == summary["run_id"]
    assert rows[0]["passes"] == 2
    variants = report.json()["variants"]
    assert variants[0]["variant"] == "meda_nc"
    assert variants[0]["runs"] == 1
    assert variants[0]["final_auc_std"] is None

    ckpt = summary["outputs"]["checkpoint"]
    diff = client.post("/diff-params", json={"ckpt_a": ckpt, "ckpt_b": ckpt})
    assert diff.status_code == 200
    assert diff.json()["l2"] == 0.0


def test_bad_config_is_422(client):
    response = client.post("/train", json={"config": {"run": {"method": "nope"}}})
    assert response.status_code == 422
    assert response.json()["type"] == "ConfigError"


def test_missing_files_are_400(client, tmp_path):
    report = client.post("/report", json={"csv_paths": [str(tmp_path / "absent.csv")]})
    assert report.status_code == 400
    diff = client.post("/diff-params", json={"ckpt_a": str(tmp_path / "a"), "ckpt_b": str(tmp_path / "b")})
    assert diff.status_code == 400
    assert diff.json()["type"] == "FormatError"


def test_report_needs_paths(client):
    assert client.post("/report", json={"csv_paths": []}).status_code == 422
