"""HTTP service: endpoint contracts, error mapping, and a full pipeline pass."""

import base64
from textwrap import dedent

import pytest
from fastapi.testclient import TestClient

from madseg import __version__, commands
from madseg.service.app import create_app

from conftest import TINY_SIZE


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app(), raise_server_exceptions=False)


@pytest.fixture(scope="module")
def run_config(tmp_path_factory, corpus_root):
    """A config file binding the tiny corpus to a seconds-scale run."""
    path = tmp_path_factory.mktemp("service") / "run.cfg"
    path.write_text(
        dedent(
            f"""\
            [dataset]
            root = {corpus_root}
            category = stripes
            texture_dir = {corpus_root / "textures"}

            [train]
            steps = 6
            batch_size = 4
            warmup_steps = 2
            image_size = {TINY_SIZE}
            base_width = 4
            memory_n = 4
            occ_count = 2
            occ_components = 2
            labeler_refresh_every = 3
            labeler_pool = 8
            projection_dim = 4
            plateau_window = 3
            plateau_patience = 100
            """
        )
    )
    return str(path)


@pytest.fixture(scope="module")
def trained(client, run_config, tmp_path_factory):
    """One checkpoint trained through the /train endpoint."""
    out_dir = tmp_path_factory.mktemp("service-train")
    ckpt = out_dir / "model.ckpt"
    resp = client.post(
        "/train",
        json={"config": run_config, "out": str(ckpt), "quiet": True},
    )
    assert resp.status_code == 200, resp.text
    return resp.json()


class TestHealth:
    def test_health_reports_ok_and_version(self, client):
        body = client.get("/health").json()
        assert body == {"status": "ok", "version": __version__}


class TestErrorMapping:
    def test_missing_config_file_maps_to_config_category(self, client, tmp_path):
        """A bad config path is a 400 whose category drives CLI exit code 2."""
        resp = client.post(
            "/train",
            json={"config": str(tmp_path / "nope.cfg"), "out": str(tmp_path / "m")},
        )
        assert resp.status_code == 400
        body = resp.json()
        assert body["category"] == "config"
        assert "not found" in body["message"]

    def test_missing_checkpoint_maps_to_data_category(self, client, tmp_path):
        resp = client.post(
            "/eval",
            json={"checkpoint": str(tmp_path / "nope.ckpt"), "out_dir": str(tmp_path)},
        )
        assert resp.status_code == 400
        assert resp.json()["category"] == "data"

    def test_unknown_ablation_is_rejected(self, client, run_config, tmp_path):
        resp = client.post(
            "/ablate",
            json={"config": run_config, "which": "no_such", "out_dir": str(tmp_path)},
        )
        assert resp.status_code == 400
        body = resp.json()
        assert body["category"] == "config"
        assert "no_such" in body["message"]

    def test_malformed_request_is_422(self, client, run_config):
        """Missing required fields fail request validation, not the pipeline."""
        resp = client.post("/train", json={"config": run_config})
        assert resp.status_code == 422

    def test_unexpected_exception_is_500_internal(self, client, monkeypatch):
        def boom(req):
            raise RuntimeError("wires crossed")

        monkeypatch.setattr(commands, "run_synth", boom)
        resp = client.post("/synth", json={"out_dir": "/tmp/unused"})
        assert resp.status_code == 500
        body = resp.json()
        assert body["category"] == "internal"
        assert "wires crossed" in body["message"]


class TestSynthEndpoint:
    def test_synth_writes_a_loadable_corpus(self, client, tmp_path):
        resp = client.post(
            "/synth",
            json={
                "out_dir": str(tmp_path),
                "size": TINY_SIZE,
                "n_train": 6,
                "n_test_normal": 2,
                "n_test_anomalous": 2,
            },
        )
        assert resp.status_code == 200
        body = resp.json()
        from madseg import dataio

        index = dataio.load_dataset(tmp_path, "stripes")
        assert len(index.train_normals) == 6
        assert body["category_dir"].endswith("stripes")
        assert (tmp_path / "textures").is_dir()


class TestSimulateEndpoint:
    def test_simulate_writes_pairs_and_manifest(self, client, run_config, tmp_path):
        resp = client.post(
            "/simulate",
            json={"config": run_config, "out_dir": str(tmp_path), "count": 3},
        )
        assert resp.status_code == 200
        body = resp.json()
        assert body["pairs"] == 3
        manifest = (tmp_path / "manifest.csv").read_text().strip().splitlines()
        assert len(manifest) == 4  # header + 3 rows
        for i in range(3):
            assert (tmp_path / f"{i:04d}_image.png").is_file()
            assert (tmp_path / f"{i:04d}_mask.png").is_file()


class TestTrainEvalScoreFlow:
    def test_train_reports_steps_and_artifacts(self, trained):
        assert trained["steps_run"] == 6
        assert trained["stopped_early"] is False
        from pathlib import Path

        assert Path(trained["checkpoint"]).is_file()
        assert Path(trained["log"]).is_file()
        final = trained["final"]
        assert final["total"] > 0
        assert set(final) == {
            "l1", "focal", "seg", "bce_labeled", "bce_pseudo", "total",
            "n_pseudo_used", "n_pseudo_unknown",
        }

    def test_eval_scores_the_test_split(self, client, trained, tmp_path):
        resp = client.post(
            "/eval",
            json={"checkpoint": trained["checkpoint"], "out_dir": str(tmp_path)},
        )
        assert resp.status_code == 200
        body = resp.json()
        assert body["category"] == "stripes"
        assert 0.0 <= body["auroc"] <= 1.0
        assert body["n_normal"] == 4 and body["n_anomalous"] == 4
        assert (tmp_path / "scores.csv").is_file()
        assert body["heatmap_dir"] is None

    def test_eval_heatmaps_flag_writes_pngs(self, client, trained, tmp_path):
        resp = client.post(
            "/eval",
            json={
                "checkpoint": trained["checkpoint"],
                "out_dir": str(tmp_path),
                "heatmaps": True,
            },
        )
        body = resp.json()
        assert body["n_heatmaps"] == 8
        assert len(list((tmp_path / "heatmaps").glob("*.png"))) == 8

    def test_score_by_path_and_by_b64_agree(
        self, client, trained, corpus_root, tmp_path
    ):
        img = sorted((corpus_root / "stripes" / "test" / "swap").iterdir())[0]
        by_path = client.post(
            "/score",
            json={
                "checkpoint": trained["checkpoint"],
                "image_path": str(img),
                "heatmap_out": str(tmp_path / "heat.png"),
            },
        )
        assert by_path.status_code == 200
        body = by_path.json()
        assert 0.0 <= body["image_score"] <= 1.0
        assert 0.0 <= body["latent_score"] <= 1.0
        assert (tmp_path / "heat.png").is_file()

        blob = base64.b64encode(img.read_bytes()).decode()
        by_b64 = client.post(
            "/score",
            json={"checkpoint": trained["checkpoint"], "image_b64": blob},
        )
        assert by_b64.status_code == 200
        assert by_b64.json()["image_score"] == pytest.approx(
            body["image_score"], rel=1e-6
        )

    def test_score_requires_exactly_one_image_source(self, client, trained):
        resp = client.post("/score", json={"checkpoint": trained["checkpoint"]})
        assert resp.status_code == 400
        assert "exactly one" in resp.json()["message"]
