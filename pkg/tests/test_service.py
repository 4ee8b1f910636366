import json

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient

from pickrank.errors import DataError, StaleIndexError
from pickrank.metrics import QueryResult, mrr_at_k
from pickrank.model import ModelConfig, build_model, model_fingerprint
from pickrank.pipeline import rank_sample
from pickrank.service import (
    LogFileSink,
    LoopbackSink,
    RankingService,
    build_env_index,
    create_app,
    load_env_index,
    save_env_index,
)

SERVICE_MODEL = ModelConfig(hidden=32, heads=2, layers_inst=1, layers_img=1, ffn_dim=64, n_p_max=8, n_c=2)


@pytest.fixture(scope="module")
def service_model():
    torch.manual_seed(123)
    model = build_model(SERVICE_MODEL)
    model.eval()
    return model


@pytest.fixture()
def service(small_dataset, stub_backbone, service_model, tmp_path):
    return RankingService(
        small_dataset,
        service_model,
        stub_backbone,
        index_dir=tmp_path / "index",
        sink=LoopbackSink(),
        clock=lambda: 1234.5,
    )


class TestIndex:
    def test_build_covers_every_candidate(self, small_dataset, stub_backbone, service_model):
        index = build_env_index(small_dataset, "env00", service_model, stub_backbone)
        env = small_dataset.environments["env00"]
        assert index.candidate_ids == env.candidate_ids()
        assert index.h_t.shape == (len(env.candidates), 768)
        assert index.h_targ.shape == (len(env.candidates), SERVICE_MODEL.hidden)

    def test_reindex_unchanged_env_byte_identical(self, small_dataset, stub_backbone, service_model, tmp_path):
        index = build_env_index(small_dataset, "env00", service_model, stub_backbone)
        d1 = save_env_index(index, tmp_path / "idx")
        snapshot = {p.name: p.read_bytes() for p in d1.iterdir()}
        index2 = build_env_index(small_dataset, "env00", service_model, stub_backbone)
        save_env_index(index2, tmp_path / "idx")
        assert {p.name: p.read_bytes() for p in d1.iterdir()} == snapshot

    def test_round_trip(self, small_dataset, stub_backbone, service_model, tmp_path):
        index = build_env_index(small_dataset, "env00", service_model, stub_backbone)
        save_env_index(index, tmp_path / "idx")
        loaded = load_env_index(tmp_path / "idx", "env00", service_model, stub_backbone)
        assert np.array_equal(loaded.h_t, index.h_t)
        assert np.array_equal(loaded.h_targ, index.h_targ)
        assert loaded.candidate_ids == index.candidate_ids

    def test_stale_model_refused(self, small_dataset, stub_backbone, service_model, tmp_path):
        index = build_env_index(small_dataset, "env00", service_model, stub_backbone)
        save_env_index(index, tmp_path / "idx")
        torch.manual_seed(999)
        other = build_model(SERVICE_MODEL)
        assert model_fingerprint(other) != model_fingerprint(service_model)
        with pytest.raises(StaleIndexError, match="checkpoint"):
            load_env_index(tmp_path / "idx", "env00", other, stub_backbone)

    def test_stale_backbone_refused(self, small_dataset, stub_backbone, service_model, tmp_path):
        from pickrank.backbone import CachedBackbone, HashProjectionBackbone

        index = build_env_index(small_dataset, "env00", service_model, stub_backbone)
        save_env_index(index, tmp_path / "idx")
        other_backbone = CachedBackbone(HashProjectionBackbone(version="hash-proj-2"))
        with pytest.raises(StaleIndexError, match="backbone"):
            load_env_index(tmp_path / "idx", "env00", service_model, other_backbone)

    def test_unknown_env_rejected(self, small_dataset, stub_backbone, service_model):
        with pytest.raises(DataError):
            build_env_index(small_dataset, "nope", service_model, stub_backbone)


class TestServingEquivalence:
    def test_indexed_ordering_matches_direct_rank(self, service, small_dataset, stub_backbone, service_model):
        for sample in small_dataset.samples[:16]:
            direct = rank_sample(service_model, stub_backbone, small_dataset, sample)
            payload = service.query(sample.instruction, sample.env_id, top_k=len(direct))
            served = [r["candidate_id"] for r in payload["results"]]
            assert served == list(direct.candidate_ids())
            served_scores = np.array([r["score"] for r in payload["results"]])
            direct_scores = np.array([s for _, s in direct.entries])
            assert np.allclose(served_scores, direct_scores, atol=0)


class TestQuery:
    def test_payload_shape(self, service):
        payload = service.query("Find the red circle next to the blue square.", "env00", top_k=3)
        assert payload["env_id"] == "env00"
        assert len(payload["results"]) == 3
        for pos, row in enumerate(payload["results"], start=1):
            assert row["rank"] == pos
            assert row["crop_url"].startswith("/images/")
            assert len(row["context_urls"]) == 2
        scores = [r["score"] for r in payload["results"]]
        assert scores == sorted(scores, reverse=True)

    def test_identical_query_identical_payload(self, service):
        p1 = service.query("Pick up the green square near it.", "env00", top_k=4)
        p2 = service.query("Pick up the green square near it.", "env00", top_k=4)
        assert p1 == p2

    def test_rephrased_query_new_id(self, service):
        p1 = service.query("Pick up the green square.", "env00", top_k=2)
        p2 = service.query("Grab the green square now.", "env00", top_k=2)
        assert p1["query_id"] != p2["query_id"]

    def test_top_k_beyond_pool_rejected(self, service, small_dataset):
        pool = len(small_dataset.environments["env00"].candidates)
        with pytest.raises(DataError, match="top_k"):
            service.query("Pick up the cup.", "env00", top_k=pool + 1)

    def test_unknown_env_rejected(self, service):
        with pytest.raises(DataError, match="unknown environment"):
            service.query("Pick up the cup.", "envXX", top_k=1)

    def test_empty_instruction_rejected(self, service):
        with pytest.raises(DataError, match="empty"):
            service.query("   ", "env00", top_k=1)


class TestSelection:
    def test_select_top1_logs_rank_one(self, service):
        payload = service.query("Take the yellow cross beside it.", "env00", top_k=3)
        event = service.record_selection("default", payload["query_id"], payload["results"][0]["candidate_id"])
        assert event.rank == 1
        assert event.dispatch_status == "acknowledged"
        assert event.chosen == payload["results"][0]["candidate_id"]
        log = service.session_log("default")
        assert log[-1]["chosen"] == event.chosen

    def test_select_absent_candidate_rejected(self, service):
        payload = service.query("Take the yellow cross beside it.", "env00", top_k=2)
        shown = {r["candidate_id"] for r in payload["results"]}
        absent = next(
            c.candidate_id
            for c in service.dataset.environments["env00"].candidates
            if c.candidate_id not in shown
        )
        with pytest.raises(DataError, match="not in the shown list"):
            service.record_selection("default", payload["query_id"], absent)

    def test_unknown_session_rejected(self, service):
        with pytest.raises(DataError, match="session"):
            service.record_selection("ghost", "q", "c")

    def test_unknown_query_rejected(self, service):
        service.query("Take the cross.", "env00", top_k=1, session_id="s1")
        with pytest.raises(DataError, match="outstanding query"):
            service.record_selection("s1", "deadbeef", "c")

    def test_every_logged_event_was_shown(self, service, small_dataset):
        rng = np.random.default_rng(0)
        for sample in small_dataset.samples[:10]:
            payload = service.query(sample.instruction, sample.env_id, top_k=4, session_id="replay")
            pick = payload["results"][int(rng.integers(0, 4))]["candidate_id"]
            service.record_selection("replay", payload["query_id"], pick)
        for event in service.session_log("replay"):
            assert event["chosen"] in event["shown"]
            assert event["shown"].index(event["chosen"]) + 1 == event["rank"]

    def test_replay_reproduces_offline_mrr_at_10(self, service, small_dataset):
        # operator always picks the true target; log ranks must reproduce the
        # offline truncated MRR over the same queries
        session = "mrr-session"
        results = []
        picked_events = []
        for sample in small_dataset.samples:
            pool = len(small_dataset.environments[sample.env_id].candidates)
            payload = service.query(sample.instruction, sample.env_id, top_k=pool, session_id=session)
            ranking = tuple(r["candidate_id"] for r in payload["results"])
            results.append(QueryResult(sample_id=sample.sample_id, ranking=ranking, relevant=sample.relevant_ids))
            target = next(iter(sample.relevant_ids))
            picked_events.append(service.record_selection(session, payload["query_id"], target))
        offline = mrr_at_k(results, 10)
        from_log = sum(1.0 / e.rank if e.rank <= 10 else 0.0 for e in picked_events) / len(picked_events)
        assert from_log == pytest.approx(offline, abs=1e-12)


class TestSinks:
    def test_log_file_sink_appends_jsonl(self, small_dataset, stub_backbone, service_model, tmp_path):
        sink_path = tmp_path / "dispatch.jsonl"
        svc = RankingService(small_dataset, service_model, stub_backbone, sink=LogFileSink(sink_path))
        payload = svc.query("Pick the ring.", "env00", top_k=1)
        event = svc.record_selection("default", payload["query_id"], payload["results"][0]["candidate_id"])
        assert event.dispatch_status == "logged"
        lines = [json.loads(line) for line in sink_path.read_text().splitlines()]
        assert lines[0]["candidate_id" if "candidate_id" in lines[0] else "chosen"] == event.chosen

    def test_loopback_sink_records_picks(self, service):
        payload = service.query("Pick the ring.", "env00", top_k=1)
        service.record_selection("default", payload["query_id"], payload["results"][0]["candidate_id"])
        assert service.sink.picks[-1]["candidate_id"] == payload["results"][0]["candidate_id"]


class TestWireApi:
    @pytest.fixture()
    def client(self, service):
        return TestClient(create_app(service))

    def test_environments(self, client, small_dataset):
        resp = client.get("/environments")
        assert resp.status_code == 200
        body = resp.json()
        assert {e["env_id"] for e in body} == set(small_dataset.environments)
        assert all(e["candidate_count"] >= 1 for e in body)

    def test_query_select_log_round_trip(self, client):
        resp = client.post(
            "/query",
            json={"instruction": "Find the red circle.", "env_id": "env00", "top_k": 3, "session_id": "web"},
        )
        assert resp.status_code == 200
        payload = resp.json()
        assert payload["session_id"] == "web"
        assert [r["rank"] for r in payload["results"]] == [1, 2, 3]

        chosen = payload["results"][1]["candidate_id"]
        resp = client.post(
            "/select",
            json={"session_id": "web", "query_id": payload["query_id"], "candidate_id": chosen},
        )
        assert resp.status_code == 200
        event = resp.json()
        assert event["rank"] == 2

        resp = client.get("/session/web/log")
        assert resp.status_code == 200
        log = resp.json()
        assert len(log) == 1
        assert log[0]["chosen"] == chosen
        assert log[0]["query_id"] == payload["query_id"]

    def test_query_error_codes(self, client):
        resp = client.post("/query", json={"instruction": "x", "env_id": "nope", "top_k": 1})
        assert resp.status_code == 400
        resp = client.post("/query", json={"instruction": "x", "env_id": "env00", "top_k": 10_000})
        assert resp.status_code == 400
        resp = client.post("/query", json={"env_id": "env00"})
        assert resp.status_code == 422  # schema-level validation

    def test_image_serving(self, client, service):
        payload = service.query("Find the circle.", "env00", top_k=1)
        url = payload["results"][0]["crop_url"]
        resp = client.get(url)
        assert resp.status_code == 200
        assert resp.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_image_traversal_blocked(self, client):
        resp = client.get("/images/../manifest.json")
        assert resp.status_code == 404

    def test_missing_image_404(self, client):
        assert client.get("/images/images/env00/nope.png").status_code == 404
