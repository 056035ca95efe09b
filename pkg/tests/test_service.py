import json
import socket
import threading

import numpy as np
import pytest

from stepground.align import AlignConfig
from stepground.corpus import NarrationRecord, NarrationSegment, build_index
from stepground.embedding import HashFeatureEmbedder
from stepground.service import (
    ScoringClient,
    ScoringServer,
    ServiceConfig,
    encode_response,
    process_line,
    request_health,
)

EMB = HashFeatureEmbedder(dim=16, seed=2)


def rec(vid, texts):
    return NarrationRecord(
        vid,
        tuple(NarrationSegment(float(i), float(i + 1), t) for i, t in enumerate(texts)),
    )


@pytest.fixture(scope="module")
def index():
    return build_index(
        [
            rec("v0", ["hello there intro", "crack egg", "whisk egg", "fry egg"]),
            rec("v1", ["hello there intro", "crack egg"]),
            rec("v2", ["hello there intro", "boil water", "add pasta"]),
            rec("v3", ["hello there intro", "crack egg", "whisk egg"]),
        ],
        EMB,
    )


@pytest.fixture()
def server(index):
    srv = ScoringServer(("127.0.0.1", 0), index, ServiceConfig())
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def score_request(req_id="r1", completions=None, **extra):
    return {
        "id": req_id,
        "history": ["crack egg"],
        "completions": completions if completions is not None else [["whisk egg"]],
        **extra,
    }


class TestProcessLine:
    def test_single_completion_has_no_advantages(self, index):
        out = process_line(json.dumps(score_request()), index, EMB, ServiceConfig())
        assert out["id"] == "r1"
        assert len(out["completions"]) == 1
        assert "advantages" not in out
        assert "timing_ms" in out

    def test_identical_completions_zero_advantages(self, index):
        req = score_request(completions=[["whisk egg"]] * 4)
        out = process_line(json.dumps(req), index, EMB, ServiceConfig())
        rewards = [c["reward"] for c in out["completions"]]
        assert len(set(rewards)) == 1
        assert out["advantages"]["values"] == [0.0, 0.0, 0.0, 0.0]

    def test_empty_completion_is_legal_and_negative(self, index):
        req = score_request(completions=[[]])
        out = process_line(json.dumps(req), index, EMB, ServiceConfig())
        assert out["completions"][0]["reward"] < 0

    def test_deterministic_body_modulo_timing(self, index):
        req = json.dumps(score_request(completions=[["whisk egg"], []]))
        a = process_line(req, index, EMB, ServiceConfig())
        b = process_line(req, index, EMB, ServiceConfig())
        a.pop("timing_ms"), b.pop("timing_ms")
        assert encode_response(a) == encode_response(b)

    def test_bad_json_reported(self, index):
        out = process_line("{oops", index, EMB, ServiceConfig())
        assert out["error"]["code"] == "bad_json"
        assert out["id"] is None

    def test_empty_history_rejected(self, index):
        req = {"id": "x", "history": [], "completions": [["a"]]}
        out = process_line(json.dumps(req), index, EMB, ServiceConfig())
        assert out["error"]["code"] == "bad_request"
        assert out["id"] == "x"

    def test_oversized_request_rejected(self, index):
        cfg = ServiceConfig(step_cap=3)
        req = score_request(completions=[["a", "b", "c", "d"]])
        out = process_line(json.dumps(req), index, EMB, cfg)
        assert out["error"]["code"] == "request_too_large"

    def test_goal_is_accepted_and_unused(self, index):
        plain = json.dumps(score_request())
        with_goal = json.dumps(score_request(goal="make an omelet"))
        a = process_line(plain, index, EMB, ServiceConfig())
        b = process_line(with_goal, index, EMB, ServiceConfig())
        a.pop("timing_ms"), b.pop("timing_ms")
        assert a == b

    def test_config_override_changes_result(self, index):
        strict = score_request(config={"tau": 0.9})
        out = process_line(json.dumps(strict), index, EMB, ServiceConfig())
        loose = process_line(
            json.dumps(score_request()), index, EMB, ServiceConfig()
        )
        assert (
            out["completions"][0]["gated"] is False
            or loose["completions"][0]["gated"] is True
        )

    def test_unknown_config_field_rejected(self, index):
        req = score_request(config={"bogus": 1})
        out = process_line(json.dumps(req), index, EMB, ServiceConfig())
        assert out["error"]["code"] == "bad_request"

    def test_inline_vectors_bypass_embedder(self, index):
        hist_vecs = [EMB.embed("crack egg").tolist()]
        comp_vecs = [[EMB.embed("whisk egg").tolist()]]
        req = score_request(
            history_vectors=hist_vecs, completions_vectors=comp_vecs
        )
        with_vecs = process_line(json.dumps(req), index, None, ServiceConfig())
        without = process_line(
            json.dumps(score_request()), index, EMB, ServiceConfig()
        )
        assert (
            with_vecs["completions"][0]["reward"]
            == without["completions"][0]["reward"]
        )

    def test_text_without_embedder_needs_vectors(self, index):
        out = process_line(
            json.dumps(score_request()), index, None, ServiceConfig()
        )
        assert out["error"]["code"] == "needs_vectors"

    def test_health_reports_manifest(self, index):
        out = process_line(
            json.dumps({"id": "h", "op": "health"}), index, EMB, ServiceConfig()
        )
        assert out["record_count"] == 4
        assert out["segment_count"] == 13
        assert out["defaults"]["top_k"] == AlignConfig().top_k


class TestServer:
    def test_round_trip_over_socket(self, server):
        host, port = server.address
        with ScoringClient(host, port) as client:
            out = client.request(score_request())
        assert out["id"] == "r1"
        assert len(out["completions"]) == 1

    def test_health_over_socket(self, server):
        host, port = server.address
        info = request_health(host, port)
        assert info["record_count"] == 4
        assert info["version"]

    def test_health_reflects_overrides(self, index):
        srv = ScoringServer(
            ("127.0.0.1", 0),
            index,
            ServiceConfig(align=AlignConfig(top_k=7)),
        )
        t = threading.Thread(target=srv.serve_forever, daemon=True)
        t.start()
        try:
            info = request_health(*srv.address)
            assert info["defaults"]["top_k"] == 7
        finally:
            srv.shutdown()
            srv.server_close()

    def test_multiple_requests_one_connection(self, server):
        host, port = server.address
        with ScoringClient(host, port) as client:
            for i in range(5):
                out = client.request(score_request(req_id=f"q{i}"))
                assert out["id"] == f"q{i}"

    def test_concurrent_connections_match_serial(self, server):
        host, port = server.address
        requests = [
            score_request(req_id=f"c{i}", completions=[["whisk egg"], ["fry egg"], []])
            for i in range(24)
        ]
        serial = {}
        with ScoringClient(host, port) as client:
            for req in requests:
                out = client.request(req)
                out.pop("timing_ms")
                serial[out["id"]] = out

        concurrent = {}
        lock = threading.Lock()

        def worker(chunk):
            with ScoringClient(host, port) as client:
                for req in chunk:
                    out = client.request(req)
                    out.pop("timing_ms")
                    with lock:
                        concurrent[out["id"]] = out

        threads = [
            threading.Thread(target=worker, args=(requests[i::4],)) for i in range(4)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert concurrent == serial

    def test_unreachable_server_times_out(self):
        sock = socket.socket()
        sock.bind(("127.0.0.1", 0))
        port = sock.getsockname()[1]
        sock.close()  # nothing listening here now
        with pytest.raises(OSError):
            request_health("127.0.0.1", port, timeout=0.3)
