import base64
import json
import socket
import threading

import numpy as np
import pytest
import requests
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from patchforge import oracle as oracle_mod
from patchforge.errors import CalibrationError, EnsembleError, InputError, ProtocolError, TransportError
from patchforge.imaging import FaceImage, encode_png, quantize
from patchforge.oracle import (
    Embedding,
    LinearOracle,
    Oracle,
    QueryLog,
    RemoteOracle,
    calibrate_threshold,
    cosine_similarity,
    ensemble_embed,
    parse_embed_response,
    remote_embed,
    threshold_candidates,
    verify,
)
from patchforge.service import running_server
from patchforge.toy import make_face


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class FixedOracle(Oracle):
    def __init__(self, vec, model_id="fixed"):
        super().__init__(model_id)
        self.vec = np.asarray(vec, dtype=np.float64)

    def _raw(self, image):
        return self.vec


class Failing(Oracle):
    def _raw(self, image):
        raise TransportError("offline")


# -- embeddings and metering ---------------------------------------------------------


def test_embedding_invariants():
    with pytest.raises(InputError):
        Embedding(np.array([1.0, 1.0]))
    with pytest.raises(InputError):
        Embedding(np.array([np.nan, 1.0]))
    with pytest.raises(ProtocolError):
        Embedding.from_raw([0.0, 0.0])
    e = Embedding.from_raw([3.0, 4.0])
    np.testing.assert_allclose(e.vector, [0.6, 0.8])
    with pytest.raises(ValueError):
        e.vector[0] = 1.0


def test_embed_counts_queries(plain_oracle, faces):
    plain_oracle.embed(faces[0])
    plain_oracle.embed(faces[1])
    assert plain_oracle.queries == 2
    assert [r.purpose for r in plain_oracle.log.records] == ["query", "query"]


def test_linear_oracle_matches_direct_matmul(plain_oracle, faces):
    m = plain_oracle.matrix.numpy()
    raw = m @ faces[2].pixels.numpy().reshape(-1)
    np.testing.assert_allclose(plain_oracle.embed(faces[2]).vector, raw / np.linalg.norm(raw), atol=1e-12)
    assert np.array_equal(plain_oracle.embed(faces[2]).vector, plain_oracle.embed(faces[2]).vector)


def test_embed_tensor_is_metered_and_consistent(plain_oracle, faces):
    t = plain_oracle.embed_tensor(faces[0].pixels)
    assert plain_oracle.queries == 1
    np.testing.assert_allclose(t.numpy(), plain_oracle.embed(faces[0]).vector, atol=1e-12)


def test_centered_oracle_ignores_brightness_offset(plain_oracle, faces):
    shifted = FaceImage((faces[0].pixels * 0.8 + 0.1).clamp(0, 1))
    lifted = FaceImage((faces[0].pixels * 0.8 + 0.15).clamp(0, 1))
    assert cosine_similarity(plain_oracle.embed(shifted), plain_oracle.embed(lifted)) > 1 - 1e-9


def test_failed_query_not_counted():
    o = Failing("down")
    with pytest.raises(TransportError):
        o.embed(make_face(0))
    assert o.queries == 0


def test_query_log_threadsafe():
    log = QueryLog()
    threads = [threading.Thread(target=lambda: [log.add("m") for _ in range(500)]) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert log.count == 4000
    log.reset()
    assert log.count == 0


# -- cosine, verify, calibration ---------------------------------------------------------


def test_cosine_examples():
    e = Embedding.from_raw([1.0, 2.0, 2.0])
    assert cosine_similarity(e, e) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity(e, Embedding(-e.vector)) == pytest.approx(-1.0, abs=1e-12)
    assert cosine_similarity(Embedding.from_raw([1, 0, 0]), Embedding.from_raw([0, 1, 0])) == 0.0
    with pytest.raises(InputError):
        cosine_similarity(e, Embedding.from_raw([1.0, 0.0]))


def _pair_with_cos(c):
    return Embedding.from_raw([1.0, 0.0]), Embedding.from_raw([c, np.sqrt(max(0.0, 1 - c * c))])


@pytest.mark.parametrize("sim,thr,match", [(0.9, 0.8, True), (0.8, 0.8, True), (0.5, 0.8, False)])
def test_verify_examples(sim, thr, match):
    d = verify(*_pair_with_cos(sim), thr)
    assert d.match is match and d.threshold == thr
    assert d.similarity == pytest.approx(sim, abs=1e-12)


def test_verify_exact_threshold_inclusive():
    e = Embedding.from_raw([1.0, 0.0])
    assert verify(e, e, 1.0).match


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.lists(st.floats(-5, 5), min_size=4, max_size=4),
       st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(-1, 1))
def test_verify_invariant_to_raw_rescaling(a, b, s1, s2, thr):
    a, b = np.array(a), np.array(b)
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    d1 = verify(Embedding.from_raw(a), Embedding.from_raw(b), thr)
    d2 = verify(Embedding.from_raw(s1 * a), Embedding.from_raw(s2 * b), thr)
    if abs(d1.similarity - thr) > 1e-9:
        assert d1.match == d2.match


def test_calibration_examples():
    pairs = [(0.9, None, True)] * 5 + [(0.1, None, False)] * 5
    assert calibrate_threshold(pairs) == pytest.approx(0.5)
    flat = [(0.3, None, True), (0.3, None, False)]
    assert calibrate_threshold(flat) == pytest.approx(0.8)
    with pytest.raises(CalibrationError):
        calibrate_threshold([(0.9, None, True)])
    with pytest.raises(CalibrationError):
        calibrate_threshold([])


def test_calibration_accepts_embeddings():
    a, b = _pair_with_cos(0.95)
    c, d = _pair_with_cos(0.2)
    assert calibrate_threshold([(a, b, True), (c, d, False)]) == pytest.approx(0.575)


def brute_force_threshold(sims, labels):
    values = sorted(set(sims))
    cands = [values[0] - 0.5] + [(x + y) / 2 for x, y in zip(values, values[1:])] + [values[-1] + 0.5]
    best, best_acc = None, -1
    for c in cands:
        acc = sum((s >= c) == lab for s, lab in zip(sims, labels))
        if acc >= best_acc:
            best, best_acc = c, acc
    return best


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([-0.3, 0.1, 0.25, 0.5, 0.7, 0.9]) | st.floats(-1, 1),
                          st.booleans()), min_size=2, max_size=80))
def test_calibration_matches_brute_force(items):
    labels = [lab for _, lab in items]
    if all(labels) or not any(labels):
        return
    sims = [s for s, _ in items]
    assert calibrate_threshold([(s, None, lab) for s, lab in items]) == brute_force_threshold(sims, labels)


def test_threshold_candidates():
    np.testing.assert_allclose(threshold_candidates(np.array([0.2, 0.6, 0.2])), [-0.3, 0.4, 1.1])


# -- ensemble --------------------------------------------------------------------------


def test_ensemble_examples(faces):
    single = LinearOracle.from_seed((3, 16, 16), 8, seed=1)
    (e,) = ensemble_embed([single], faces[0])
    assert np.array_equal(e.vector, LinearOracle.from_seed((3, 16, 16), 8, seed=1).embed(faces[0]).vector)
    trio = [LinearOracle.from_seed((3, 16, 16), 8, seed=s) for s in range(3)]
    assert len(ensemble_embed(trio, faces[0])) == 3
    assert sum(o.queries for o in trio) == 3
    with pytest.raises(EnsembleError) as err:
        ensemble_embed([trio[0], Failing("flaky-7")], faces[0])
    assert err.value.member == "flaky-7" and "flaky-7" in str(err.value)
    with pytest.raises(InputError):
        ensemble_embed([], faces[0])


# -- wire protocol -------------------------------------------------------------------------


def test_remote_round_trip_fixed_vector():
    with running_server(FixedOracle([3.0, 0.0, 4.0], "fixed")) as srv:
        e = remote_embed(srv.url, make_face(0), model="fixed")
    np.testing.assert_allclose(e.vector, [0.6, 0.0, 0.8], atol=1e-15)


def test_remote_matches_local_oracle(plain_oracle):
    face = make_face(9)
    with running_server(plain_oracle) as srv:
        client = RemoteOracle(srv.url, model=plain_oracle.model_id, dim=32)
        got = client.embed(face)
        assert client.queries == 1 and plain_oracle.queries == 1
    want = plain_oracle.embed(quantize(face))
    assert float(np.abs(got.vector - want.vector).max()) <= 1e-9


@pytest.mark.parametrize("fault", ["wrong_dim", "not_json", "nan", "missing_field"])
def test_malformed_responses_are_protocol_errors(fault):
    with running_server(FixedOracle([1.0, 2.0]), fault=fault) as srv:
        client = RemoteOracle(srv.url, model="fixed", backoff=0)
        with pytest.raises(ProtocolError):
            client.embed(make_face(0))
        assert client.queries == 0


def test_expected_dimension_enforced():
    with running_server(FixedOracle([1.0, 2.0])) as srv:
        with pytest.raises(ProtocolError):
            RemoteOracle(srv.url, model="fixed", dim=3).embed(make_face(0))


def test_unknown_model_is_protocol_error():
    with running_server(FixedOracle([1.0, 2.0])) as srv:
        with pytest.raises(ProtocolError, match="unknown model"):
            RemoteOracle(srv.url, model="other").embed(make_face(0))


def test_stub_down_transport_error_after_three_attempts(monkeypatch):
    sleeps = []
    monkeypatch.setattr(oracle_mod.time, "sleep", sleeps.append)
    attempts = []
    session = requests.Session()
    real = session.post
    session.post = lambda *a, **k: attempts.append(1) or real(*a, **k)
    client = RemoteOracle(f"http://127.0.0.1:{free_port()}", session=session, timeout=2)
    with pytest.raises(TransportError):
        client.embed(make_face(0))
    assert len(attempts) == 3 and sleeps == [0.5, 1.0]
    assert client.queries == 0


def test_server_errors_retried_then_transport_error(monkeypatch):
    monkeypatch.setattr(oracle_mod.time, "sleep", lambda s: None)
    with running_server(FixedOracle([1.0]), fault="server_error") as srv:
        client = RemoteOracle(srv.url, model="fixed")
        with pytest.raises(TransportError):
            client.embed(make_face(0))
    assert client.queries == 0


@pytest.mark.parametrize("body", [
    b"not json",
    b"[1, 2]",
    json.dumps({"model": "fixed"}).encode(),
    json.dumps({"image_png_b64": "@@@", "model": "fixed"}).encode(),
    json.dumps({"image_png_b64": base64.b64encode(b"not a png").decode(), "model": "fixed"}).encode(),
    json.dumps({"image_png_b64": 5, "model": "fixed"}).encode(),
])
def test_server_rejects_malformed_requests(body):
    with running_server(FixedOracle([1.0, 0.0])) as srv:
        resp = requests.post(srv.url + "/v1/embed", data=body, timeout=5)
        assert resp.status_code == 400
        assert isinstance(resp.json()["error"], str)
        assert srv.oracle.queries == 0


def test_server_unknown_path():
    with running_server(FixedOracle([1.0, 0.0])) as srv:
        assert requests.get(srv.url + "/v1/embed", timeout=5).status_code == 404
        assert requests.post(srv.url + "/v2/embed", json={}, timeout=5).status_code == 404


def test_server_response_schema():
    face = make_face(0)
    body = {"image_png_b64": base64.b64encode(encode_png(face)).decode(), "model": "fixed"}
    with running_server(FixedOracle([2.0, 0.0])) as srv:
        payload = requests.post(srv.url + "/v1/embed", json=body, timeout=5).json()
    assert payload == {"embedding": [1.0, 0.0], "model": "fixed", "dim": 2}


def test_concurrent_clients_metered_exactly(plain_oracle):
    with running_server(plain_oracle) as srv:
        clients = [RemoteOracle(srv.url, model=plain_oracle.model_id) for _ in range(6)]

        def work(c):
            for i in range(5):
                c.embed(make_face(i))

        threads = [threading.Thread(target=work, args=(c,)) for c in clients]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    assert plain_oracle.queries == 30
    assert all(c.queries == 5 for c in clients)


@pytest.mark.parametrize("payload", [
    {"embedding": [1.0, True], "model": "m", "dim": 2},
    {"embedding": [], "model": "m", "dim": 0},
    {"embedding": [1.0], "model": "m", "dim": "1"},
    {"embedding": [1.0], "model": "x", "dim": 1},
    ["embedding"],
])
def test_parse_embed_response_rejects(payload):
    with pytest.raises(ProtocolError):
        parse_embed_response(payload, model="m")


def test_endpoint_normalisation():
    assert RemoteOracle("http://h:1/").url == "http://h:1/v1/embed"
    assert RemoteOracle("http://h:1/v1/embed").url == "http://h:1/v1/embed"
