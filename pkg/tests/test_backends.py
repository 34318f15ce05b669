import io
import json
import shlex
import socket
import sys
import threading
import time
from pathlib import Path

import pytest

from app.services.backends.base import BackendRole, DelayedBackend, TimedBackend
from app.services.backends.external import (
    ExternalDetector,
    ExternalRecognizer,
    _socket_connection,
    build_request,
    connect,
    decode_message,
    encode_message,
    external_backend,
    read_message,
    write_message,
)
from app.services.backends.oracle import oracle_recognizer
from app.services.backends.registry import BackendOptions, build_detector, build_recognizer, validate_spec
from app.services.backends.scripted import BackendScript, NoiseModel, ScriptedDetector, ScriptedRecognizer
from app.services.hoi.geometry import HAND_CLASS_ID, DetectionKind
from app.utils.exceptions import (
    BackendError,
    BackendTimeoutError,
    ConfigError,
    HandshakeError,
    ProtocolError,
)

VECTORS = json.loads((Path(__file__).parent / "fixtures" / "protocol_vectors.json").read_text(encoding="utf-8"))
TAXONOMY = ["hand", "screwdriver", "pliers"]


def _expected_detections(corpus, vid, f):
    ann = corpus.frames(vid)[f]
    return [h.to_bbox() for h in ann.hands] + [o.to_bbox() for o in ann.active_objects + ann.objects]


# 理想识别


def test_oracle_fires_only_on_contact_points(fixture_corpus):
    recognizer = oracle_recognizer(fixture_corpus, "v000")
    contact_points = set(fixture_corpus.contact_points("v000"))
    for f in range(100):
        pred = recognizer.feed(f)
        assert pred.is_contact == (f in contact_points)
        assert pred.confidence == (1.0 if f in contact_points else 0.0)
    assert recognizer.calls == 100


def test_oracle_rejects_out_of_range(fixture_corpus):
    recognizer = oracle_recognizer(fixture_corpus, "v000")
    with pytest.raises(BackendError) as err:
        recognizer.feed(100)
    assert err.value.frame_index == 100


# 脚本后端


def test_noiseless_script_reproduces_annotations(fixture_corpus):
    script = BackendScript.from_corpus(fixture_corpus, "v001")
    detector = ScriptedDetector(script)
    for f in (0, 20, 57, 99):
        dets = detector.detect(f)
        assert [d.bbox for d in dets] == _expected_detections(fixture_corpus, "v001", f)
        assert all(d.confidence == 1.0 for d in dets)
        assert [d.kind for d in dets[:2]] == [DetectionKind.HAND, DetectionKind.HAND]
        assert all(d.class_id == HAND_CLASS_ID for d in dets[:2])

    recognizer = ScriptedRecognizer(script)
    positives = [f for f in range(100) if recognizer.feed(f).is_contact]
    assert positives == fixture_corpus.contact_points("v001")


def test_scripted_detector_rejects_unknown_frame(fixture_corpus):
    script = BackendScript.from_corpus(fixture_corpus, "v000")
    del script.detections[5]
    with pytest.raises(BackendError) as err:
        ScriptedDetector(script).detect(5)
    assert err.value.frame_index == 5


def test_noise_is_seed_deterministic(fixture_corpus):
    noise = NoiseModel(box_jitter=3.0, conf_jitter=0.1, drop_prob=0.2)

    def outputs(seed):
        script = BackendScript.from_corpus(fixture_corpus, "v000", noise=noise, seed=seed)
        detector = ScriptedDetector(script)
        recognizer = ScriptedRecognizer(script)
        return [detector.detect(f) for f in range(100)], [recognizer.feed(f) for f in range(100)]

    assert outputs(1) == outputs(1)
    assert outputs(1) != outputs(2)


def test_noisy_confidence_stays_in_range(fixture_corpus):
    script = BackendScript.from_corpus(fixture_corpus, "v002", noise=NoiseModel(conf_jitter=0.8), seed=4)
    recognizer = ScriptedRecognizer(script)
    for f in range(100):
        assert 0.0 <= recognizer.feed(f).confidence <= 1.0
    for dets in (ScriptedDetector(script).detect(f) for f in range(100)):
        assert all(0.0 <= d.confidence <= 1.0 for d in dets)


def test_lead_frames_shift_contacts_earlier(fixture_corpus):
    script = BackendScript.from_corpus(fixture_corpus, "v000", noise=NoiseModel(lead_frames=(3, 3)))
    recognizer = ScriptedRecognizer(script)
    assert sorted(recognizer.contacts) == [f - 3 for f in fixture_corpus.contact_points("v000")]


def test_full_drop_removes_everything(fixture_corpus):
    script = BackendScript.from_corpus(fixture_corpus, "v000", noise=NoiseModel(drop_prob=1.0))
    assert ScriptedRecognizer(script).contacts == {}
    assert ScriptedDetector(script).detect(10) == []


def test_lead_frames_must_be_ordered():
    with pytest.raises(ValueError):
        NoiseModel(lead_frames=(5, 1))


def test_script_dump_and_load(fixture_corpus, tmp_path):
    script = BackendScript.from_corpus(fixture_corpus, "v000")
    script.contacts = {12: 0.8, 40: 1.0}
    path = script.dump(tmp_path / "scripts" / "v000.json")
    loaded = BackendScript.load(path)
    assert loaded.video_id == "v000"
    assert loaded.n_frames == 100
    assert loaded.contacts == {12: 0.8, 40: 1.0}
    assert loaded.detections == script.detections
    assert path.read_bytes() == loaded.dump(tmp_path / "again.json").read_bytes()


def test_script_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        BackendScript.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"video_id": "v000"}', encoding="utf-8")
    with pytest.raises(ConfigError):
        BackendScript.load(bad)


# 包装器


def test_timed_backend_records_latency(fixture_corpus):
    backend = TimedBackend(oracle_recognizer(fixture_corpus, "v000"))
    for f in range(5):
        backend.feed(f)
    assert backend.calls == 5
    assert len(backend.latencies) == 5
    assert backend.mean_latency_ms >= 0.0


def test_delayed_backend(fixture_corpus):
    with pytest.raises(ValueError):
        DelayedBackend(oracle_recognizer(fixture_corpus, "v000"), -1)
    backend = DelayedBackend(oracle_recognizer(fixture_corpus, "v000"), 20)
    start = time.perf_counter()
    backend.feed(0)
    assert time.perf_counter() - start >= 0.015


# 注册表


@pytest.mark.parametrize(
    "spec,role",
    [
        ("oracle", BackendRole.DETECTOR),
        ("none", BackendRole.DETECTOR),
        ("oracle:extra", BackendRole.RECOGNIZER),
        ("none:extra", BackendRole.RECOGNIZER),
        ("yolo", BackendRole.DETECTOR),
        ("", BackendRole.RECOGNIZER),
    ],
)
def test_validate_spec_rejects(spec, role):
    with pytest.raises(ConfigError):
        validate_spec(spec, role)


@pytest.mark.parametrize(
    "spec,role",
    [
        ("oracle", BackendRole.RECOGNIZER),
        ("none", BackendRole.RECOGNIZER),
        ("scripted", BackendRole.DETECTOR),
        ("scripted:/tmp/scripts", BackendRole.RECOGNIZER),
        ("external:tcp:127.0.0.1:9000", BackendRole.DETECTOR),
    ],
)
def test_validate_spec_accepts(spec, role):
    validate_spec(spec, role)


def test_build_backends(fixture_corpus):
    assert build_recognizer("none", fixture_corpus, "v000") is None
    recognizer = build_recognizer("oracle", fixture_corpus, "v000")
    assert isinstance(recognizer, TimedBackend)
    assert recognizer.feed(0).frame_index == 0
    assert recognizer.calls == 1

    opts = BackendOptions(box_jitter=2.0, lead_frames=(1, 2), seed=9)
    detector = build_detector("scripted", fixture_corpus, "v000", opts)
    assert detector.inner.script.noise.box_jitter == 2.0
    assert detector.inner.script.noise.lead_frames == (0, 0)
    recognizer = build_recognizer("scripted", fixture_corpus, "v000", opts)
    assert recognizer.inner.script.noise.box_jitter == 0.0
    assert recognizer.inner.script.noise.lead_frames == (1, 2)


def test_build_from_script_directory(fixture_corpus, tmp_path):
    script = BackendScript.from_corpus(fixture_corpus, "v001")
    script.dump(tmp_path / "v000.json")
    script.dump(tmp_path / "v001.json")
    with pytest.raises(ConfigError):
        build_detector(f"scripted:{tmp_path}", fixture_corpus, "v000")
    detector = build_detector(f"scripted:{tmp_path}", fixture_corpus, "v001")
    assert detector.detect(3)


def test_build_with_artificial_delay(fixture_corpus):
    detector = build_detector("scripted", fixture_corpus, "v000", BackendOptions(delay_ms=1.0))
    assert isinstance(detector.inner, DelayedBackend)


# 线协议


@pytest.mark.parametrize("vector", VECTORS["valid"], ids=lambda v: v["name"])
def test_protocol_vectors_encode(vector):
    assert encode_message(vector["message"]).hex() == vector["hex"]


@pytest.mark.parametrize("vector", VECTORS["valid"], ids=lambda v: v["name"])
def test_protocol_vectors_decode(vector):
    data = bytes.fromhex(vector["hex"])
    assert decode_message(data) == vector["message"]
    assert read_message(io.BytesIO(data)) == vector["message"]


@pytest.mark.parametrize("vector", VECTORS["malformed"], ids=lambda v: v["name"])
def test_protocol_malformed_vectors(vector):
    with pytest.raises(ProtocolError):
        decode_message(bytes.fromhex(vector["hex"]))


def test_read_message_truncated_stream():
    data = bytes.fromhex(VECTORS["valid"][0]["hex"])
    with pytest.raises(ProtocolError):
        read_message(io.BytesIO(data[:-3]))


def test_write_message_round_trip():
    buffer = io.BytesIO()
    write_message(buffer, {"type": "error", "message": "x"})
    write_message(buffer, {"type": "hello", "version": 1})
    buffer.seek(0)
    assert read_message(buffer) == {"type": "error", "message": "x"}
    assert read_message(buffer) == {"type": "hello", "version": 1}


def test_build_request_image_variants():
    assert build_request(BackendRole.DETECTOR, 3, b"abc")["image_b64"] == "YWJj"
    request = build_request(BackendRole.RECOGNIZER, 3, image_path="/frames/000003.jpg")
    assert request["image_path"] == "/frames/000003.jpg"
    assert "image_b64" not in request


@pytest.mark.parametrize(
    "descriptor",
    ["scripted", "external:tcp:nohost", "external:carrier-pigeon:x", "external:exec:"],
)
def test_connect_rejects_bad_descriptors(descriptor):
    with pytest.raises(ConfigError):
        connect(descriptor)


class FakeBackendServer:
    """套接字对另一端的模拟外部后端"""

    def __init__(self, handler):
        self.client_sock, self.server_sock = socket.socketpair()
        self.handler = handler
        self.received = []
        self.thread = threading.Thread(target=self._serve, daemon=True)
        self.thread.start()

    def _serve(self):
        stream = self.server_sock.makefile("rwb")
        try:
            while True:
                message = read_message(stream)
                self.received.append(message)
                reply = self.handler(message)
                if reply is not None:
                    write_message(stream, reply)
        except (ProtocolError, OSError, ValueError):
            pass

    def connection(self, timeout=2.0):
        return _socket_connection(self.client_sock, timeout, "external:test")

    def close(self):
        try:
            self.server_sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.server_sock.close()
        self.thread.join(timeout=2.0)


def _hello(request, **overrides):
    reply = {"type": "hello", "version": 1, "role": request["role"], "taxonomy": request["taxonomy"]}
    reply.update(overrides)
    return reply


@pytest.fixture
def fake_server():
    servers = []

    def start(handler):
        server = FakeBackendServer(handler)
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.close()


def test_external_detector_handshake_and_request(fake_server):
    def handler(message):
        if message["type"] == "hello":
            return _hello(message)
        return {
            "type": "response",
            "frame_index": message["frame_index"],
            "predictions": [{"bbox": [10.0, 20.0, 50.0, 60.0], "kind": "hand", "class_id": 0, "confidence": 0.9}],
        }

    server = fake_server(handler)
    detector = external_backend("external:test", BackendRole.DETECTOR, TAXONOMY, conn=server.connection())
    assert isinstance(detector, ExternalDetector)
    (det,) = detector.detect(7, b"abc")
    assert det.bbox.as_list() == [10.0, 20.0, 50.0, 60.0]
    assert det.is_hand
    assert server.received[0] == {"type": "hello", "version": 1, "role": "detector", "taxonomy": TAXONOMY}
    assert server.received[1]["image_b64"] == "YWJj"
    assert server.received[1]["frame_index"] == 7
    detector.close()


def test_external_recognizer_request(fake_server):
    def handler(message):
        if message["type"] == "hello":
            return _hello(message)
        return {"type": "response", "frame_index": message["frame_index"], "predictions": [{"confidence": 0.75}]}

    server = fake_server(handler)
    recognizer = external_backend("external:test", BackendRole.RECOGNIZER, TAXONOMY, conn=server.connection())
    assert isinstance(recognizer, ExternalRecognizer)
    pred = recognizer.feed(42)
    assert pred.frame_index == 42
    assert pred.confidence == 0.75
    assert pred.is_contact
    recognizer.close()


@pytest.mark.parametrize(
    "overrides",
    [{"version": 2}, {"role": "recognizer"}, {"taxonomy": ["hand"]}, {"type": "error", "message": "busy"}],
)
def test_external_handshake_mismatch(fake_server, overrides):
    server = fake_server(lambda message: _hello(message, **overrides))
    with pytest.raises(HandshakeError):
        external_backend("external:test", BackendRole.DETECTOR, TAXONOMY, conn=server.connection())


def test_external_handshake_error_reply(fake_server):
    server = fake_server(lambda request: {"type": "error", "message": "busy"})
    with pytest.raises(HandshakeError, match="busy"):
        external_backend("external:test", BackendRole.DETECTOR, TAXONOMY, conn=server.connection())


def test_external_timeout_breaks_connection(fake_server):
    def handler(message):
        if message["type"] == "hello":
            return _hello(message)
        time.sleep(0.5)
        return {"type": "response", "frame_index": message["frame_index"], "predictions": [{"confidence": 0.1}]}

    server = fake_server(handler)
    recognizer = external_backend(
        "external:test", BackendRole.RECOGNIZER, TAXONOMY, conn=server.connection(timeout=0.1)
    )
    with pytest.raises(BackendTimeoutError) as err:
        recognizer.feed(3)
    assert err.value.frame_index == 3
    with pytest.raises(BackendError):
        recognizer.feed(4)
    recognizer.close()


def test_external_response_errors(fake_server):
    def handler(message):
        if message["type"] == "hello":
            return _hello(message)
        if message["frame_index"] == 1:
            return {"type": "error", "message": "模型未加载"}
        if message["frame_index"] == 2:
            return {
                "type": "response",
                "frame_index": 2,
                "predictions": [{"bbox": [0, 0, 5, 5], "kind": "object", "class_id": 7, "confidence": 0.5}],
            }
        return {"type": "response", "frame_index": message["frame_index"] + 1, "predictions": []}

    server = fake_server(handler)
    detector = external_backend("external:test", BackendRole.DETECTOR, TAXONOMY, conn=server.connection())
    with pytest.raises(BackendError, match="模型未加载"):
        detector.detect(1)
    with pytest.raises(ProtocolError):
        detector.detect(2)
    with pytest.raises(ProtocolError):
        detector.detect(3)
    detector.close()


def test_exec_transport_echo_is_not_a_response():
    # cat 原样回显：握手通过，但请求回显不是响应
    recognizer = external_backend("external:exec:cat", BackendRole.RECOGNIZER, TAXONOMY, timeout=2.0)
    with pytest.raises(ProtocolError):
        recognizer.feed(0)
    recognizer.close()


def _close_in_thread(backend, timeout=3.0):
    closer = threading.Thread(target=backend.close, daemon=True)
    started = time.monotonic()
    closer.start()
    closer.join(timeout)
    return not closer.is_alive(), time.monotonic() - started


def test_close_after_timeout_does_not_hang(fake_server):
    # 只回握手，请求永远不回，读线程一直阻塞在读上
    def handler(message):
        if message["type"] == "hello":
            return _hello(message)
        return None

    server = fake_server(handler)
    recognizer = external_backend(
        "external:test", BackendRole.RECOGNIZER, TAXONOMY, conn=server.connection(timeout=0.2)
    )
    with pytest.raises(BackendTimeoutError):
        recognizer.feed(0)
    closed, elapsed = _close_in_thread(recognizer)
    assert closed
    assert elapsed < 2.0


STALLED_BACKEND = (
    "import sys, time\n"
    "header = sys.stdin.buffer.read(4)\n"
    "payload = sys.stdin.buffer.read(int.from_bytes(header, 'big'))\n"
    "sys.stdout.buffer.write(header + payload)\n"
    "sys.stdout.buffer.flush()\n"
    "time.sleep(60)\n"
)


def test_exec_close_after_timeout_kills_process():
    # 子进程回显握手后不再应答
    descriptor = f"external:exec:{shlex.join([sys.executable, '-c', STALLED_BACKEND])}"
    recognizer = external_backend(descriptor, BackendRole.RECOGNIZER, TAXONOMY, timeout=2.0)
    with pytest.raises(BackendTimeoutError):
        recognizer.feed(0)
    closed, elapsed = _close_in_thread(recognizer)
    assert closed
    assert elapsed < 2.0
