import base64
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from deliberator.gateway import (
    BadStatus,
    Cassette,
    ChatMessage,
    CorruptCassette,
    EmptyCompletion,
    ExhaustedCassette,
    ModelCall,
    ModelConfig,
    OpenAIChatBackend,
    RecordingBackend,
    ReplayBackend,
    ReplayMismatch,
    ScriptedBackend,
    Timeout,
    TransportError,
    build_request_body,
    complete,
    request_digest,
)
from deliberator.imaging import RasterImage


def msgs(text="hello", image=None):
    parts = (text,) if image is None else (text, image)
    return [ChatMessage.text("system", "be brief"), ChatMessage("user", parts)]


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        self.server.requests.append((self.path, dict(self.headers), body))
        mode = self.server.mode
        if mode == "slow":
            time.sleep(0.5)
        if mode == "500":
            self.send_response(500)
            self.end_headers()
            self.wfile.write(b"boom")
            return
        reply = {"choices": [{"message": {"role": "assistant", "content": "" if mode == "empty" else "pong"}}]}
        data = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


class _QuietServer(ThreadingHTTPServer):
    def handle_error(self, request, client_address):
        pass  # the client hung up on a slow reply


@pytest.fixture
def server():
    srv = _QuietServer(("127.0.0.1", 0), _Handler)
    srv.requests = []
    srv.mode = "ok"
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def backend_for(srv, **kw):
    host, port = srv.server_address
    return OpenAIChatBackend(ModelConfig(endpoint=f"http://{host}:{port}/v1", **kw))


class TestMessages:
    def test_role_and_parts_checked(self):
        with pytest.raises(ValueError):
            ChatMessage("assistant", ("x",))
        with pytest.raises(ValueError):
            ChatMessage("user", ())
        with pytest.raises(TypeError):
            ChatMessage("user", (b"bytes",))

    def test_digest_covers_text_and_pixels(self):
        a = RasterImage.blank(4, 4)
        b = RasterImage.blank(4, 4, (0, 0, 0))
        assert request_digest(msgs("x", a)) == request_digest(msgs("x", RasterImage.blank(4, 4)))
        assert request_digest(msgs("x", a)) != request_digest(msgs("x", b))
        assert request_digest(msgs("x")) != request_digest(msgs("y"))

    def test_request_body_embeds_png(self):
        img = RasterImage.blank(3, 2, (1, 2, 3))
        body = build_request_body(msgs("look", img), ModelConfig(model="m"))
        assert body["temperature"] == 0.0 and body["model"] == "m"
        url = body["messages"][1]["content"][1]["image_url"]["url"]
        assert url.startswith("data:image/png;base64,")
        assert RasterImage.from_png(base64.b64decode(url.split(",", 1)[1])) == img


class TestComplete:
    def test_scripted_reply_verbatim_and_transcript(self):
        transcript = []
        assert complete(msgs(), ScriptedBackend(["  canned\n"]), transcript, "tac") == "  canned\n"
        call = transcript[0]
        assert call.agent == "tac" and call.response == "  canned\n"
        assert call.digest == request_digest(msgs())
        assert ModelCall.from_dict(call.to_dict()) == call

    def test_empty_completion(self):
        transcript = []
        with pytest.raises(EmptyCompletion):
            complete(msgs(), ScriptedBackend(["   "]), transcript)
        assert len(transcript) == 1  # still traced

    def test_no_messages(self):
        with pytest.raises(ValueError):
            complete([], ScriptedBackend(["x"]))


class TestHttpBackend:
    def test_round_trip(self, server, monkeypatch):
        monkeypatch.setenv("DELIBERATOR_API_KEY", "sekrit")
        b = backend_for(server)
        assert b.complete(msgs("ping", RasterImage.blank(2, 2))) == "pong"
        path, headers, body = server.requests[0]
        assert path == "/v1/chat/completions"
        assert headers["Authorization"] == "Bearer sekrit"
        assert body["messages"][1]["content"][0] == {"type": "text", "text": "ping"}

    def test_timeout(self, server):
        server.mode = "slow"
        with pytest.raises(Timeout):
            backend_for(server, timeout=0.1).complete(msgs())

    def test_bad_status(self, server):
        server.mode = "500"
        with pytest.raises(BadStatus) as err:
            backend_for(server).complete(msgs())
        assert err.value.status == 500

    def test_empty(self, server):
        server.mode = "empty"
        with pytest.raises(EmptyCompletion):
            complete(msgs(), backend_for(server))

    def test_transport_error(self):
        # nothing listens on port 9 of localhost
        b = OpenAIChatBackend(ModelConfig(endpoint="http://127.0.0.1:9/v1", timeout=2))
        with pytest.raises(TransportError):
            b.complete(msgs())

    def test_endpoint_env_override(self, monkeypatch):
        monkeypatch.setenv("DELIBERATOR_ENDPOINT", "http://elsewhere/v1")
        assert ModelConfig.from_dict({"model": "x"}).endpoint == "http://elsewhere/v1"
        with pytest.raises(ValueError):
            ModelConfig.from_dict({"modle": "x"})


class TestCassettes:
    def test_record_then_replay(self, tmp_path):
        path = tmp_path / "c.txt"
        rec = RecordingBackend(ScriptedBackend(["one", "two\nlines é"]), path)
        assert rec.complete(msgs("a")) == "one"
        assert rec.complete(msgs("b")) == "two\nlines é"
        replay = ReplayBackend(path)
        assert replay.complete(msgs("a")) == "one"
        assert replay.complete(msgs("b")) == "two\nlines é"
        assert replay.remaining == 0
        with pytest.raises(ExhaustedCassette):
            replay.complete(msgs("c"))

    def test_mismatch(self):
        rec = RecordingBackend(ScriptedBackend(["one"]))
        rec.complete(msgs("a"))
        with pytest.raises(ReplayMismatch):
            ReplayBackend(rec.cassette).complete(msgs("changed"))

    def test_serialization_round_trip(self):
        c = Cassette([("d1", ""), ("d2", "x\n\ny"), ("d3", "ünï")])
        assert Cassette.loads(c.dumps()) == c

    @pytest.mark.parametrize("data", [
        b"not a cassette\n",
        b"deliberator-cassette 1\nabc 10\nshort\n",
        b"deliberator-cassette 1\nabc notanumber\nx\n",
        b"deliberator-cassette 1\nabc 3",
    ])
    def test_corrupt(self, data):
        with pytest.raises(CorruptCassette):
            Cassette.loads(data)
