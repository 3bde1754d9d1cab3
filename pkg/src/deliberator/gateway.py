"""Chat-completion access to multimodal models, plus record/replay.

Every agent reaches a model through :func:`complete`. Backends only need a
``complete(messages) -> str`` method:

* :class:`OpenAIChatBackend` talks to an OpenAI-compatible
  ``/chat/completions`` endpoint, images sent as base64 PNG data URIs;
* :class:`ScriptedBackend` hands out canned replies in order;
* :class:`RecordingBackend` / :class:`ReplayBackend` persist and serve a
  :class:`Cassette`, verifying a digest of every request on replay.
"""

from __future__ import annotations

import base64
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence, Union

import httpx

from .imaging import RasterImage


ENDPOINT_ENV = "DELIBERATOR_ENDPOINT"
API_KEY_ENV = "DELIBERATOR_API_KEY"

Part = Union[str, RasterImage]


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    pass


class BadStatus(GatewayError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"model endpoint returned HTTP {status}: {body[:200]}")
        self.status = status


class Timeout(GatewayError):
    pass


class EmptyCompletion(GatewayError):
    pass


class ReplayMismatch(GatewayError):
    pass


class ExhaustedCassette(GatewayError):
    pass


class CorruptCassette(GatewayError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple[Part, ...]

    def __post_init__(self):
        if self.role not in ("system", "user"):
            raise ValueError(f"unsupported role {self.role!r}")
        if not self.parts:
            raise ValueError("a message needs at least one part")
        for p in self.parts:
            if not isinstance(p, (str, RasterImage)):
                raise TypeError(f"message part must be text or RasterImage, got {type(p)}")

    @classmethod
    def text(cls, role: str, text: str) -> "ChatMessage":
        return cls(role, (text,))

    def text_content(self) -> str:
        return "".join(
            p if isinstance(p, str) else f"<image {p.width}x{p.height} {p.digest()[:12]}>"
            for p in self.parts
        )


@dataclass(frozen=True)
class ModelConfig:
    endpoint: str = "http://localhost:8000/v1"
    model: str = "qwen2.5-vl-72b-instruct"
    temperature: float = 0.0
    max_tokens: int = 2048
    timeout: float = 120.0
    api_key: Optional[str] = None

    @classmethod
    def from_dict(cls, data: dict, default: Optional["ModelConfig"] = None) -> "ModelConfig":
        base = default or cls()
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        merged = {**base.__dict__, **known}
        if os.environ.get(ENDPOINT_ENV):
            merged["endpoint"] = os.environ[ENDPOINT_ENV]
        return cls(**merged)


def request_digest(messages: Sequence[ChatMessage]) -> str:
    """SHA-256 over the role / text / image-pixel sequence of a request."""
    h = hashlib.sha256()
    for m in messages:
        h.update(b"\x00role\x00" + m.role.encode())
        for p in m.parts:
            if isinstance(p, str):
                h.update(b"\x00text\x00" + p.encode("utf-8"))
            else:
                h.update(b"\x00image\x00" + p.digest().encode())
    return h.hexdigest()


class Backend(Protocol):
    def complete(self, messages: Sequence[ChatMessage]) -> str: ...


@dataclass(frozen=True)
class ModelCall:
    """Transcript entry for one model invocation."""

    agent: str
    digest: str
    request: tuple[tuple[str, str], ...]  # (role, text with image stand-ins)
    response: str

    def to_dict(self) -> dict:
        return {
            "agent": self.agent,
            "digest": self.digest,
            "request": [list(r) for r in self.request],
            "response": self.response,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelCall":
        return cls(d["agent"], d["digest"], tuple(tuple(r) for r in d["request"]), d["response"])


def complete(
    messages: Sequence[ChatMessage],
    backend: Backend,
    transcript: Optional[list[ModelCall]] = None,
    agent: str = "",
) -> str:
    if not messages:
        raise ValueError("messages must be non-empty")
    text = backend.complete(messages)
    if transcript is not None:
        transcript.append(ModelCall(
            agent=agent,
            digest=request_digest(messages),
            request=tuple((m.role, m.text_content()) for m in messages),
            response=text,
        ))
    if not text or not text.strip():
        raise EmptyCompletion(f"{agent or 'model'} returned an empty completion")
    return text


# --------------------------------------------------------------------------
# Backends
# --------------------------------------------------------------------------


class ScriptedBackend:
    """Returns the given replies in order, ignoring the request."""

    def __init__(self, replies: Iterable[str]):
        self._replies = list(replies)
        self._pos = 0

    @property
    def remaining(self) -> int:
        return len(self._replies) - self._pos

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        if self._pos >= len(self._replies):
            raise ExhaustedCassette("scripted backend has no replies left")
        reply = self._replies[self._pos]
        self._pos += 1
        return reply


def _encode_part(p: Part) -> dict:
    if isinstance(p, str):
        return {"type": "text", "text": p}
    b64 = base64.b64encode(p.to_png()).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}}


def build_request_body(messages: Sequence[ChatMessage], cfg: ModelConfig) -> dict:
    return {
        "model": cfg.model,
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
        "messages": [
            {"role": m.role, "content": [_encode_part(p) for p in m.parts]} for m in messages
        ],
    }


class OpenAIChatBackend:
    def __init__(self, cfg: ModelConfig, client: Optional[httpx.Client] = None):
        self.cfg = cfg
        self._client = client or httpx.Client()

    @property
    def url(self) -> str:
        base = self.cfg.endpoint.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        headers = {}
        key = self.cfg.api_key or os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self._client.post(
                self.url,
                json=build_request_body(messages, self.cfg),
                headers=headers,
                timeout=self.cfg.timeout,
            )
        except httpx.TimeoutException as exc:
            raise Timeout(f"no response from {self.url} within {self.cfg.timeout}s") from exc
        except httpx.HTTPError as exc:
            raise TransportError(f"request to {self.url} failed: {exc}") from exc
        if not 200 <= resp.status_code < 300:
            raise BadStatus(resp.status_code, resp.text)
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise EmptyCompletion(f"response from {self.url} has no message content") from None
        if isinstance(content, list):
            content = "".join(c.get("text", "") for c in content if isinstance(c, dict))
        if not isinstance(content, str):
            raise EmptyCompletion(f"response from {self.url} has no text content")
        return content

    def close(self) -> None:
        self._client.close()


# --------------------------------------------------------------------------
# Cassettes
# --------------------------------------------------------------------------

CASSETTE_MAGIC = "deliberator-cassette 1"


@dataclass
class Cassette:
    """Ordered (request digest, response text) pairs.

    On disk: a magic line, then per record a ``<digest> <n>`` line followed by
    exactly ``n`` bytes of UTF-8 response and a newline.
    """

    entries: list[tuple[str, str]] = field(default_factory=list)

    def dumps(self) -> bytes:
        out = [CASSETTE_MAGIC.encode() + b"\n"]
        for digest, text in self.entries:
            body = text.encode("utf-8")
            out.append(f"{digest} {len(body)}\n".encode() + body + b"\n")
        return b"".join(out)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def loads(cls, data: bytes) -> "Cassette":
        magic, sep, rest = data.partition(b"\n")
        if magic.decode(errors="replace") != CASSETTE_MAGIC or not sep:
            raise CorruptCassette("not a cassette file")
        entries = []
        pos = 0
        while pos < len(rest):
            nl = rest.find(b"\n", pos)
            if nl < 0:
                raise CorruptCassette(f"truncated record header at byte {pos}")
            try:
                digest, n = rest[pos:nl].decode().split(" ")
                n = int(n)
            except ValueError:
                raise CorruptCassette(f"bad record header at byte {pos}") from None
            start, end = nl + 1, nl + 1 + n
            if end + 1 > len(rest) or rest[end:end + 1] != b"\n":
                raise CorruptCassette(f"truncated record body for {digest[:12]}")
            entries.append((digest, rest[start:end].decode("utf-8")))
            pos = end + 1
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> "Cassette":
        return cls.loads(Path(path).read_bytes())


class RecordingBackend:
    """Forwards to ``inner`` and appends every exchange to a cassette.

    With ``path`` set the cassette is rewritten after each call, so partial
    episodes are kept.
    """

    def __init__(self, inner: Backend, path: Optional[str | Path] = None):
        self.inner = inner
        self.path = Path(path) if path else None
        self.cassette = Cassette()

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        text = self.inner.complete(messages)
        self.cassette.entries.append((request_digest(messages), text))
        if self.path:
            self.cassette.save(self.path)
        return text


class ReplayBackend:
    """Serves a cassette in order; any request drift is an error."""

    def __init__(self, cassette: Cassette | str | Path):
        self.cassette = cassette if isinstance(cassette, Cassette) else Cassette.load(cassette)
        self._pos = 0

    @property
    def remaining(self) -> int:
        return len(self.cassette.entries) - self._pos

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        if self._pos >= len(self.cassette.entries):
            raise ExhaustedCassette(f"cassette exhausted after {self._pos} entries")
        expected, text = self.cassette.entries[self._pos]
        actual = request_digest(messages)
        if actual != expected:
            raise ReplayMismatch(
                f"request #{self._pos} digest {actual[:12]} != recorded {expected[:12]}"
            )
        self._pos += 1
        return text
