"""Chat-completion backends: live HTTP, deterministic mock, and cassette replay.

Every agent call in the pipeline goes through :class:`ChatBackend.complete`,
so swapping the model is a construction-time decision. The mock backend is a
pure function of ``(system_prompt, user_prompt, variant_seed)`` and ships
with a responder that understands the pipeline's prompt shapes, which makes
whole runs executable offline with no fixtures. The cassette is append-only
line-delimited JSON, one ``fingerprint -> response`` pair per line; replay
from a cassette is the only sanctioned path for CI.

Environment for the live backend: ``URBANMAS_API_KEY``, ``URBANMAS_API_BASE``
(OpenAI-compatible chat-completions endpoint) and ``URBANMAS_MODEL``.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

from .errors import AuthenticationError, ReplayMissError, TransportExhaustedError

logger = logging.getLogger(__name__)

RESPONSE_FORMATS = ("free_text", "structured_object")

DEFAULT_MAX_ATTEMPTS = 3
DEFAULT_BACKOFF_BASE_S = 0.5


@dataclass(frozen=True)
class ChatRequest:
    """One chat-completion request.

    ``variant_seed`` tags independent generations of the same prompt; the
    mock backend keys fixture slots on it and the live backend maps it to
    separate API calls.
    """

    system_prompt: str
    user_prompt: str
    image_refs: tuple[str, ...] = ()
    response_format: str = "free_text"
    variant_seed: int = 0

    def __post_init__(self) -> None:
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("prompts must be nonempty")
        if self.response_format not in RESPONSE_FORMATS:
            raise ValueError(f"bad response_format {self.response_format!r}")
        if self.variant_seed < 0:
            raise ValueError("variant_seed must be >= 0")
        object.__setattr__(self, "image_refs", tuple(str(r) for r in self.image_refs))


@dataclass(frozen=True)
class ChatResponse:
    """Raw model output; validation belongs to callers."""

    text: str
    latency_ms: float = 0.0
    backend_id: str = ""

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be nonnegative")


def fingerprint(req: ChatRequest) -> str:
    """Stable content hash of a request; image order is canonicalized."""
    payload = json.dumps(
        {
            "system": req.system_prompt,
            "user": req.user_prompt,
            "images": sorted(req.image_refs),
            "format": req.response_format,
            "seed": req.variant_seed,
        },
        sort_keys=True,
        ensure_ascii=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ChatBackend:
    """Interface all backends implement."""

    backend_id = "base"

    def complete(self, req: ChatRequest) -> ChatResponse:
        raise NotImplementedError


# --------------------------------------------------------------------------
# Deterministic mock
# --------------------------------------------------------------------------

def _digest(*parts: object) -> int:
    joined = "\x1f".join(str(p) for p in parts)
    return int(hashlib.sha256(joined.encode("utf-8")).hexdigest()[:12], 16)


_FACTOR_VOCAB = [
    ("population density", "Number of residents per square kilometer in the surrounding area."),
    ("greenery coverage", "Share of visible vegetation such as trees, lawns and planted areas."),
    ("commercial activity", "Density and variety of shops, restaurants and services."),
    ("pedestrian infrastructure", "Quality and continuity of sidewalks, crossings and paths."),
    ("public transport access", "Proximity and frequency of transit stops and stations."),
    ("street lighting", "Coverage and perceived adequacy of lighting after dark."),
    ("building condition", "Maintenance state and visual quality of surrounding buildings."),
    ("open space availability", "Presence of parks, plazas and other accessible open areas."),
    ("traffic intensity", "Volume and speed of motorized traffic on nearby streets."),
    ("social gathering spots", "Venues where people habitually meet, such as cafes or squares."),
    ("land use mix", "Blend of residential, commercial and recreational uses nearby."),
    ("street cleanliness", "Visible litter, graffiti and overall upkeep of the streetscape."),
]

_INTENSITY = ["very limited", "limited", "modest", "moderate", "notable", "high", "very high"]

_CONFLICT_TEXTS = [
    "entirely dominated by fenced industrial yards with no public access",
    "construction hoarding blocks every view and all activity here",
    "an empty parking structure occupies the whole frontage",
]

_KEYS_MARKER_RE = re.compile(r"exactly these keys:\s*(\[.*?\])", re.DOTALL)
_SCHEMA_MARKER_RE = re.compile(r'\{"(\w+)":\s*<number')
_VALUE_A_RE = re.compile(r'Value A:\s*("(?:[^"\\]|\\.)*")')
_REPORT_LINE_RE = re.compile(r"^\s*\d+\.\s*([^:\n]+):\s*(.+)$", re.MULTILINE)


def _mock_research(req: ChatRequest) -> str:
    seed = _digest("research", req.user_prompt, req.variant_seed)
    names = list(_FACTOR_VOCAB)
    picked = []
    for i in range(6):
        picked.append(names.pop((seed >> (i * 4)) % len(names)))
    lines = [
        "Synthesis of the most influential predictive factors for this task, "
        "dimension and level, based on the urban studies literature and "
        "comparable prediction exercises.",
        "",
    ]
    for i, (name, desc) in enumerate(picked, 1):
        lines.append(f"{i}. {name}: {desc}")
    lines += [
        "",
        "Each factor above is measurable from the available multi-source "
        "context (resolved address, nearby points of interest and street-level "
        "imagery) and has documented association with the target outcome. "
        "Factors are ordered by expected predictive contribution.",
    ]
    return "\n".join(lines)


def _mock_summary(req: ChatRequest) -> str:
    found = _REPORT_LINE_RE.findall(req.user_prompt)
    factors = [
        {"name": name.strip(), "description": desc.strip()} for name, desc in found[:6]
    ]
    seed = _digest("summary", req.user_prompt, req.variant_seed)
    pool = list(_FACTOR_VOCAB)
    while len(factors) < 6 and pool:
        name, desc = pool.pop(seed % len(pool))
        if all(f["name"] != name for f in factors):
            factors.append({"name": name, "description": desc})
    return json.dumps({"factors": factors})


def _mock_extraction(req: ChatRequest, keys_blob: str) -> str:
    try:
        keys = json.loads(keys_blob)
    except json.JSONDecodeError:
        keys = []
    context = req.user_prompt.split("Factors to extract", 1)[0]
    values = {}
    for key in keys:
        base_seed = _digest("extract", context, key)
        conflicted = base_seed % 6 == 0 and req.variant_seed > 0
        if conflicted:
            values[key] = _CONFLICT_TEXTS[base_seed % len(_CONFLICT_TEXTS)]
        else:
            intensity = _INTENSITY[base_seed % len(_INTENSITY)]
            values[key] = f"{intensity} {key} observed around this location"
    return json.dumps(values)


def _mock_inference(req: ChatRequest, output_key: str) -> str:
    seed = _digest("infer", req.user_prompt, output_key)
    value = (seed % 101) / 10.0
    return json.dumps(
        {
            output_key: value,
            "rationale": "estimate derived from the supplied structured urban information",
        }
    )


def deterministic_responder(req: ChatRequest) -> str:
    """Default mock responder understanding the pipeline's prompt shapes.

    Pure function of the request content. Recognizes, in order: refine
    prompts (returns the quoted Value A), extraction prompts (fills the
    requested keys), factor-summary prompts, numeric-schema prompts, and
    research prompts; anything else gets a deterministic placeholder.
    """
    value_a = _VALUE_A_RE.search(req.user_prompt)
    if value_a and "Value B:" in req.user_prompt:
        return json.loads(value_a.group(1))
    keys = _KEYS_MARKER_RE.search(req.user_prompt)
    if keys:
        return _mock_extraction(req, keys.group(1))
    if '"factors"' in req.user_prompt:
        return _mock_summary(req)
    schema = _SCHEMA_MARKER_RE.search(req.user_prompt)
    if schema:
        return _mock_inference(req, schema.group(1))
    if "research" in req.system_prompt.lower():
        return _mock_research(req)
    seed = _digest("generic", req.system_prompt, req.user_prompt, req.variant_seed)
    return f"deterministic mock response {seed:012x}"


Rule = tuple[Callable[[ChatRequest], bool], Callable[[ChatRequest], str]]


class MockBackend(ChatBackend):
    """Deterministic backend: a rule list consulted in order, then a default.

    Responses are a pure function of the request and the configured rules,
    so outputs are independent of call order and concurrency schedule.
    """

    backend_id = "mock"

    def __init__(self, default: Callable[[ChatRequest], str] = deterministic_responder):
        self._rules: list[Rule] = []
        self._default = default
        self._lock = threading.Lock()
        self.call_count = 0

    def add_rule(
        self,
        predicate: Callable[[ChatRequest], bool],
        response: str | Callable[[ChatRequest], str],
    ) -> "MockBackend":
        responder = response if callable(response) else (lambda _req, _text=response: _text)
        self._rules.append((predicate, responder))
        return self

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.call_count += 1
        for predicate, responder in self._rules:
            if predicate(req):
                return ChatResponse(text=responder(req), latency_ms=0.0, backend_id=self.backend_id)
        return ChatResponse(text=self._default(req), latency_ms=0.0, backend_id=self.backend_id)


# --------------------------------------------------------------------------
# Cassette record / replay
# --------------------------------------------------------------------------

class Cassette:
    """Append-only fingerprint -> response store, one JSON object per line."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def load(self) -> dict[str, ChatResponse]:
        entries: dict[str, ChatResponse] = {}
        if not self.path.exists():
            return entries
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    data = json.loads(line)
                    fp = data["fingerprint"]
                    resp = data["response"]
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ValueError(f"{self.path}:{lineno}: bad cassette line: {exc}") from exc
                if fp in entries:
                    logger.warning("duplicate cassette fingerprint %s; last write wins", fp)
                entries[fp] = ChatResponse(
                    text=resp["text"],
                    latency_ms=float(resp.get("latency_ms", 0.0)),
                    backend_id=str(resp.get("backend_id", "")),
                )
        return entries

    def append(self, fp: str, resp: ChatResponse) -> None:
        line = json.dumps(
            {
                "fingerprint": fp,
                "response": {
                    "text": resp.text,
                    "latency_ms": resp.latency_ms,
                    "backend_id": resp.backend_id,
                },
            },
            ensure_ascii=False,
        )
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


class ReplayBackend(ChatBackend):
    """Serve recorded responses by request fingerprint; misses are errors."""

    backend_id = "replay"

    def __init__(self, cassette_path: str | Path):
        self._entries = Cassette(cassette_path).load()
        self._path = Path(cassette_path)
        self._lock = threading.Lock()
        self.call_count = 0

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.call_count += 1
        fp = fingerprint(req)
        try:
            stored = self._entries[fp]
        except KeyError:
            head = req.user_prompt.splitlines()[0][:80]
            raise ReplayMissError(
                f"no cassette entry in {self._path} for fingerprint {fp} "
                f"(seed={req.variant_seed}, prompt starts: {head!r})"
            ) from None
        return ChatResponse(
            text=stored.text, latency_ms=stored.latency_ms, backend_id=self.backend_id
        )


class RecordingBackend(ChatBackend):
    """Pass requests to an inner backend and append every response to a cassette."""

    backend_id = "record"

    def __init__(self, inner: ChatBackend, cassette_path: str | Path):
        self._inner = inner
        self._cassette = Cassette(cassette_path)

    def complete(self, req: ChatRequest) -> ChatResponse:
        resp = self._inner.complete(req)
        self._cassette.append(fingerprint(req), resp)
        return resp


# --------------------------------------------------------------------------
# Live OpenAI-compatible backend
# --------------------------------------------------------------------------

class RateLimiter:
    """Token-bucket limiter for a requests-per-minute budget. Thread-safe."""

    def __init__(
        self,
        requests_per_minute: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        self._rate = requests_per_minute / 60.0
        self._capacity = float(requests_per_minute)
        self._tokens = self._capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self._capacity, self._tokens + (now - self._last) * self._rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self._rate
            self._sleep(wait)


Transport = Callable[[str, Mapping[str, str], Mapping], tuple[int, str]]


def _requests_transport(url: str, headers: Mapping[str, str], payload: Mapping) -> tuple[int, str]:
    import requests

    resp = requests.post(url, headers=dict(headers), json=payload, timeout=120)
    return resp.status_code, resp.text


def _image_part(ref: str) -> dict | None:
    if ref.startswith(("http://", "https://", "data:")):
        return {"type": "image_url", "image_url": {"url": ref}}
    path = Path(ref)
    if path.is_file():
        suffix = path.suffix.lstrip(".").lower() or "jpeg"
        mime = "image/jpeg" if suffix in ("jpg", "jpeg") else f"image/{suffix}"
        encoded = base64.b64encode(path.read_bytes()).decode("ascii")
        return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{encoded}"}}
    logger.warning("dropping unusable image ref %r", ref)
    return None


@dataclass
class LiveConfig:
    """Connection settings for the live endpoint, overridable per field."""

    api_base: str = ""
    api_key: str = ""
    model: str = ""
    temperature: float | None = None
    top_p: float | None = None
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    backoff_base_s: float = DEFAULT_BACKOFF_BASE_S
    requests_per_minute: float = 60.0
    max_in_flight: int = 4

    @classmethod
    def from_env(cls, **overrides) -> "LiveConfig":
        cfg = cls(
            api_base=os.environ.get("URBANMAS_API_BASE", ""),
            api_key=os.environ.get("URBANMAS_API_KEY", ""),
            model=os.environ.get("URBANMAS_MODEL", ""),
        )
        for key, value in overrides.items():
            if value is not None:
                setattr(cfg, key, value)
        return cfg


class LiveBackend(ChatBackend):
    """OpenAI-compatible chat-completions client with retry and rate limiting.

    Transient transport failures (connection errors, 429, 5xx) are retried
    with exponential backoff; credential rejections fail immediately. A
    bounded semaphore caps in-flight requests and a token bucket enforces
    the requests-per-minute budget.
    """

    backend_id = "live"

    def __init__(
        self,
        config: LiveConfig | None = None,
        transport: Transport = _requests_transport,
        sleep: Callable[[float], None] = time.sleep,
        rate_limiter: RateLimiter | None = None,
    ):
        self.config = config or LiveConfig.from_env()
        self._transport = transport
        self._sleep = sleep
        self._limiter = rate_limiter or RateLimiter(self.config.requests_per_minute)
        self._in_flight = threading.BoundedSemaphore(self.config.max_in_flight)
        self._lock = threading.Lock()
        self.call_count = 0

    def _payload(self, req: ChatRequest) -> dict:
        if req.image_refs:
            parts: list[dict] = [{"type": "text", "text": req.user_prompt}]
            parts.extend(p for p in (_image_part(r) for r in sorted(req.image_refs)) if p)
            user_content: object = parts
        else:
            user_content = req.user_prompt
        payload: dict = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": user_content},
            ],
            "seed": req.variant_seed,
        }
        if req.response_format == "structured_object":
            payload["response_format"] = {"type": "json_object"}
        if self.config.temperature is not None:
            payload["temperature"] = self.config.temperature
        if self.config.top_p is not None:
            payload["top_p"] = self.config.top_p
        return payload

    def complete(self, req: ChatRequest) -> ChatResponse:
        if not self.config.api_key:
            raise AuthenticationError("URBANMAS_API_KEY is not set")
        if not self.config.api_base:
            raise AuthenticationError("URBANMAS_API_BASE is not set")
        url = self.config.api_base.rstrip("/") + "/chat/completions"
        headers = {
            "Authorization": f"Bearer {self.config.api_key}",
            "Content-Type": "application/json",
        }
        payload = self._payload(req)
        last_error: str = ""
        attempts_made = 0
        for attempt in range(self.config.max_attempts):
            if attempt:
                self._sleep(self.config.backoff_base_s * (2 ** (attempt - 1)))
            attempts_made += 1
            self._limiter.acquire()
            with self._in_flight:
                with self._lock:
                    self.call_count += 1
                started = time.monotonic()
                try:
                    status, body = self._transport(url, headers, payload)
                except Exception as exc:
                    last_error = f"transport error: {exc}"
                    logger.warning("attempt %d/%d failed: %s", attempt + 1, self.config.max_attempts, last_error)
                    continue
                elapsed_ms = (time.monotonic() - started) * 1000.0
            if status in (401, 403):
                raise AuthenticationError(f"endpoint rejected credentials (HTTP {status})")
            if status == 200:
                try:
                    text = json.loads(body)["choices"][0]["message"]["content"]
                except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
                    last_error = f"malformed completion body: {exc}"
                    logger.warning("attempt %d/%d failed: %s", attempt + 1, self.config.max_attempts, last_error)
                    continue
                return ChatResponse(
                    text=text if isinstance(text, str) else json.dumps(text),
                    latency_ms=elapsed_ms,
                    backend_id=self.backend_id,
                )
            last_error = f"HTTP {status}: {body[:200]}"
            if status not in (408, 409, 429) and status < 500:
                break
            logger.warning("attempt %d/%d failed: %s", attempt + 1, self.config.max_attempts, last_error)
        raise TransportExhaustedError(
            f"gave up after {attempts_made} attempt(s): {last_error}"
        )
