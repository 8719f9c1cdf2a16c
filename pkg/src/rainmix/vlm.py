"""Client for binary image-quality judging endpoints, plus offline mocks.

Wire format (JSON over HTTP POST):

request  ``{"prompt": str, "query_image": base64 PNG, "references": [base64 PNG], "request_id": str}``
response ``{"verdict": bool, "model": str, "rationale": str (optional)}``

Transport errors, non-2xx statuses and malformed bodies are retried with
exponential backoff, at most ``1 + max_retries`` attempts in total.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Protocol

import requests

from rainmix.imaging import ImageBuffer, resize_bilinear, ssim

DEFAULT_PROMPT = (
    "You are shown a query image followed by reference photographs of real rainy scenes. "
    "Answer with verdict=true only if the query image is a realistic, high-quality rainy image "
    "whose rain appearance is consistent with the references; otherwise answer verdict=false."
)


class ProtocolError(ValueError):
    """The endpoint answered, but not with a well-formed verdict."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class EndpointFailure(RuntimeError):
    """All attempts failed at the transport or HTTP level."""

    def __init__(self, message: str, attempts: int, last_error: BaseException | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.last_error = last_error


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    timeout_ms: int = 30000
    max_retries: int = 2
    backoff_ms: int = 500
    bearer_token: str | None = None
    max_payload_bytes: int = 32 * 1024 * 1024

    def __post_init__(self):
        if not self.url:
            raise ValueError("endpoint url must be non-empty")
        if self.timeout_ms <= 0:
            raise ValueError(f"timeout_ms must be positive, got {self.timeout_ms}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.backoff_ms <= 0:
            raise ValueError(f"backoff_ms must be positive, got {self.backoff_ms}")

    def backoff_seconds(self, retry: int) -> float:
        """Delay before retry number ``retry`` (0-based): 0.5 s, 1 s, 2 s, ... by default."""
        return self.backoff_ms * (2**retry) / 1000.0


@dataclass(frozen=True)
class AssessmentRequest:
    query_image: bytes
    reference_images: tuple[bytes, ...] = ()
    prompt: str = DEFAULT_PROMPT
    request_id: str = ""

    def __post_init__(self):
        if not self.query_image:
            raise ValueError("an assessment request needs a query image")
        object.__setattr__(self, "reference_images", tuple(self.reference_images))

    @classmethod
    def from_images(cls, query: ImageBuffer, references=(), prompt: str = DEFAULT_PROMPT, request_id: str = ""):
        return cls(query.to_png_bytes(), tuple(r.to_png_bytes() for r in references), prompt, request_id)

    def body(self) -> bytes:
        payload = {
            "prompt": self.prompt,
            "query_image": base64.b64encode(self.query_image).decode("ascii"),
            "references": [base64.b64encode(r).decode("ascii") for r in self.reference_images],
            "request_id": self.request_id,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.body()).hexdigest()


@dataclass(frozen=True)
class EndpointResult:
    verdict: bool
    attempts: int
    latency_ms: float
    model: str = ""
    rationale: str | None = None


def parse_response(body: bytes | str) -> tuple[bool, str, str | None]:
    """Strictly decode a response body into ``(verdict, model, rationale)``."""
    try:
        obj = json.loads(body)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"response is not JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError(f"response must be a JSON object, got {type(obj).__name__}")
    verdict = obj.get("verdict")
    if not isinstance(verdict, bool):
        raise ProtocolError(f"'verdict' must be a boolean, got {verdict!r}")
    model = obj.get("model", "")
    if not isinstance(model, str):
        raise ProtocolError(f"'model' must be a string, got {model!r}")
    rationale = obj.get("rationale")
    if rationale is not None and not isinstance(rationale, str):
        raise ProtocolError(f"'rationale' must be a string, got {rationale!r}")
    return verdict, model, rationale


class Endpoint(Protocol):
    name: str

    def assess(self, request: AssessmentRequest) -> EndpointResult: ...


class HttpEndpoint:
    """Shareable handle for one remote judge; thread-safe for concurrent ``assess`` calls."""

    def __init__(self, config: EndpointConfig, name: str | None = None, sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.name = name or config.url
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.bearer_token:
            headers["Authorization"] = f"Bearer {self.config.bearer_token}"
        return headers

    def assess(self, request: AssessmentRequest) -> EndpointResult:
        body = request.body()
        if len(body) > self.config.max_payload_bytes:
            raise ValueError(f"request body of {len(body)} bytes exceeds the {self.config.max_payload_bytes}-byte cap")
        cfg = self.config
        last: BaseException | None = None
        start = time.perf_counter()
        attempts = 0
        for attempt in range(1 + cfg.max_retries):
            if attempt:
                self._sleep(cfg.backoff_seconds(attempt - 1))
            attempts += 1
            try:
                resp = requests.post(cfg.url, data=body, headers=self._headers(), timeout=cfg.timeout_ms / 1000.0)
            except requests.RequestException as exc:
                last = exc
                continue
            if resp.status_code // 100 != 2:
                last = EndpointFailure(f"HTTP {resp.status_code} from {cfg.url}", attempts)
                if 400 <= resp.status_code < 500 and resp.status_code not in (408, 429):
                    break
                continue
            try:
                verdict, model, rationale = parse_response(resp.content)
            except ProtocolError as exc:
                last = exc
                continue
            latency = (time.perf_counter() - start) * 1000.0
            return EndpointResult(verdict, attempts, latency, model, rationale)
        if isinstance(last, ProtocolError):
            raise ProtocolError(f"{cfg.url}: {last} (after {attempts} attempts)", attempts) from last
        raise EndpointFailure(f"{cfg.url}: gave up after {attempts} attempts: {last}", attempts, last)


@dataclass
class MockEndpoint:
    """Deterministic in-process judge.

    Rules:
      ``accept`` / ``reject``   constant verdicts
      ``ssim:<theta>``         accept iff the mean SSIM between the query and
                               each reference (resized to the query) exceeds theta
      ``digest``               accept iff the first byte of the request digest is even
    """

    rule: str
    name: str = ""
    calls: int = field(default=0, init=False)

    def __post_init__(self):
        kind, _, arg = self.rule.partition(":")
        if kind in ("accept", "reject", "digest"):
            if arg:
                raise ValueError(f"mock rule {kind!r} takes no argument")
            self._theta = None
        elif kind == "ssim":
            try:
                self._theta = float(arg)
            except ValueError as exc:
                raise ValueError(f"mock rule 'ssim:<theta>' needs a number, got {arg!r}") from exc
        else:
            raise ValueError(f"unknown mock rule {self.rule!r}; expected accept, reject, digest or ssim:<theta>")
        self._kind = kind
        self.name = self.name or f"mock-{self.rule}"

    def assess(self, request: AssessmentRequest) -> EndpointResult:
        self.calls += 1
        start = time.perf_counter()
        if self._kind == "accept":
            verdict = True
        elif self._kind == "reject":
            verdict = False
        elif self._kind == "digest":
            verdict = int(request.digest()[:2], 16) % 2 == 0
        else:
            verdict = mean_reference_ssim(request) > self._theta
        return EndpointResult(verdict, 1, (time.perf_counter() - start) * 1000.0, self.name)


def mean_reference_ssim(request: AssessmentRequest) -> float:
    """Mean SSIM of the query against each reference; 0 without references."""
    if not request.reference_images:
        return 0.0
    query = ImageBuffer.from_png_bytes(request.query_image)
    scores = []
    for raw in request.reference_images:
        ref = resize_bilinear(ImageBuffer.from_png_bytes(raw), query.height, query.width)
        if ref.channels != query.channels:
            ref = ImageBuffer(ref.pixels.mean(axis=2, keepdims=True).repeat(query.channels, axis=2))
        scores.append(ssim(query, ref))
    return float(sum(scores) / len(scores))


def mock_ensemble(rules: str, size: int = 3) -> list[MockEndpoint]:
    """``size`` mocks from one rule, or from ``size`` comma-separated rules."""
    parts = [r.strip() for r in rules.split(",")]
    if len(parts) == 1:
        parts = parts * size
    if len(parts) != size:
        raise ValueError(f"expected 1 or {size} mock rules, got {len(parts)}")
    return [MockEndpoint(r, name=f"mock{i}-{r}") for i, r in enumerate(parts)]
