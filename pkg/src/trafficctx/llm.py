"""Vision-LLM client: request building, retries, rate limiting, cost ledger, response cache,
response parsing and an offline mock annotator."""
from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import math
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import httpx
import numpy as np

from .context import ContextVocabulary, label_from_word, normalize_word
from .render import RenderConfig, crop_scenario
from .scenario import IntentionLabel, MapKind, Scenario, label_gt_intention

logger = logging.getLogger(__name__)

TRANSIENT_STATUSES = frozenset({408, 429, 500, 502, 503, 504})


class ParseError(ValueError):
    pass


class ApiError(RuntimeError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class Timeout(ApiError):
    pass


class BudgetExceeded(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# context


@dataclass(frozen=True)
class TransportationContext:
    intentions: tuple[IntentionLabel, ...]
    affordances: tuple[str, ...] = ()
    scenario_types: tuple[str, ...] = ()
    reasoning: str = ""
    unparsed_words: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.intentions:
            raise ValueError("intentions must not be empty")
        if len(set(self.intentions)) != len(self.intentions):
            raise ValueError("intentions must be duplicate-free")

    def to_dict(self) -> dict:
        return {
            "intentions": [i.word for i in self.intentions],
            "affordances": list(self.affordances),
            "scenario_types": list(self.scenario_types),
            "reasoning": self.reasoning,
            "unparsed_words": list(self.unparsed_words),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransportationContext":
        return cls(
            intentions=tuple(label_from_word(w) for w in d["intentions"]),
            affordances=tuple(d.get("affordances", ())),
            scenario_types=tuple(d.get("scenario_types", ())),
            reasoning=d.get("reasoning", ""),
            unparsed_words=tuple(d.get("unparsed_words", ())),
        )


def format_context(ctx: TransportationContext) -> str:
    """Canonical response block; :func:`parse_response` inverts it."""
    text = (
        "```\n"
        f"INTENTIONS: [{', '.join(i.word for i in ctx.intentions)}]\n"
        f"AFFORDANCES: [{', '.join(ctx.affordances)}]\n"
        f"SCENARIO: [{', '.join(ctx.scenario_types)}]\n"
        "```\n"
    )
    if ctx.reasoning:
        text += f"REASONING: {ctx.reasoning}\n"
    return text


_LINE_RE = {
    "intentions": re.compile(r"^[ \t>*`-]*INTENTIONS?[ \t*]*:[ \t]*\[(.*?)\][ \t]*$", re.I | re.M),
    "affordances": re.compile(r"^[ \t>*`-]*AFFORDANCES?[ \t*]*:[ \t]*\[(.*?)\][ \t]*$", re.I | re.M),
    "scenario_types": re.compile(r"^[ \t>*`-]*SCENARIOS?(?:[ \t_-]*TYPES?)?[ \t*]*:[ \t]*\[(.*?)\][ \t]*$", re.I | re.M),
}


def _split_list(body: str) -> list[str]:
    return [w.strip().strip("'\"`").strip() for w in body.split(",") if w.strip().strip("'\"`").strip()]


def parse_response(text: str, vocab: ContextVocabulary = ContextVocabulary(), strict: bool = False) -> TransportationContext:
    """Pull the three labeled lists out of an LLM reply.

    Words match case-, hyphen- and space-insensitively. Strict mode requires all
    three lines and rejects unknown words; lenient mode only requires the
    intention line and records dropped words in ``unparsed_words``.
    """
    found = {k: rx.search(text) for k, rx in _LINE_RE.items()}
    if found["intentions"] is None:
        raise ParseError("missing INTENTIONS line")
    if strict:
        for k in ("affordances", "scenario_types"):
            if found[k] is None:
                raise ParseError(f"missing {k.upper()} line")
    unknown: list[str] = []

    intentions: list[IntentionLabel] = []
    active = set(vocab.active_labels)
    for w in _split_list(found["intentions"].group(1)):
        lab = label_from_word(w)
        if lab is None or lab not in active:
            unknown.append(w)
        elif lab not in intentions:
            intentions.append(lab)

    def match(key: str, words: Sequence[str]) -> tuple[str, ...]:
        if found[key] is None:
            return ()
        index = {normalize_word(w): w for w in words}
        hits = []
        for w in _split_list(found[key].group(1)):
            canon = index.get(normalize_word(w))
            if canon is None:
                unknown.append(w)
            elif canon not in hits:
                hits.append(canon)
        return tuple(c for c in words if c in hits)

    affordances = match("affordances", vocab.affordance_words)
    scenarios = match("scenario_types", vocab.scenario_words)
    if strict and unknown:
        raise ParseError(f"unknown words: {unknown}")
    if not intentions:
        raise ParseError("empty intention list")

    rest = text
    for m in sorted((m for m in found.values() if m is not None), key=lambda m: m.start(), reverse=True):
        rest = rest[: m.start()] + rest[m.end():]
    rest = re.sub(r"^[ \t]*```[^\n]*$", "", rest, flags=re.M)
    rest = re.sub(r"^\s*REASONING\s*:\s*", "", rest.strip(), flags=re.I)
    return TransportationContext(tuple(intentions), affordances, scenarios, rest.strip(), tuple(unknown))


# ---------------------------------------------------------------------------
# records, ledger, cache


class QueryStatus(str, enum.Enum):
    OK = "OK"
    PARSE_FAILED = "PARSE_FAILED"
    API_ERROR = "API_ERROR"


MICROS = 1_000_000


@dataclass
class QueryRecord:
    scenario_id: str
    request_hash: str
    response_text: str
    parsed: TransportationContext | None
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost_micros: int = 0
    attempts: int = 1
    status: QueryStatus = QueryStatus.OK
    error: str = ""

    @property
    def estimated_cost(self) -> float:
        return self.cost_micros / MICROS

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "request_hash": self.request_hash,
            "response_text": self.response_text,
            "parsed": None if self.parsed is None else self.parsed.to_dict(),
            "token_counts": {"prompt": self.prompt_tokens, "completion": self.completion_tokens},
            "estimated_cost": self.estimated_cost,
            "cost_micros": self.cost_micros,
            "attempts": self.attempts,
            "status": self.status.value,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QueryRecord":
        return cls(
            scenario_id=d["scenario_id"],
            request_hash=d["request_hash"],
            response_text=d["response_text"],
            parsed=None if d.get("parsed") is None else TransportationContext.from_dict(d["parsed"]),
            prompt_tokens=d["token_counts"]["prompt"],
            completion_tokens=d["token_counts"]["completion"],
            cost_micros=d["cost_micros"],
            attempts=d["attempts"],
            status=QueryStatus(d["status"]),
            error=d.get("error", ""),
        )


class CostLedger:
    """Run-level spend in integer micro-units so per-record costs sum exactly."""

    def __init__(self, cap: float | None = None):
        self.cap_micros = None if cap is None else int(round(cap * MICROS))
        self.total_micros = 0
        self.entries: list[tuple[str, int]] = []
        self._lock = threading.Lock()

    @property
    def total(self) -> float:
        return self.total_micros / MICROS

    def reserve(self, estimate_micros: int) -> None:
        with self._lock:
            if self.cap_micros is not None and self.total_micros + estimate_micros > self.cap_micros:
                raise BudgetExceeded(
                    f"spent {self.total:.4f}, next call ~{estimate_micros / MICROS:.4f} would exceed cap "
                    f"{self.cap_micros / MICROS:.4f}"
                )

    def add(self, request_hash: str, micros: int) -> None:
        with self._lock:
            self.total_micros += micros
            self.entries.append((request_hash, micros))

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "total_micros": self.total_micros,
            "cap": None if self.cap_micros is None else self.cap_micros / MICROS,
            "calls": len(self.entries),
        }


class ResponseCache:
    """Content-addressed directory of QueryRecord JSON files; writes are atomic."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, request_hash: str) -> Path:
        return self.root / f"{request_hash}.json"

    def get(self, request_hash: str) -> QueryRecord | None:
        p = self.path(request_hash)
        if not p.exists():
            return None
        return QueryRecord.from_dict(json.loads(p.read_text(encoding="utf-8")))

    def put(self, rec: QueryRecord) -> None:
        p = self.path(rec.request_hash)
        tmp = p.with_name(f"{p.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_text(json.dumps(rec.to_dict(), sort_keys=True), encoding="utf-8")
        os.replace(tmp, p)


class RateLimiter:
    """Token bucket shared by worker threads."""

    def __init__(self, rate_per_s: float | None, burst: int = 1, clock=time.monotonic, sleep=time.sleep):
        self.rate = rate_per_s
        self.capacity = max(1, burst)
        self.tokens = float(self.capacity)
        self.clock = clock
        self.sleep = sleep
        self.last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if not self.rate:
            return
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
                self.last = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                wait = (1 - self.tokens) / self.rate
            self.sleep(wait)


# ---------------------------------------------------------------------------
# client


@dataclass
class EndpointConfig:
    endpoint_url: str = "http://localhost:8000/v1/chat/completions"
    model: str = "gpt-4-vision-preview"
    api_key_env: str = "LLM_API_KEY"
    max_retries: int = 3
    backoff_base_ms: float = 500.0
    budget_cap: float | None = 100.0
    concurrency: int = 4
    requests_per_second: float | None = None
    timeout_s: float = 120.0
    temperature: float = 0.0
    max_tokens: int = 800
    price_per_1k_prompt: float = 0.01
    price_per_1k_completion: float = 0.03
    image_tokens: int = 765
    flat_cost_per_call: float | None = None
    strict: bool = False
    extra: dict = field(default_factory=dict)


def build_request(text: str, png_bytes: bytes | None, cfg: EndpointConfig) -> dict:
    content: list[dict] = [{"type": "text", "text": text}]
    if png_bytes is not None:
        content.append(
            {"type": "image", "source": {"type": "base64", "media_type": "image/png",
                                         "data": base64.b64encode(png_bytes).decode("ascii")}}
        )
    body = {
        "model": cfg.model,
        "messages": [{"role": "user", "content": content}],
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
    }
    body.update(cfg.extra)
    return body


def request_hash(body: dict) -> str:
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _extract_reply(doc: dict) -> tuple[str, int | None, int | None]:
    usage = doc.get("usage") or {}
    pt = usage.get("prompt_tokens", usage.get("input_tokens"))
    ct = usage.get("completion_tokens", usage.get("output_tokens"))
    if "choices" in doc:
        msg = doc["choices"][0]["message"]["content"]
        if isinstance(msg, list):
            msg = "".join(part.get("text", "") for part in msg)
        return msg, pt, ct
    if "content" in doc:
        c = doc["content"]
        if isinstance(c, list):
            return "".join(part.get("text", "") for part in c if part.get("type", "text") == "text"), pt, ct
        return str(c), pt, ct
    raise ApiError("response has neither 'choices' nor 'content'")


class LLMClient:
    """Sends TCGPs to a chat endpoint with caching, retries, rate limiting and a budget cap."""

    def __init__(
        self,
        cfg: EndpointConfig,
        cache_dir: str | os.PathLike | None = None,
        ledger: CostLedger | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        vocab: ContextVocabulary = ContextVocabulary(),
        seed: int = 0,
    ):
        self.cfg = cfg
        self.cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self.ledger = ledger or CostLedger(cfg.budget_cap)
        self.sleep = sleep
        self.vocab = vocab
        self.limiter = RateLimiter(cfg.requests_per_second, sleep=sleep)
        self._jitter = random.Random(seed)
        headers = {"content-type": "application/json"}
        key = os.environ.get(cfg.api_key_env)
        if key:
            headers["authorization"] = f"Bearer {key}"
        self.http = httpx.Client(transport=transport, timeout=cfg.timeout_s, headers=headers)
        self.network_calls = 0
        self._lock = threading.Lock()

    def close(self) -> None:
        self.http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def estimate_micros(self, body: dict) -> int:
        if self.cfg.flat_cost_per_call is not None:
            return int(round(self.cfg.flat_cost_per_call * MICROS))
        text_tokens = sum(len(c.get("text", "")) for c in body["messages"][0]["content"]) // 4
        images = sum(1 for c in body["messages"][0]["content"] if c["type"] == "image")
        pt = text_tokens + images * self.cfg.image_tokens
        return self._cost(pt, self.cfg.max_tokens)

    def _cost(self, pt: int, ct: int) -> int:
        if self.cfg.flat_cost_per_call is not None:
            return int(round(self.cfg.flat_cost_per_call * MICROS))
        usd = pt / 1000 * self.cfg.price_per_1k_prompt + ct / 1000 * self.cfg.price_per_1k_completion
        return int(round(usd * MICROS))

    def _post(self, body: dict) -> tuple[dict, int]:
        attempts = 0
        last: Exception | None = None
        while attempts < max(1, self.cfg.max_retries):
            attempts += 1
            self.limiter.acquire()
            try:
                with self._lock:
                    self.network_calls += 1
                resp = self.http.post(self.cfg.endpoint_url, json=body)
            except httpx.TimeoutException as e:
                last = Timeout(f"request timed out: {e}")
            except httpx.TransportError as e:
                last = ApiError(f"transport error: {e}")
            else:
                if resp.status_code == 200:
                    return resp.json(), attempts
                if resp.status_code not in TRANSIENT_STATUSES:
                    raise ApiError(f"HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
                last = ApiError(f"HTTP {resp.status_code}", resp.status_code)
            if attempts < self.cfg.max_retries:
                delay = self.cfg.backoff_base_ms / 1000 * 2 ** (attempts - 1)
                self.sleep(delay * (1 + 0.1 * self._jitter.random()))
        assert last is not None
        raise last

    def query(self, text: str, png_bytes: bytes | None, scenario_id: str = "") -> QueryRecord:
        body = build_request(text, png_bytes, self.cfg)
        h = request_hash(body)
        if self.cache is not None:
            hit = self.cache.get(h)
            if hit is not None:
                return hit
        self.ledger.reserve(self.estimate_micros(body))
        doc, attempts = self._post(body)
        reply, pt, ct = _extract_reply(doc)
        if pt is None:
            pt = len(text) // 4 + (self.cfg.image_tokens if png_bytes is not None else 0)
        if ct is None:
            ct = len(reply) // 4
        cost = self._cost(int(pt), int(ct))
        self.ledger.add(h, cost)
        try:
            parsed = parse_response(reply, self.vocab, self.cfg.strict)
            status, err = QueryStatus.OK, ""
        except ParseError as e:
            parsed, status, err = None, QueryStatus.PARSE_FAILED, str(e)
        rec = QueryRecord(scenario_id, h, reply, parsed, int(pt), int(ct), cost, attempts, status, err)
        if self.cache is not None:
            self.cache.put(rec)
        return rec

    def query_tcgp(self, tcgp, scenario_id: str = "") -> QueryRecord:
        return self.query(tcgp.text, tcgp.image.to_png(), scenario_id)

    def query_many(self, items: Sequence[tuple[str, str, bytes | None]]) -> list[QueryRecord]:
        """Query (scenario_id, text, png) items with bounded concurrency; output order follows input.

        API failures become API_ERROR records; BudgetExceeded stops the batch.
        """

        def one(item):
            sid, text, img = item
            try:
                return self.query(text, img, sid)
            except ApiError as e:
                body = build_request(text, img, self.cfg)
                return QueryRecord(sid, request_hash(body), "", None, attempts=self.cfg.max_retries,
                                   status=QueryStatus.API_ERROR, error=str(e))

        with ThreadPoolExecutor(max_workers=max(1, self.cfg.concurrency)) as pool:
            return list(pool.map(one, items))


# ---------------------------------------------------------------------------
# mock annotator


# relative weights of wrong first intentions given the true label
DEFAULT_CONFUSION: dict[IntentionLabel, dict[IntentionLabel, float]] = {
    IntentionLabel.STATIONARY: {IntentionLabel.STRAIGHT: 5, IntentionLabel.RIGHT_TURN: 1, IntentionLabel.LEFT_TURN: 1},
    IntentionLabel.STRAIGHT: {IntentionLabel.STRAIGHT_LEFT: 3, IntentionLabel.STRAIGHT_RIGHT: 3,
                              IntentionLabel.LEFT_TURN: 1, IntentionLabel.RIGHT_TURN: 1, IntentionLabel.STATIONARY: 1},
    IntentionLabel.STRAIGHT_LEFT: {IntentionLabel.STRAIGHT: 5, IntentionLabel.LEFT_TURN: 1},
    IntentionLabel.STRAIGHT_RIGHT: {IntentionLabel.STRAIGHT: 5, IntentionLabel.RIGHT_TURN: 1},
    IntentionLabel.LEFT_TURN: {IntentionLabel.STRAIGHT: 3, IntentionLabel.LEFT_U_TURN: 1},
    IntentionLabel.RIGHT_TURN: {IntentionLabel.STRAIGHT: 3, IntentionLabel.STATIONARY: 1},
    IntentionLabel.LEFT_U_TURN: {IntentionLabel.LEFT_TURN: 5, IntentionLabel.STRAIGHT: 2},
    IntentionLabel.RIGHT_U_TURN: {IntentionLabel.STRAIGHT: 4, IntentionLabel.STATIONARY: 3, IntentionLabel.RIGHT_TURN: 2},
}


@dataclass(frozen=True)
class NoiseConfig:
    noise: float = 0.0
    seed: int = 0
    keep_truth_second: float = 0.7  # chance a wrong first guess is followed by the true label
    add_alternative: float = 0.5  # chance a correct first guess is followed by a confusable label
    confusion: dict = field(default_factory=lambda: DEFAULT_CONFUSION)
    render: RenderConfig = field(default_factory=RenderConfig)


def _scenario_rng(s: Scenario, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{s.scenario_id}:{s.ego_agent_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _draw(rng: np.random.Generator, weights: dict, exclude: Iterable[IntentionLabel]) -> IntentionLabel:
    ex = set(exclude)
    labels = [lab for lab in IntentionLabel if lab not in ex]
    w = np.array([float(weights.get(lab, 0.0)) for lab in labels])
    if w.sum() <= 0:
        w = np.ones(len(labels))
    return labels[int(rng.choice(len(labels), p=w / w.sum()))]


def mock_oracle(s: Scenario, noise_cfg: NoiseConfig = NoiseConfig(),
                vocab: ContextVocabulary = ContextVocabulary()) -> TransportationContext:
    """Deterministic stand-in for the vision LLM, driven by the ground-truth future.

    The first intention is the true label with probability 1 - noise, otherwise
    a draw from the confusion weights. Affordances and the scene type follow
    simple geometric heuristics.
    """
    gt = label_gt_intention(s, s.ego_agent_id)
    rng = _scenario_rng(s, noise_cfg.seed)
    u_first, u_second = rng.random(), rng.random()
    row = noise_cfg.confusion.get(gt, {})
    if u_first < noise_cfg.noise:
        first = _draw(rng, row, [gt])
        intentions = [first]
        if u_second < noise_cfg.keep_truth_second:
            intentions.append(gt)
    else:
        intentions = [gt]
        if u_second < noise_cfg.add_alternative:
            intentions.append(_draw(rng, row, [gt]))

    ego = s.ego.current
    speed = ego.speed
    aff = vocab.affordance_words
    words = []
    if speed > 1.0:
        words.append(aff[0])
    if gt is not IntentionLabel.STATIONARY and speed < 10.0:
        words.append(aff[1])
    if gt in (IntentionLabel.LEFT_TURN, IntentionLabel.LEFT_U_TURN, IntentionLabel.STRAIGHT_LEFT):
        words.append(aff[2])
    if gt in (IntentionLabel.RIGHT_TURN, IntentionLabel.RIGHT_U_TURN, IntentionLabel.STRAIGHT_RIGHT):
        words.append(aff[3])
    cropped = crop_scenario(s, noise_cfg.render)
    has_crosswalk = any(f.kind is MapKind.CROSSWALK for f in cropped.map)
    if has_crosswalk or speed < 3.0:
        words.append(aff[4])
    scen = vocab.scenario_words[0] if has_crosswalk else vocab.scenario_words[1]
    return TransportationContext(
        tuple(intentions),
        tuple(w for w in aff if w in words),
        (scen,),
        f"mock annotation (ground truth {gt.word}, noise {noise_cfg.noise:g})",
    )


def mock_record(s: Scenario, noise_cfg: NoiseConfig = NoiseConfig(),
                vocab: ContextVocabulary = ContextVocabulary()) -> QueryRecord:
    """QueryRecord for the mock annotator; the reply text goes through the real parser."""
    ctx = mock_oracle(s, noise_cfg, vocab)
    text = format_context(ctx)
    h = hashlib.sha256(f"mock:{noise_cfg.seed}:{noise_cfg.noise}:{s.scenario_id}".encode()).hexdigest()
    return QueryRecord(s.scenario_id, h, text, parse_response(text, vocab, strict=True))
