import json

import httpx
import numpy as np
import pytest

from trafficctx.llm import (
    ApiError,
    BudgetExceeded,
    CostLedger,
    EndpointConfig,
    LLMClient,
    NoiseConfig,
    ParseError,
    QueryRecord,
    QueryStatus,
    RateLimiter,
    TransportationContext,
    format_context,
    mock_oracle,
    mock_record,
    parse_response,
    request_hash,
    build_request,
)
from trafficctx.scenario import IntentionLabel, label_gt_intention

from conftest import simple_scenario, straight_track

L = IntentionLabel
LITERAL = "INTENTIONS: [Straight, Right-Turn]\nAFFORDANCES: [Slow-Allow, Right-Allow]\nSCENARIO: [Intersection]"
REPLY = "```\n" + LITERAL + "\n```\nREASONING: lane points right."


def _openai(text, pt=100, ct=20):
    return {"choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": pt, "completion_tokens": ct}}


def _client(handler, tmp_path=None, **cfg):
    kw = dict(backoff_base_ms=1.0, concurrency=2)
    kw.update(cfg)
    sleeps = []
    c = LLMClient(EndpointConfig(**kw), None if tmp_path is None else tmp_path / "cache",
                  transport=httpx.MockTransport(handler), sleep=sleeps.append)
    return c, sleeps


# ---------------------------------------------------------------------------
# parsing


def test_parse_literal_lists():
    ctx = parse_response(LITERAL)
    assert ctx.intentions == (L.STRAIGHT, L.RIGHT_TURN)
    assert ctx.affordances == ("Slow-Allow", "Right-Allow")
    assert ctx.scenario_types == ("Intersection",)


def test_parse_reasoning_and_fences():
    ctx = parse_response(REPLY)
    assert ctx.reasoning == "lane points right."


def test_empty_intentions_rejected():
    with pytest.raises(ParseError):
        parse_response("INTENTIONS: []")
    with pytest.raises(ParseError):
        parse_response("no labeled lines here")


def test_strict_and_lenient():
    with pytest.raises(ParseError):
        parse_response("intentions: [straight]", strict=True)
    ctx = parse_response("intentions: [straight]")
    assert ctx.intentions == (L.STRAIGHT,) and ctx.affordances == () and ctx.scenario_types == ()
    with pytest.raises(ParseError):
        parse_response(LITERAL.replace("Slow-Allow", "Hover-Allow"), strict=True)
    lenient = parse_response(LITERAL.replace("Slow-Allow", "Hover-Allow"))
    assert lenient.unparsed_words == ("Hover-Allow",) and lenient.affordances == ("Right-Allow",)


def test_parse_normalizes_case_and_spacing():
    ctx = parse_response("INTENTIONS: [left turn, LEFT_U_TURN, left-turn]\nAFFORDANCES: [slow allow]\nSCENARIO: [straight road]")
    assert ctx.intentions == (L.LEFT_TURN, L.LEFT_U_TURN)
    assert ctx.affordances == ("Slow-Allow",) and ctx.scenario_types == ("Straight-Road",)


def test_format_roundtrip_examples():
    ctx = TransportationContext((L.RIGHT_U_TURN, L.STATIONARY), ("Stop-Allow",), ("Parking-Area",), "why")
    assert parse_response(format_context(ctx), strict=True) == ctx


# ---------------------------------------------------------------------------
# client


def test_ok_reply(tmp_path):
    c, _ = _client(lambda req: httpx.Response(200, json=_openai(REPLY)))
    r = c.query("describe", b"\x89PNG")
    assert r.status is QueryStatus.OK and r.parsed.intentions[0] is L.STRAIGHT
    assert (r.prompt_tokens, r.completion_tokens, r.attempts) == (100, 20, 1)


def test_anthropic_style_reply():
    body = {"content": [{"type": "text", "text": REPLY}], "usage": {"input_tokens": 7, "output_tokens": 3}}
    c, _ = _client(lambda req: httpx.Response(200, json=body))
    r = c.query("x", None)
    assert r.status is QueryStatus.OK and (r.prompt_tokens, r.completion_tokens) == (7, 3)


def test_retries_429_then_ok():
    calls = []

    def handler(req):
        calls.append(req)
        return httpx.Response(429) if len(calls) <= 2 else httpx.Response(200, json=_openai(REPLY))

    c, sleeps = _client(handler)
    r = c.query("x", None)
    assert r.attempts == 3 and r.status is QueryStatus.OK
    assert len(sleeps) == 2 and sleeps[1] > sleeps[0]


def test_gives_up_after_max_retries():
    c, _ = _client(lambda req: httpx.Response(503), max_retries=3)
    with pytest.raises(ApiError):
        c.query("x", None)
    assert c.network_calls == 3


def test_non_transient_error_not_retried():
    c, _ = _client(lambda req: httpx.Response(400, text="bad"))
    with pytest.raises(ApiError) as e:
        c.query("x", None)
    assert e.value.status == 400 and c.network_calls == 1


def test_transport_error_retried():
    n = []

    def handler(req):
        n.append(1)
        if len(n) == 1:
            raise httpx.ConnectError("down")
        return httpx.Response(200, json=_openai(REPLY))

    c, _ = _client(handler)
    assert c.query("x", None).attempts == 2


def test_budget_stops_eleventh_call():
    c, _ = _client(lambda req: httpx.Response(200, json=_openai(REPLY)), budget_cap=1.0, flat_cost_per_call=0.10)
    for i in range(10):
        c.query(f"prompt {i}", None)
    with pytest.raises(BudgetExceeded):
        c.query("prompt 10", None)
    assert c.network_calls == 10
    assert c.ledger.total_micros == 1_000_000


def test_cache_makes_reruns_free(tmp_path):
    c, _ = _client(lambda req: httpx.Response(200, json=_openai(REPLY)), tmp_path)
    a = c.query("same", b"img")
    b = c.query("same", b"img")
    assert c.network_calls == 1 and a.to_dict() == b.to_dict()
    c2, _ = _client(lambda req: pytest.fail("network used despite cache"), tmp_path)
    assert c2.query("same", b"img").to_dict() == a.to_dict()


def test_parse_failure_recorded(tmp_path):
    c, _ = _client(lambda req: httpx.Response(200, json=_openai("I cannot tell.")))
    r = c.query("x", None)
    assert r.status is QueryStatus.PARSE_FAILED and r.parsed is None and r.cost_micros > 0


def test_ledger_conservation_under_concurrency():
    rng = np.random.default_rng(0)

    def handler(req):
        pt, ct = (int(v) for v in rng.integers(50, 5000, 2))
        return httpx.Response(200, json=_openai(REPLY, pt, ct))

    c, _ = _client(handler, concurrency=4)
    recs = c.query_many([(f"s{i}", f"prompt {i}", None) for i in range(40)])
    assert [r.scenario_id for r in recs] == [f"s{i}" for i in range(40)]
    assert sum(r.cost_micros for r in recs) == c.ledger.total_micros


def test_query_many_records_api_errors():
    c, _ = _client(lambda req: httpx.Response(400))
    (r,) = c.query_many([("s", "p", None)])
    assert r.status is QueryStatus.API_ERROR and r.attempts >= 1


def test_wire_format():
    seen = {}

    def handler(req):
        seen.update(json.loads(req.content))
        return httpx.Response(200, json=_openai(REPLY))

    c, _ = _client(handler, model="m1", temperature=0.0)
    c.query("hello", b"\x89PNG")
    assert seen["model"] == "m1" and seen["temperature"] == 0.0
    content = seen["messages"][0]["content"]
    assert content[0] == {"type": "text", "text": "hello"}
    assert content[1]["type"] == "image" and content[1]["source"]["media_type"] == "image/png"


def test_request_hash_is_canonical():
    cfg = EndpointConfig()
    assert request_hash(build_request("a", b"b", cfg)) == request_hash(build_request("a", b"b", cfg))
    assert request_hash(build_request("a", b"b", cfg)) != request_hash(build_request("a", b"c", cfg))


def test_record_json_roundtrip():
    r = QueryRecord("s", "h", REPLY, parse_response(REPLY), 1, 2, 345, 2)
    assert QueryRecord.from_dict(json.loads(json.dumps(r.to_dict()))).to_dict() == r.to_dict()


def test_rate_limiter_spacing():
    t = [0.0]
    waits = []

    def sleep(d):
        waits.append(d)
        t[0] += d

    rl = RateLimiter(2.0, burst=1, clock=lambda: t[0], sleep=sleep)
    for _ in range(5):
        rl.acquire()
    assert t[0] == pytest.approx(2.0)


def test_ledger_reserve():
    led = CostLedger(cap=0.5)
    led.add("a", 400_000)
    led.reserve(100_000)
    with pytest.raises(BudgetExceeded):
        led.reserve(100_001)


# ---------------------------------------------------------------------------
# mock annotator


def test_mock_noise_zero_returns_truth(maneuver_scenarios):
    for s, expected in maneuver_scenarios:
        assert mock_oracle(s, NoiseConfig(0.0)).intentions[0] is expected


def test_mock_is_deterministic_and_wrong_at_noise_one(maneuver_scenarios):
    for s, expected in maneuver_scenarios[:12]:
        a = mock_oracle(s, NoiseConfig(1.0, seed=3))
        assert a == mock_oracle(s, NoiseConfig(1.0, seed=3))
        assert a.intentions[0] is not expected


def test_mock_record_uses_real_parser():
    s = simple_scenario()
    r = mock_record(s)
    assert r.status is QueryStatus.OK and r.parsed == parse_response(r.response_text, strict=True)


def test_mock_noise_rate():
    # first-intention accuracy should be 1 - noise within Monte-Carlo error
    base = straight_track()
    s0 = simple_scenario(agents=[base])
    gt = label_gt_intention(s0, "ego")
    cfg = NoiseConfig(0.17, seed=11)
    hits = sum(mock_oracle(simple_scenario(f"mc{i}", [base]), cfg).intentions[0] is gt for i in range(10_000))
    assert abs(hits / 10_000 - 0.83) <= 0.01
