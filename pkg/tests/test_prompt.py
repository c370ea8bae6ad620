import json
import math
from pathlib import Path

import numpy as np
import pytest

from trafficctx.context import ContextVocabulary
from trafficctx.prompt import (
    NoLaneFound,
    PromptTemplate,
    TemplateError,
    build_tcgp,
    build_text_prompt,
    classify_lane_turn,
    compass_sector,
    detect_lane_type,
    load_template,
    summarize_neighbors,
)
from trafficctx.render import RenderConfig, crop_scenario
from trafficctx.scenario import AgentType, LaneTurnType
from trafficctx.synth import synth_scenario

from conftest import lane, simple_scenario, straight_track

DATA = Path(__file__).parent / "data"


def _arc(total_deg, radius=10.0, n=20):
    ang = np.radians(np.linspace(0, total_deg, n))
    sign = 1 if total_deg >= 0 else -1
    # start at the origin heading +x, curving left for positive angles
    return np.stack([radius * np.sin(np.abs(ang)), sign * radius * (1 - np.cos(ang))], axis=1)


@pytest.mark.parametrize("deg,expected", [
    (0, LaneTurnType.STRAIGHT_LANE),
    (15, LaneTurnType.STRAIGHT_LANE),
    (90, LaneTurnType.LEFT_TURN_LANE),
    (-90, LaneTurnType.RIGHT_TURN_LANE),
    (180, LaneTurnType.U_TURN_LANE),
    (-170, LaneTurnType.U_TURN_LANE),
])
def test_classify_lane_turn(deg, expected):
    poly = _arc(deg) if deg else np.array([[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]])
    assert classify_lane_turn(poly) is expected


def test_detect_prefers_aligned_lane():
    ego = straight_track(heading=0.0).current
    aligned = lane("a", [(-10, 1.5), (10, 1.5)])
    opposite = lane("b", [(10, 0.5), (-10, 0.5)])  # closer but pointing the other way
    assert detect_lane_type([opposite, aligned], ego) == (LaneTurnType.STRAIGHT_LANE, "a")


def test_detect_uses_supplied_turn_type():
    ego = straight_track(heading=0.0).current
    f = lane("l", [(-10, 0), (10, 0)], LaneTurnType.LEFT_TURN_LANE)
    assert detect_lane_type([f], ego) == (LaneTurnType.LEFT_TURN_LANE, "l")


def test_detect_classifies_downstream_geometry():
    ego = straight_track(heading=0.0).current
    pts = np.concatenate([[[-10.0, 0.0]], _arc(90)])
    assert detect_lane_type([lane("c", pts)], ego)[0] is LaneTurnType.LEFT_TURN_LANE


def test_no_lane_found():
    ego = straight_track().current
    with pytest.raises(NoLaneFound):
        detect_lane_type([lane("far", [(0, 50), (10, 50)])], ego)


def test_lane_sentence_omitted_without_lane():
    tmpl = load_template()
    text = build_text_prompt(simple_scenario(), tmpl)
    assert "lane." not in text
    assert "\n\n\n\n" not in text


@pytest.mark.parametrize("x,y,sector", [(0, 1, "N"), (1, 1, "NE"), (1, 0, "E"), (0, -1, "S"), (-1, 0, "W"), (-1, 1, "NW")])
def test_compass(x, y, sector):
    assert compass_sector(x, y) == sector


def test_golden_prompt_text():
    s, _ = synth_scenario("golden", "left_turn", np.random.default_rng(42), AgentType.VEHICLE, 1, n_neighbors=5)
    assert build_text_prompt(s, load_template()) == (DATA / "golden_left_turn_prompt.txt").read_text(encoding="utf-8")


def test_text_labels_match_image_labels():
    rng = np.random.default_rng(3)
    for i in range(10):
        s, _ = synth_scenario(f"c{i}", "straight", rng, AgentType.VEHICLE, 1, n_neighbors=8)
        t = build_tcgp(s, load_template())
        summaries = summarize_neighbors(crop_scenario(s, RenderConfig()), 8)
        assert [lb.label for lb in t.layout.labels] == [n.label for n in summaries]
        for n in summaries:
            assert f"Agent {n.label}: {n.agent_type.value.lower()}" in t.text


def test_neighbor_cap():
    ego = straight_track(heading=math.pi / 2)
    others = [straight_track(f"n{i}", start=(2.0 * i + 3, 0.0), speed=0.0) for i in range(12)]
    s = simple_scenario(agents=[ego] + others)
    assert len(summarize_neighbors(crop_scenario(s, RenderConfig()), 8)) == 8


def test_speed_and_type_in_text():
    s = simple_scenario(agents=[straight_track(agent_type=AgentType.CYCLIST, speed=4.25)])
    text = build_text_prompt(s, load_template())
    assert "cyclist moving at 4.2 m/s" in text or "cyclist moving at 4.3 m/s" in text
    for w in ContextVocabulary().affordance_words:
        assert w in text


def test_template_validation():
    base = load_template()
    with pytest.raises(TemplateError, match="lacks"):
        PromptTemplate("{ego_type}")
    with pytest.raises(TemplateError, match="unknown"):
        PromptTemplate(base.caption_template + "{mystery}")
    with pytest.raises(TemplateError, match="error analysis"):
        PromptTemplate(base.caption_template, negative_examples=(("bad answer", "  "),))


def test_custom_template_with_sidecar(tmp_path):
    body = "{ego_type} {ego_speed}\n{lane_rule}\n{neighbors}\n{positive_examples}\n{negative_examples}\n{output_instructions}\n"
    (tmp_path / "t.txt").write_text(body, encoding="utf-8")
    (tmp_path / "t.json").write_text(json.dumps({
        "positive_examples": ["P1", "P2", "P3"], "max_positive": 1,
        "negative_examples": [{"text": "N1", "error_analysis": "why"}],
    }), encoding="utf-8")
    tmpl = load_template(tmp_path / "t.txt")
    assert tmpl.positive_examples == ("P1",)
    text = build_text_prompt(simple_scenario(), tmpl)
    assert "P1" in text and "P2" not in text and "Error analysis: why" in text
    with pytest.raises(TemplateError):
        load_template(tmp_path / "missing.txt")
