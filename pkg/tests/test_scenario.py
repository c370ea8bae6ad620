import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficctx.scenario import (
    AgentType,
    IntentionLabel,
    MapFeature,
    MapKind,
    MissingFuture,
    SchemaError,
    label_gt_intention,
    parse_scenario,
    scenario_to_dict,
    serialize_scenario,
    track_from_arrays,
    transform_scenario,
    wrap_angle,
)
from trafficctx.synth import synth_fixtures, synth_scenario

from conftest import simple_scenario, straight_track


def test_roundtrip_is_byte_stable(maneuver_scenarios):
    for s, _ in maneuver_scenarios[:6]:
        data = serialize_scenario(s)
        again = parse_scenario(data)
        assert again == s
        assert serialize_scenario(again) == data


def test_wrong_history_length_names_agent():
    d = scenario_to_dict(simple_scenario())
    d["agents"][0]["history"] = d["agents"][0]["history"][:10]
    with pytest.raises(SchemaError, match="'ego'"):
        parse_scenario(json.dumps(d))


def test_nan_coordinate_rejected():
    d = scenario_to_dict(simple_scenario())
    text = json.dumps(d).replace('"x": 0.0', '"x": NaN', 1)
    with pytest.raises(ValueError):
        parse_scenario(text)


def test_open_crosswalk_rejected():
    poly = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0))
    s = simple_scenario(features=[MapFeature("cw", MapKind.CROSSWALK, poly)])
    with pytest.raises(SchemaError, match="closed"):
        parse_scenario(serialize_scenario(s))
    closed = simple_scenario(features=[MapFeature("cw", MapKind.CROSSWALK, poly + (poly[0],))])
    assert parse_scenario(serialize_scenario(closed)).map[0].kind is MapKind.CROSSWALK


def test_missing_ego_and_bad_json():
    d = scenario_to_dict(simple_scenario())
    d["ego_agent_id"] = "nobody"
    with pytest.raises(SchemaError):
        parse_scenario(json.dumps(d))
    with pytest.raises(SchemaError):
        parse_scenario(b"{not json")


def test_stationary_and_straight_labels():
    still = simple_scenario(agents=[straight_track(speed=0.0)])
    assert label_gt_intention(still, "ego") is IntentionLabel.STATIONARY
    moving = simple_scenario(agents=[straight_track(speed=5.0)])
    assert label_gt_intention(moving, "ego") is IntentionLabel.STRAIGHT


def test_history_only_agent_has_no_label():
    s = simple_scenario(agents=[straight_track(n=11)])
    with pytest.raises(MissingFuture):
        label_gt_intention(s, "ego")


def test_generator_and_labeler_agree(maneuver_scenarios):
    for s, expected in maneuver_scenarios:
        assert label_gt_intention(s, s.ego_agent_id) is expected, s.scenario_id


def test_labels_survive_rigid_transforms(maneuver_scenarios, rng):
    for s, expected in maneuver_scenarios:
        moved = transform_scenario(s, float(rng.uniform(-math.pi, math.pi)), *rng.uniform(-1e3, 1e3, 2))
        assert label_gt_intention(moved, "ego") is expected


def test_synth_fixtures_seeded(tmp_path):
    a = synth_fixtures(8, seed=3)
    b = synth_fixtures(8, seed=3, out_dir=tmp_path)
    assert [serialize_scenario(s) for s, _ in a] == [serialize_scenario(s) for s, _ in b]
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted(f"{s.scenario_id}.json" for s, _ in a)
    with pytest.raises(ValueError):
        synth_fixtures(0)


def test_synth_neighbor_counts_in_range():
    counts = {len(s.agents) - 1 for s, _ in synth_fixtures(60, seed=9)}
    assert counts <= set(range(9)) and len(counts) > 3


def test_track_from_arrays_velocity():
    xy = np.stack([np.arange(11) * 0.5, np.zeros(11)], axis=1)
    tr = track_from_arrays("a", AgentType.CYCLIST, xy, np.zeros(11))
    assert tr.current.vx == pytest.approx(5.0)
    assert not tr.has_future


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["straight", "left_turn", "right_turn", "u_turn", "stationary", "lane_change"]),
       st.sampled_from([1, -1]), st.integers(0, 2**31 - 1))
def test_generated_labels_property(maneuver, direction, seed):
    s, expected = synth_scenario("p", maneuver, np.random.default_rng(seed), AgentType.VEHICLE, direction)
    assert label_gt_intention(s, "ego") is expected
