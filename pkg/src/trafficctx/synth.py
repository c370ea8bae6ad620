"""Parametric scenario generator: a four-way intersection plus an ego maneuver with a known label."""
from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np

from .scenario import (
    DT,
    FUTURE_FRAMES,
    HISTORY_FRAMES,
    AgentType,
    IntentionLabel,
    MapFeature,
    MapKind,
    Scenario,
    serialize_scenario,
    track_from_arrays,
    transform_scenario,
)

MANEUVERS = ("straight", "left_turn", "right_turn", "u_turn", "stationary", "lane_change")

LANE_W = 3.5
ROAD_HALF = 2 * LANE_W  # two lanes each way
TYPE_SPEEDS = {AgentType.VEHICLE: (6.0, 12.0), AgentType.CYCLIST: (3.0, 6.0), AgentType.PEDESTRIAN: (1.2, 1.8)}


def _integrate(v: float, heading_of_s, start: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Integrate a path at constant speed where heading is a function of arc length."""
    xy = np.zeros((n, 2))
    hd = np.zeros(n)
    p = start.astype(float).copy()
    s = 0.0
    sub = 10
    for i in range(n):
        xy[i] = p
        hd[i] = heading_of_s(s)
        for _ in range(sub):
            h = heading_of_s(s)
            p = p + (v * DT / sub) * np.array([math.cos(h), math.sin(h)])
            s += v * DT / sub
    return xy, hd


def _ego_path(maneuver: str, direction: int, agent_type: AgentType, rng: np.random.Generator):
    """91 poses in the local frame; the ego's current pose is frame 10 heading north."""
    lo, hi = TYPE_SPEEDS[agent_type]
    v = 0.0 if maneuver == "stationary" else float(rng.uniform(lo, hi))
    h0 = math.pi / 2
    travel = v * FUTURE_FRAMES * DT
    d0 = min(15.0, 0.25 * travel)
    avail = max(travel - d0 - 0.1 * travel, 1e-6)
    s_hist = v * (HISTORY_FRAMES - 1) * DT

    if maneuver in ("left_turn", "right_turn", "u_turn"):
        total = {"left_turn": math.pi / 2, "right_turn": -math.pi / 2}.get(maneuver, direction * math.pi)
        radius = min(8.0 if maneuver != "right_turn" else 6.0, avail / abs(total))
        arc = radius * abs(total)

        def heading(s):
            u = s - s_hist - d0
            return h0 + total * min(max(u / arc, 0.0), 1.0)
    elif maneuver == "lane_change":
        length = min(30.0, avail)
        amp = direction * 2.0 * LANE_W

        def heading(s):
            u = s - s_hist - d0
            if u <= 0 or u >= length:
                return h0
            return h0 + math.atan(amp * math.pi / (2 * length) * math.sin(math.pi * u / length))
    else:

        def heading(s):
            return h0

    start = np.array([LANE_W / 2 if agent_type is not AgentType.PEDESTRIAN else ROAD_HALF + 1.5, -20.0 - s_hist])
    return _integrate(v, heading, start, HISTORY_FRAMES + FUTURE_FRAMES)


def _expected_label(maneuver: str, direction: int) -> IntentionLabel:
    if maneuver == "straight":
        return IntentionLabel.STRAIGHT
    if maneuver == "left_turn":
        return IntentionLabel.LEFT_TURN
    if maneuver == "right_turn":
        return IntentionLabel.RIGHT_TURN
    if maneuver == "u_turn":
        return IntentionLabel.LEFT_U_TURN if direction > 0 else IntentionLabel.RIGHT_U_TURN
    if maneuver == "stationary":
        return IntentionLabel.STATIONARY
    return IntentionLabel.STRAIGHT_LEFT if direction > 0 else IntentionLabel.STRAIGHT_RIGHT


def _line(a, b, step: float = 2.0) -> tuple[tuple[float, float], ...]:
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(int(math.ceil(np.linalg.norm(b - a) / step)), 1)
    return tuple((float(x), float(y)) for x, y in (a + (b - a) * t for t in np.linspace(0, 1, n + 1)))


def intersection_map(ego_lane: tuple[tuple[float, float], ...] | None = None, extent: float = 90.0) -> list[MapFeature]:
    """Cross intersection at the origin: 2 lanes per direction on both roads, edges and 4 crosswalks."""
    feats: list[MapFeature] = []
    e = extent
    k = 0
    for off in (LANE_W / 2, 1.5 * LANE_W):
        lanes = [
            ((off, -e), (off, e)),  # northbound
            ((-off, e), (-off, -e)),  # southbound
            ((-e, -off), (e, -off)),  # eastbound
            ((e, off), (-e, off)),  # westbound
        ]
        for j, (a, b) in enumerate(lanes):
            if ego_lane is not None and j == 0 and off == LANE_W / 2:
                continue
            feats.append(MapFeature(f"lane{k}", MapKind.LANE_CENTER, _line(a, b, 4.0)))
            k += 1
    if ego_lane is not None:
        feats.append(MapFeature("ego_lane", MapKind.LANE_CENTER, ego_lane))
    r = ROAD_HALF
    edges = [
        ((r, -e), (r, -r)), ((r, r), (r, e)), ((-r, -e), (-r, -r)), ((-r, r), (-r, e)),
        ((-e, r), (-r, r)), ((r, r), (e, r)), ((-e, -r), (-r, -r)), ((r, -r), (e, -r)),
    ]
    for i, (a, b) in enumerate(edges):
        feats.append(MapFeature(f"edge{i}", MapKind.ROAD_EDGE, _line(a, b, 4.0)))
    cw = 3.0
    for i, (cx, cy, horiz) in enumerate([(0, -r - 2, True), (0, r + 2, True), (-r - 2, 0, False), (r + 2, 0, False)]):
        if horiz:
            poly = ((cx - r, cy - cw / 2), (cx + r, cy - cw / 2), (cx + r, cy + cw / 2), (cx - r, cy + cw / 2))
        else:
            poly = ((cx - cw / 2, cy - r), (cx + cw / 2, cy - r), (cx + cw / 2, cy + r), (cx - cw / 2, cy + r))
        poly = tuple((float(x), float(y)) for x, y in poly)
        feats.append(MapFeature(f"crosswalk{i}", MapKind.CROSSWALK, poly + (poly[0],)))
    return feats


def _neighbor(rng: np.random.Generator, idx: int):
    atype = AgentType(rng.choice([t.value for t in AgentType], p=[0.6, 0.2, 0.2]))
    road = int(rng.integers(4))
    lane = LANE_W / 2 if rng.random() < 0.5 else 1.5 * LANE_W
    along = float(rng.uniform(-50, 50))
    heading = [math.pi / 2, -math.pi / 2, 0.0, math.pi][road]
    lateral = [lane, -lane, -lane, lane][road]
    if road < 2:
        p = np.array([lateral, along])
    else:
        p = np.array([along, lateral])
    if atype is AgentType.PEDESTRIAN:
        p = p + np.array([ROAD_HALF + 1.0, 0.0]) * (1 if rng.random() < 0.5 else -1)
    lo, hi = TYPE_SPEEDS[atype]
    v = 0.0 if rng.random() < 0.15 else float(rng.uniform(lo, hi))
    d = np.array([math.cos(heading), math.sin(heading)])
    t = (np.arange(HISTORY_FRAMES + FUTURE_FRAMES) - (HISTORY_FRAMES - 1)) * DT
    xy = p[None, :] + v * t[:, None] * d[None, :]
    return track_from_arrays(f"n{idx}", atype, xy, np.full(len(t), heading))


def synth_scenario(
    scenario_id: str,
    maneuver: str,
    rng: np.random.Generator,
    agent_type: AgentType = AgentType.VEHICLE,
    direction: int = 1,
    n_neighbors: int = 3,
    with_map: bool = True,
    rigid: bool = True,
) -> tuple[Scenario, IntentionLabel]:
    """One scenario and the label its ego maneuver was built to have."""
    if maneuver not in MANEUVERS:
        raise ValueError(f"unknown maneuver {maneuver!r}")
    xy, hd = _ego_path(maneuver, direction, agent_type, rng)
    ego = track_from_arrays("ego", agent_type, xy, hd)
    feats: list[MapFeature] = []
    if with_map:
        if maneuver in ("lane_change", "stationary"):
            lane = _line(xy[0], xy[0] + np.array([0.0, 120.0]), 2.0)
        else:
            back = xy[0] - np.array([0.0, 10.0])
            lane = (tuple(float(c) for c in back),) + tuple((float(x), float(y)) for x, y in xy[::5])
            if np.hypot(*(xy[-1] - xy[0])) < 1.0:
                lane = _line(xy[0], xy[0] + np.array([0.0, 60.0]), 2.0)
        feats = intersection_map(lane)
    agents = [ego] + [_neighbor(rng, i) for i in range(n_neighbors)]
    s = Scenario(scenario_id, tuple(agents), tuple(feats), "ego")
    if rigid:
        s = transform_scenario(s, float(rng.uniform(-math.pi, math.pi)), *map(float, rng.uniform(-500, 500, 2)))
    return s, _expected_label(maneuver, direction)


def synth_fixtures(n: int, seed: int = 0, out_dir: str | os.PathLike | None = None) -> list[tuple[Scenario, IntentionLabel]]:
    """``n`` scenarios cycling through every maneuver, with 0-8 neighbors each.

    When ``out_dir`` is given each scenario is also written there as
    ``<scenario_id>.json``.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        maneuver = MANEUVERS[i % len(MANEUVERS)]
        direction = 1 if (i // len(MANEUVERS)) % 2 == 0 else -1
        atype = AgentType(rng.choice([t.value for t in AgentType], p=[0.6, 0.2, 0.2]))
        out.append(
            synth_scenario(
                f"synth_{seed}_{i:05d}", maneuver, rng, atype, direction, n_neighbors=int(rng.integers(0, 9))
            )
        )
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        for s, _ in out:
            (d / f"{s.scenario_id}.json").write_bytes(serialize_scenario(s))
    return out
