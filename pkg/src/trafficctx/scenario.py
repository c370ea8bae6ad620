"""Scenario data model, JSON (de)serialization and ground-truth intention labels.

A scenario file holds one scene: map polylines plus agent tracks with an
11-frame history and an optional 80-frame future sampled at 10 Hz. All
coordinates live in the scenario's global frame (meters, radians, m/s).

Schema::

    {
      "scenario_id": str,
      "ego_agent_id": str,
      "agents": [
        {"agent_id": str, "agent_type": "VEHICLE" | "PEDESTRIAN" | "CYCLIST",
         "history": [{"x", "y", "heading", "vx", "vy", "valid"} x 11],
         "future":  [ ... x 80 ]  (or [] when absent)}
      ],
      "map": [
        {"feature_id": str, "kind": "LANE_CENTER" | "ROAD_EDGE" | "CROSSWALK",
         "polyline": [[x, y], ...],
         "lane_turn_type": "STRAIGHT_LANE" | ... (optional, lanes only),
         "closed": bool (optional, crosswalks only)}
      ]
    }
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

HISTORY_FRAMES = 11
FUTURE_FRAMES = 80
CURRENT_INDEX = HISTORY_FRAMES - 1
DT = 0.1


class SchemaError(ValueError):
    """Scenario content does not follow the documented schema."""


class MissingFuture(ValueError):
    """An operation needs a future trajectory the agent does not have."""


class AgentType(str, enum.Enum):
    VEHICLE = "VEHICLE"
    PEDESTRIAN = "PEDESTRIAN"
    CYCLIST = "CYCLIST"


class MapKind(str, enum.Enum):
    LANE_CENTER = "LANE_CENTER"
    ROAD_EDGE = "ROAD_EDGE"
    CROSSWALK = "CROSSWALK"


class LaneTurnType(str, enum.Enum):
    STRAIGHT_LANE = "STRAIGHT_LANE"
    LEFT_TURN_LANE = "LEFT_TURN_LANE"
    RIGHT_TURN_LANE = "RIGHT_TURN_LANE"
    U_TURN_LANE = "U_TURN_LANE"


class IntentionLabel(str, enum.Enum):
    STATIONARY = "STATIONARY"
    STRAIGHT = "STRAIGHT"
    STRAIGHT_LEFT = "STRAIGHT_LEFT"
    STRAIGHT_RIGHT = "STRAIGHT_RIGHT"
    LEFT_TURN = "LEFT_TURN"
    RIGHT_TURN = "RIGHT_TURN"
    LEFT_U_TURN = "LEFT_U_TURN"
    RIGHT_U_TURN = "RIGHT_U_TURN"

    @property
    def word(self) -> str:
        """Human/LLM-facing spelling, e.g. ``Left-U-Turn``."""
        return "-".join(p.capitalize() for p in self.value.split("_"))


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return math.pi - ((math.pi - a) % (2.0 * math.pi))


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    vx: float
    vy: float
    valid: bool = True

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class AgentTrack:
    agent_id: str
    agent_type: AgentType
    history: tuple[AgentState, ...]
    future: tuple[AgentState, ...] = ()

    @property
    def current(self) -> AgentState:
        return self.history[CURRENT_INDEX]

    @property
    def has_future(self) -> bool:
        return len(self.future) == FUTURE_FRAMES


@dataclass(frozen=True)
class MapFeature:
    feature_id: str
    kind: MapKind
    polyline: tuple[tuple[float, float], ...]
    lane_turn_type: LaneTurnType | None = None
    closed: bool = False


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    agents: tuple[AgentTrack, ...]
    map: tuple[MapFeature, ...] = ()
    ego_agent_id: str = ""

    def agent(self, agent_id: str) -> AgentTrack:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)

    @property
    def ego(self) -> AgentTrack:
        return self.agent(self.ego_agent_id)

    def replace_agents(self, agents: Iterable[AgentTrack]) -> "Scenario":
        return Scenario(self.scenario_id, tuple(agents), self.map, self.ego_agent_id)


# ---------------------------------------------------------------------------
# validation


def _check_number(v: Any, what: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"{what}: expected a number, got {v!r}")
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"{what}: non-finite value {v!r}")
    return v


def _check_state(st: AgentState, what: str) -> None:
    for name in ("x", "y", "heading", "vx", "vy"):
        v = getattr(st, name)
        if not math.isfinite(v):
            raise ValueError(f"{what}: non-finite {name}")
    if not (-math.pi < st.heading <= math.pi):
        raise ValueError(f"{what}: heading {st.heading!r} outside (-pi, pi]")


def validate_scenario(s: Scenario) -> Scenario:
    """Check every type invariant, raising SchemaError/ValueError on the first violation."""
    ids = [a.agent_id for a in s.agents]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{s.scenario_id}: duplicate agent ids")
    if ids.count(s.ego_agent_id) != 1:
        raise SchemaError(f"{s.scenario_id}: ego agent {s.ego_agent_id!r} not among agents")
    for a in s.agents:
        if len(a.history) != HISTORY_FRAMES:
            raise SchemaError(
                f"agent {a.agent_id!r}: history has {len(a.history)} frames, expected {HISTORY_FRAMES}"
            )
        if len(a.future) not in (0, FUTURE_FRAMES):
            raise SchemaError(
                f"agent {a.agent_id!r}: future has {len(a.future)} frames, expected {FUTURE_FRAMES}"
            )
        for i, st in enumerate(a.history):
            _check_state(st, f"agent {a.agent_id!r} history[{i}]")
        for i, st in enumerate(a.future):
            _check_state(st, f"agent {a.agent_id!r} future[{i}]")
    if not s.ego.current.valid:
        raise SchemaError(f"ego agent {s.ego_agent_id!r}: current state is not valid")
    for f in s.map:
        if len(f.polyline) < 2:
            raise SchemaError(f"map feature {f.feature_id!r}: polyline needs >= 2 points")
        for p in f.polyline:
            if not all(math.isfinite(c) for c in p):
                raise ValueError(f"map feature {f.feature_id!r}: non-finite coordinate")
        if f.lane_turn_type is not None and f.kind is not MapKind.LANE_CENTER:
            raise SchemaError(f"map feature {f.feature_id!r}: lane_turn_type on a {f.kind.value}")
        if f.kind is MapKind.CROSSWALK and not f.closed and f.polyline[0] != f.polyline[-1]:
            raise SchemaError(f"crosswalk {f.feature_id!r}: polygon is not closed")
    return s


# ---------------------------------------------------------------------------
# JSON


def _req(obj: dict, key: str, what: str) -> Any:
    if not isinstance(obj, dict):
        raise SchemaError(f"{what}: expected an object")
    if key not in obj:
        raise SchemaError(f"{what}: missing field {key!r}")
    return obj[key]


def _enum(cls, v: Any, what: str):
    try:
        return cls(v)
    except ValueError:
        raise SchemaError(f"{what}: unknown value {v!r}") from None


def _state_from_json(d: Any, what: str) -> AgentState:
    valid = _req(d, "valid", what)
    if not isinstance(valid, bool):
        raise SchemaError(f"{what}: 'valid' must be a boolean")
    return AgentState(
        x=_check_number(_req(d, "x", what), f"{what}.x"),
        y=_check_number(_req(d, "y", what), f"{what}.y"),
        heading=_check_number(_req(d, "heading", what), f"{what}.heading"),
        vx=_check_number(_req(d, "vx", what), f"{what}.vx"),
        vy=_check_number(_req(d, "vy", what), f"{what}.vy"),
        valid=valid,
    )


def scenario_from_dict(d: dict) -> Scenario:
    sid = _req(d, "scenario_id", "scenario")
    agents = []
    for i, ad in enumerate(_req(d, "agents", sid)):
        aid = _req(ad, "agent_id", f"{sid} agents[{i}]")
        hist = _req(ad, "history", f"agent {aid!r}")
        fut = ad.get("future", [])
        if not isinstance(hist, list) or len(hist) != HISTORY_FRAMES:
            n = len(hist) if isinstance(hist, list) else "?"
            raise SchemaError(f"agent {aid!r}: history has {n} frames, expected {HISTORY_FRAMES}")
        if not isinstance(fut, list) or len(fut) not in (0, FUTURE_FRAMES):
            n = len(fut) if isinstance(fut, list) else "?"
            raise SchemaError(f"agent {aid!r}: future has {n} frames, expected {FUTURE_FRAMES}")
        agents.append(
            AgentTrack(
                agent_id=aid,
                agent_type=_enum(AgentType, _req(ad, "agent_type", f"agent {aid!r}"), f"agent {aid!r}"),
                history=tuple(_state_from_json(h, f"agent {aid!r} history[{j}]") for j, h in enumerate(hist)),
                future=tuple(_state_from_json(h, f"agent {aid!r} future[{j}]") for j, h in enumerate(fut)),
            )
        )
    feats = []
    for i, fd in enumerate(d.get("map", [])):
        fid = _req(fd, "feature_id", f"{sid} map[{i}]")
        pts = _req(fd, "polyline", f"map feature {fid!r}")
        try:
            poly = tuple(
                (_check_number(p[0], f"{fid}.x"), _check_number(p[1], f"{fid}.y"))
                for p in pts if len(p) == 2
            )
        except TypeError:
            raise SchemaError(f"map feature {fid!r}: polyline points must be [x, y]") from None
        if len(poly) != len(pts):
            raise SchemaError(f"map feature {fid!r}: polyline points must be [x, y]")
        ltt = fd.get("lane_turn_type")
        feats.append(
            MapFeature(
                feature_id=fid,
                kind=_enum(MapKind, _req(fd, "kind", f"map feature {fid!r}"), f"map feature {fid!r}"),
                polyline=poly,
                lane_turn_type=None if ltt is None else _enum(LaneTurnType, ltt, f"map feature {fid!r}"),
                closed=bool(fd.get("closed", False)),
            )
        )
    s = Scenario(
        scenario_id=sid,
        agents=tuple(agents),
        map=tuple(feats),
        ego_agent_id=_req(d, "ego_agent_id", sid),
    )
    return validate_scenario(s)


def parse_scenario(data: bytes | str) -> Scenario:
    """Parse scenario-file content into a validated :class:`Scenario`."""
    try:
        d = json.loads(data)
    except json.JSONDecodeError as e:
        raise SchemaError(f"not valid JSON: {e}") from None
    if not isinstance(d, dict):
        raise SchemaError("top level must be an object")
    return scenario_from_dict(d)


def _state_to_json(st: AgentState) -> dict:
    return {"x": st.x, "y": st.y, "heading": st.heading, "vx": st.vx, "vy": st.vy, "valid": st.valid}


def scenario_to_dict(s: Scenario) -> dict:
    feats = []
    for f in s.map:
        fd: dict[str, Any] = {
            "feature_id": f.feature_id,
            "kind": f.kind.value,
            "polyline": [[x, y] for x, y in f.polyline],
        }
        if f.lane_turn_type is not None:
            fd["lane_turn_type"] = f.lane_turn_type.value
        if f.closed:
            fd["closed"] = True
        feats.append(fd)
    return {
        "scenario_id": s.scenario_id,
        "ego_agent_id": s.ego_agent_id,
        "agents": [
            {
                "agent_id": a.agent_id,
                "agent_type": a.agent_type.value,
                "history": [_state_to_json(h) for h in a.history],
                "future": [_state_to_json(h) for h in a.future],
            }
            for a in s.agents
        ],
        "map": feats,
    }


def serialize_scenario(s: Scenario) -> bytes:
    return json.dumps(scenario_to_dict(s), separators=(",", ":")).encode("utf-8")


# ---------------------------------------------------------------------------
# ground-truth intention


@dataclass(frozen=True)
class IntentionThresholds:
    stationary_displacement: float = 2.0  # m
    stationary_speed: float = 0.5  # m/s
    u_turn_deg: float = 135.0
    turn_deg: float = 30.0
    lane_change_lateral: float = 3.5  # m, one lane width


def _valid_path(track: AgentTrack) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Times, positions and headings of the current state followed by valid future states."""
    states = [track.current] + list(track.future)
    keep = [i for i, st in enumerate(states) if st.valid]
    t = np.array(keep, dtype=float) * DT
    xy = np.array([(states[i].x, states[i].y) for i in keep], dtype=float)
    h = np.array([states[i].heading for i in keep], dtype=float)
    return t, xy, h


def intention_features(track: AgentTrack) -> dict[str, float]:
    """Heading change, start-frame lateral offset, displacement and peak speed over the future."""
    if not track.has_future or not track.future[-1].valid:
        raise MissingFuture(f"agent {track.agent_id!r}: no valid future endpoint")
    if not track.current.valid:
        raise MissingFuture(f"agent {track.agent_id!r}: current state invalid")
    t, xy, h = _valid_path(track)
    d = xy[-1] - xy[0]
    h0 = h[0]
    lateral = -math.sin(h0) * d[0] + math.cos(h0) * d[1]
    # accumulated (unwrapped) heading change keeps U-turn direction unambiguous
    dh = float(np.sum([wrap_angle(b - a) for a, b in zip(h[:-1], h[1:])]))
    step = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    peak = float(np.max(step / np.diff(t))) if len(step) else 0.0
    return {
        "delta_heading": dh,
        "lateral": float(lateral),
        "displacement": float(math.hypot(d[0], d[1])),
        "peak_speed": peak,
    }


def label_gt_intention(
    s: Scenario, agent_id: str, thresholds: IntentionThresholds = IntentionThresholds()
) -> IntentionLabel:
    """Classify an agent's future into one of the eight intention labels.

    Peak speed comes from finite differences of consecutive valid positions,
    so a future that never moves is always STATIONARY.
    """
    f = intention_features(s.agent(agent_id))
    th = thresholds
    if f["displacement"] < th.stationary_displacement and f["peak_speed"] < th.stationary_speed:
        return IntentionLabel.STATIONARY
    dh = math.degrees(f["delta_heading"])
    if abs(dh) > th.u_turn_deg:
        return IntentionLabel.LEFT_U_TURN if dh > 0 else IntentionLabel.RIGHT_U_TURN
    if abs(dh) > th.turn_deg:
        return IntentionLabel.LEFT_TURN if dh > 0 else IntentionLabel.RIGHT_TURN
    if abs(f["lateral"]) > th.lane_change_lateral:
        return IntentionLabel.STRAIGHT_LEFT if f["lateral"] > 0 else IntentionLabel.STRAIGHT_RIGHT
    return IntentionLabel.STRAIGHT


# ---------------------------------------------------------------------------
# geometry helpers shared by other modules


def transform_scenario(s: Scenario, angle: float, tx: float = 0.0, ty: float = 0.0) -> Scenario:
    """Rotate every coordinate, velocity and heading by ``angle`` then translate by (tx, ty)."""
    c, sn = math.cos(angle), math.sin(angle)

    def tp(x: float, y: float) -> tuple[float, float]:
        return (c * x - sn * y + tx, sn * x + c * y + ty)

    def ts(st: AgentState) -> AgentState:
        x, y = tp(st.x, st.y)
        return AgentState(
            x, y, wrap_angle(st.heading + angle), c * st.vx - sn * st.vy, sn * st.vx + c * st.vy, st.valid
        )

    agents = tuple(
        AgentTrack(a.agent_id, a.agent_type, tuple(ts(h) for h in a.history), tuple(ts(h) for h in a.future))
        for a in s.agents
    )
    feats = tuple(
        MapFeature(f.feature_id, f.kind, tuple(tp(*p) for p in f.polyline), f.lane_turn_type, f.closed)
        for f in s.map
    )
    return Scenario(s.scenario_id, agents, feats, s.ego_agent_id)


def constant_state(x: float, y: float, heading: float, vx: float = 0.0, vy: float = 0.0) -> AgentState:
    return AgentState(float(x), float(y), wrap_angle(float(heading)), float(vx), float(vy), True)


def track_from_arrays(
    agent_id: str,
    agent_type: AgentType,
    xy: Sequence[Sequence[float]],
    heading: Sequence[float],
    valid: Sequence[bool] | None = None,
) -> AgentTrack:
    """Build a track from 11 (history only) or 91 (history + future) poses; velocities by differencing."""
    xy = np.asarray(xy, dtype=float)
    heading = np.asarray(heading, dtype=float)
    n = len(xy)
    if n not in (HISTORY_FRAMES, HISTORY_FRAMES + FUTURE_FRAMES):
        raise SchemaError(f"agent {agent_id!r}: need 11 or 91 poses, got {n}")
    if valid is None:
        valid = [True] * n
    vel = np.zeros_like(xy)
    if n > 1:
        vel[1:] = np.diff(xy, axis=0) / DT
        vel[0] = vel[1]
    states = tuple(
        AgentState(float(xy[i, 0]), float(xy[i, 1]), wrap_angle(float(heading[i])),
                   float(vel[i, 0]), float(vel[i, 1]), bool(valid[i]))
        for i in range(n)
    )
    return AgentTrack(agent_id, agent_type, states[:HISTORY_FRAMES], states[HISTORY_FRAMES:])


__all__ = [
    "AgentState", "AgentTrack", "AgentType", "DT", "FUTURE_FRAMES", "HISTORY_FRAMES",
    "IntentionLabel", "IntentionThresholds", "LaneTurnType", "MapFeature", "MapKind",
    "MissingFuture", "Scenario", "SchemaError", "constant_state", "intention_features",
    "label_gt_intention", "parse_scenario", "scenario_from_dict", "scenario_to_dict",
    "serialize_scenario", "track_from_arrays", "transform_scenario", "validate_scenario",
    "wrap_angle",
]
