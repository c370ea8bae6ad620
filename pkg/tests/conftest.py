import math

import numpy as np
import pytest

from trafficctx.scenario import AgentType, MapFeature, MapKind, Scenario, track_from_arrays
from trafficctx.synth import MANEUVERS, synth_scenario


def straight_track(agent_id="ego", agent_type=AgentType.VEHICLE, speed=5.0, heading=0.0, start=(0.0, 0.0), n=91):
    """Constant-speed straight mover whose frame 10 sits at ``start``."""
    d = np.array([math.cos(heading), math.sin(heading)])
    t = (np.arange(n) - 10) * 0.1
    xy = np.asarray(start, float)[None] + speed * t[:, None] * d[None]
    return track_from_arrays(agent_id, agent_type, xy, np.full(n, heading))


def simple_scenario(sid="s0", agents=None, features=()):
    agents = agents or [straight_track()]
    return Scenario(sid, tuple(agents), tuple(features), agents[0].agent_id)


def lane(fid, pts, turn=None):
    return MapFeature(fid, MapKind.LANE_CENTER, tuple((float(x), float(y)) for x, y in pts), turn)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def maneuver_scenarios():
    rng = np.random.default_rng(5)
    out = []
    for m in MANEUVERS:
        for direction in (1, -1):
            for t in AgentType:
                out.append(synth_scenario(f"{m}_{direction}_{t.value}", m, rng, t, direction, n_neighbors=3))
    return out


# acceptance verdicts, printed once at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
