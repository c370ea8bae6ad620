"""Annotate a small split, then copy its contexts to the large split by nearest neighbor.

Feature vectors are built from rigid-transform invariant quantities so the
neighbor relation reflects maneuver similarity rather than map position.
"""
from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .llm import TransportationContext
from .prompt import NoLaneFound, detect_lane_type
from .render import RenderConfig
from .scenario import DT, HISTORY_FRAMES, AgentType, LaneTurnType, Scenario, wrap_angle


class NoValidHistory(ValueError):
    pass


class SizeMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


AGENT_TYPES = (AgentType.VEHICLE, AgentType.PEDESTRIAN, AgentType.CYCLIST)
LANE_TYPES = tuple(LaneTurnType)
FEATURE_BLOCKS = {
    "kinematics": slice(0, 3 * HISTORY_FRAMES),
    "agent_type": slice(33, 36),
    "lane_type": slice(36, 40),
    "neighbors": slice(40, 42),
}
FEATURE_DIM = 42
# coarse enough that a rigid transform never flips a rounded value in practice
FEATURE_QUANTUM = 1e-6
MIN_CURVATURE_SPEED = 0.1

ItemId = tuple[str, str]


def _impute(valid: np.ndarray) -> np.ndarray:
    """Index of the nearest valid frame for every frame (earlier frame wins ties)."""
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise NoValidHistory("agent has no valid history frame")
    frames = np.arange(len(valid))
    dist = np.abs(frames[:, None] - idx[None, :])
    return idx[np.argmin(dist, axis=1)]


def encode_features(
    s: Scenario,
    agent_id: str | None = None,
    render_cfg: RenderConfig = RenderConfig(),
    mask: Iterable[str] = (),
) -> np.ndarray:
    """42-dim feature vector: per-frame [speed, heading delta, curvature] x 11,
    agent-type one-hot, lane-turn one-hot, [neighbor count, mean neighbor distance].

    Blocks named in ``mask`` (keys of FEATURE_BLOCKS) are zeroed.
    """
    agent_id = s.ego_agent_id if agent_id is None else agent_id
    track = s.agent(agent_id)
    hist = track.history
    src = _impute(np.array([st.valid for st in hist]))
    speed = np.array([hist[j].speed for j in src])
    heading = np.array([hist[j].heading for j in src])
    dh = np.zeros(HISTORY_FRAMES)
    dh[1:] = [wrap_angle(heading[i] - heading[i - 1]) for i in range(1, HISTORY_FRAMES)]
    curv = np.where(speed > MIN_CURVATURE_SPEED, dh / (np.maximum(speed, MIN_CURVATURE_SPEED) * DT), 0.0)

    f = np.zeros(FEATURE_DIM)
    f[0:33] = np.stack([speed, dh, curv], axis=1).ravel()
    f[33 + AGENT_TYPES.index(track.agent_type)] = 1.0
    cur = hist[src[-1]]
    try:
        lane, _ = detect_lane_type(s.map, cur)
        f[36 + LANE_TYPES.index(lane)] = 1.0
    except NoLaneFound:
        pass
    radius = render_cfg.crop_side(track.agent_type) / 2
    dists = []
    for other in s.agents:
        if other.agent_id == agent_id or not other.current.valid:
            continue
        d = math.hypot(other.current.x - cur.x, other.current.y - cur.y)
        if d <= radius:
            dists.append(d)
    f[40] = len(dists)
    f[41] = float(np.mean(dists)) if dists else 0.0
    for name in mask:
        f[FEATURE_BLOCKS[name]] = 0.0
    f = np.round(f / FEATURE_QUANTUM) * FEATURE_QUANTUM
    return f + 0.0  # normalize -0.0


# ---------------------------------------------------------------------------
# split


@dataclass(frozen=True)
class DatasetSplit:
    T1: tuple[ItemId, ...]
    T2: tuple[ItemId, ...]

    def to_dict(self) -> dict:
        return {"T1": [list(x) for x in self.T1], "T2": [list(x) for x in self.T2]}


STRATA_RATIO = {AgentType.VEHICLE: 9, AgentType.PEDESTRIAN: 3, AgentType.CYCLIST: 3}


def target_size(n: int, fraction: float) -> int:
    """round-half-up of fraction * n, but at least one item from a non-empty set."""
    return max(1, int(math.floor(fraction * n + 0.5)))


def _largest_remainder(total: int, weights: dict, caps: dict) -> dict:
    """Apportion ``total`` by weights, never exceeding caps; overflow moves to types with room."""
    alloc = {k: 0 for k in weights}
    remaining = total
    active = [k for k in weights if caps[k] > 0 and weights[k] > 0]
    while remaining > 0 and active:
        wsum = sum(weights[k] for k in active)
        exact = {k: remaining * weights[k] / wsum for k in active}
        share = {k: int(math.floor(exact[k])) for k in active}
        left = remaining - sum(share.values())
        order = sorted(active, key=lambda k: (-(exact[k] - share[k]), list(weights).index(k)))
        for k in order[:left]:
            share[k] += 1
        for k in active:
            take = min(share[k], caps[k] - alloc[k])
            alloc[k] += take
            remaining -= take
        active = [k for k in active if alloc[k] < caps[k]]
    return alloc


def split_dataset(
    ids: Sequence[ItemId],
    fraction: float,
    seed: int = 0,
    types: Sequence[AgentType] | None = None,
    stratified: bool = False,
    ratio: dict = STRATA_RATIO,
) -> DatasetSplit:
    """Seeded split into (T1, T2) with |T2| = round(fraction * |T|).

    Stratified mode allots T2 across agent types by ``ratio`` (largest
    remainder, capped by what each type has). Both splits keep input order.
    """
    if not 0 < fraction < 0.5:
        raise ValueError(f"fraction must be in (0, 0.5), got {fraction}")
    ids = [tuple(x) for x in ids]
    if not ids:
        raise EmptyDataset("cannot split an empty dataset")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids")
    rng = np.random.default_rng(seed)
    n2 = target_size(len(ids), fraction)
    if stratified:
        if types is None or len(types) != len(ids):
            raise SizeMismatch("stratified split needs one agent type per id")
        by_type = {t: [i for i, ty in enumerate(types) if AgentType(ty) is t] for t in ratio}
        alloc = _largest_remainder(n2, dict(ratio), {t: len(v) for t, v in by_type.items()})
        chosen: list[int] = []
        for t in ratio:
            pool = by_type[t]
            if alloc[t]:
                chosen.extend(int(pool[j]) for j in rng.choice(len(pool), size=alloc[t], replace=False))
    else:
        chosen = [int(j) for j in rng.choice(len(ids), size=n2, replace=False)]
    pick = set(chosen)
    T2 = tuple(ids[i] for i in range(len(ids)) if i in pick)
    T1 = tuple(ids[i] for i in range(len(ids)) if i not in pick)
    return DatasetSplit(T1, T2)


# ---------------------------------------------------------------------------
# nearest neighbor


def _sqdist(f: np.ndarray, F2: np.ndarray) -> np.ndarray:
    """Reference squared distances; every exact decision in this module goes through here."""
    d = F2 - f
    return np.einsum("ij,ij->i", d, d)


def nearest_neighbor(f: np.ndarray, F2: np.ndarray) -> int:
    """Brute-force argmin of Euclidean distance; lowest index wins ties."""
    F2 = np.asarray(F2, dtype=float)
    if len(F2) == 0:
        raise ValueError("F2 is empty")
    return int(np.argmin(_sqdist(np.asarray(f, dtype=float), F2)))


def brute_force_nearest(F1: np.ndarray, F2: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Exact batched scan.

    A BLAS distance expansion shortlists every F2 row whose approximate distance
    is within a rounding-error margin of the row minimum; the shortlist is then
    rescored with the reference formula. Agrees with :func:`nearest_neighbor`
    on every row.
    """
    F1 = np.asarray(F1, dtype=float)
    F2 = np.asarray(F2, dtype=float)
    if len(F2) == 0:
        raise ValueError("F2 is empty")
    n2 = np.einsum("ij,ij->i", F2, F2)
    eps = np.finfo(float).eps
    out = np.empty(len(F1), dtype=np.int64)
    for lo in range(0, len(F1), chunk):
        A = F1[lo:lo + chunk]
        n1 = np.einsum("ij,ij->i", A, A)
        approx = n1[:, None] + n2[None, :] - 2.0 * (A @ F2.T)
        best = approx.min(axis=1)
        margin = 64 * eps * (n1 + n2.max()) * (F2.shape[1] + 2) + 1e-300
        for r in range(len(A)):
            cand = np.flatnonzero(approx[r] <= best[r] + 2 * margin[r])
            d = _sqdist(A[r], F2[cand])
            out[lo + r] = cand[int(np.argmin(d))]
    return out


class NearestNeighborIndex:
    """k-d tree over F2 with exact, lowest-index tie resolution.

    The tree proposes the nearest distance; a ball query slightly wider than that
    distance collects every possible tie or rounding competitor, which is then
    rescored with the reference formula.
    """

    def __init__(self, F2: np.ndarray, leafsize: int = 16):
        self.F2 = np.ascontiguousarray(F2, dtype=float)
        if len(self.F2) == 0:
            raise ValueError("F2 is empty")
        self.tree = cKDTree(self.F2, leafsize=leafsize, balanced_tree=False, compact_nodes=False)

    def query(self, F1: np.ndarray, workers: int = -1) -> np.ndarray:
        F1 = np.atleast_2d(np.asarray(F1, dtype=float))
        if len(self.F2) == 1:
            return np.zeros(len(F1), dtype=np.int64)
        d, i = self.tree.query(F1, k=2, workers=workers)
        out = i[:, 0].astype(np.int64)
        radii = d[:, 0] * (1 + 1e-9) + 1e-12
        # rows whose runner-up is within rounding of the winner need the full candidate set
        close = np.flatnonzero(d[:, 1] <= radii)
        if close.size:
            cands = self.tree.query_ball_point(F1[close], radii[close], workers=workers)
            for r, c in zip(close, cands):
                c = np.asarray(sorted(c), dtype=np.int64)
                out[r] = c[int(np.argmin(_sqdist(F1[r], self.F2[c])))]
        return out


# ---------------------------------------------------------------------------
# propagation


class Source(str, enum.Enum):
    LLM = "LLM"
    PROPAGATED = "PROPAGATED"


@dataclass(frozen=True)
class AugmentedRecord:
    scenario_id: str
    agent_id: str
    context: TransportationContext
    source: Source
    neighbor_id: ItemId | None = None

    def to_json(self) -> str:
        c = self.context
        return json.dumps(
            {
                "scenario_id": self.scenario_id,
                "agent_id": self.agent_id,
                "context": {
                    "intentions": [i.word for i in c.intentions],
                    "affordances": list(c.affordances),
                    "scenario_types": list(c.scenario_types),
                },
                "source": self.source.value,
                "neighbor_id": None if self.neighbor_id is None else list(self.neighbor_id),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "AugmentedRecord":
        d = json.loads(line)
        ctx = TransportationContext.from_dict(d["context"])
        nb = d.get("neighbor_id")
        return cls(d["scenario_id"], d["agent_id"], ctx, Source(d["source"]), None if nb is None else tuple(nb))


@dataclass
class AugmentedDataset:
    records: list[AugmentedRecord]

    def __len__(self):
        return len(self.records)

    def ids(self) -> list[ItemId]:
        return [(r.scenario_id, r.agent_id) for r in self.records]

    def write_jsonl(self, path: str | os.PathLike) -> None:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text("".join(r.to_json() + "\n" for r in self.records), encoding="utf-8")
        os.replace(tmp, p)

    @classmethod
    def read_jsonl(cls, path: str | os.PathLike) -> "AugmentedDataset":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([AugmentedRecord.from_json(x) for x in lines if x.strip()])


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, F: np.ndarray) -> "Standardizer":
        F = np.asarray(F, dtype=float)
        std = F.std(axis=0)
        return cls(F.mean(axis=0), np.where(std > 0, std, 1.0))

    def __call__(self, F: np.ndarray) -> np.ndarray:
        return (np.asarray(F, dtype=float) - self.mean) / self.std


def propagate(
    T1: Sequence[ItemId],
    F1: np.ndarray,
    T2: Sequence[ItemId],
    F2: np.ndarray,
    TC2: Sequence[TransportationContext],
    exact: bool = False,
    standardize: bool = True,
) -> AugmentedDataset:
    """Give each T1 item the context of its nearest T2 item; output is T1 records then T2 records.

    ``exact`` selects the brute-force scan instead of the tree; both return the
    same neighbors. Features are z-scored with statistics from F2.
    """
    if len(TC2) != len(T2) or len(F2) != len(T2):
        raise SizeMismatch(f"|T2|={len(T2)}, |F2|={len(F2)}, |TC2|={len(TC2)}")
    if len(F1) != len(T1):
        raise SizeMismatch(f"|T1|={len(T1)}, |F1|={len(F1)}")
    if len(T2) == 0:
        raise EmptyDataset("T2 is empty")
    records: list[AugmentedRecord] = []
    if len(T1):
        F1 = np.asarray(F1, dtype=float)
        F2 = np.asarray(F2, dtype=float)
        if standardize:
            z = Standardizer.fit(F2)
            F1, F2 = z(F1), z(F2)
        nn = brute_force_nearest(F1, F2) if exact else NearestNeighborIndex(F2).query(F1)
        for (sid, aid), j in zip(T1, nn):
            records.append(AugmentedRecord(sid, aid, TC2[j], Source.PROPAGATED, tuple(T2[j])))
    for (sid, aid), c in zip(T2, TC2):
        records.append(AugmentedRecord(sid, aid, c, Source.LLM))
    return AugmentedDataset(records)
