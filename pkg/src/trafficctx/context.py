"""Transportation-context vectors and their fusion into decoder query content.

Words become three vectors: a multi-hot affordance vector A, a multi-hot
scenario vector S and a rank-weighted intention vector I where the i-th word
(0-based) of an L-word list weighs L - i. The concatenation [I, A, S] goes
through a two-layer MLP, is repeated K times and attended to by the initial
query content Q0 (single head, scale 1/sqrt(D), no residual or norm).
"""
from __future__ import annotations

import json
import math
import os
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .scenario import IntentionLabel


class UnknownWord(ValueError):
    pass


class ShapeError(ValueError):
    pass


class DuplicateAfterMerge(UserWarning):
    """Two intention words landed in the same slot; the larger weight was kept."""


def normalize_word(word: str) -> str:
    """Case-, hyphen-, underscore- and space-insensitive key."""
    return re.sub(r"[\s\-_]+", "", str(word)).lower()


DEFAULT_MERGE = {
    IntentionLabel.STATIONARY: "Stationary",
    IntentionLabel.STRAIGHT: "Straight",
    IntentionLabel.STRAIGHT_LEFT: "Straight",
    IntentionLabel.STRAIGHT_RIGHT: "Straight",
    IntentionLabel.LEFT_TURN: "Left-Turn",
    IntentionLabel.RIGHT_TURN: "Right-Turn",
    IntentionLabel.LEFT_U_TURN: "U-Turn",
    IntentionLabel.RIGHT_U_TURN: "U-Turn",
}


@dataclass(frozen=True)
class ContextVocabulary:
    intention_words: tuple[str, ...] = ("Stationary", "Straight", "Left-Turn", "Right-Turn", "U-Turn")
    affordance_words: tuple[str, ...] = (
        "Slow-Allow", "Speed-up-Allow", "Left-Allow", "Right-Allow", "Stop-Allow",
        "Reserved-1", "Reserved-2", "Reserved-3",
    )
    scenario_words: tuple[str, ...] = ("Intersection", "Straight-Road", "Roundabout", "Parking-Area")
    intention_merge_map: Mapping[IntentionLabel, str] = field(default_factory=lambda: dict(DEFAULT_MERGE))
    active_labels: tuple[IntentionLabel, ...] = tuple(IntentionLabel)

    def __post_init__(self):
        object.__setattr__(self, "intention_words", tuple(self.intention_words))
        object.__setattr__(self, "affordance_words", tuple(self.affordance_words))
        object.__setattr__(self, "scenario_words", tuple(self.scenario_words))
        merge = {IntentionLabel(k): v for k, v in dict(self.intention_merge_map).items()}
        object.__setattr__(self, "intention_merge_map", merge)
        object.__setattr__(self, "active_labels", tuple(IntentionLabel(x) for x in self.active_labels))
        for name, words, n in (
            ("intention_words", self.intention_words, 5),
            ("affordance_words", self.affordance_words, 8),
            ("scenario_words", self.scenario_words, 4),
        ):
            if len(words) != n:
                raise ValueError(f"{name} must have exactly {n} entries, got {len(words)}")
            if len({normalize_word(w) for w in words}) != n:
                raise ValueError(f"{name} has duplicates after normalization")
        missing = set(IntentionLabel) - set(merge)
        if missing:
            raise ValueError(f"merge map misses {sorted(m.value for m in missing)}")
        slots = {normalize_word(w) for w in self.intention_words}
        for lab, w in merge.items():
            if normalize_word(w) not in slots:
                raise ValueError(f"merge map sends {lab.value} to unknown slot {w!r}")

    def label_words(self) -> list[str]:
        return [lab.word for lab in self.active_labels]

    def intention_slot(self, word: str | IntentionLabel) -> int:
        """Vector slot of an intention label or slot word."""
        if isinstance(word, IntentionLabel):
            lab = word
        else:
            key = normalize_word(word)
            lab = _LABEL_BY_KEY.get(key)
            if lab is None:
                for i, w in enumerate(self.intention_words):
                    if normalize_word(w) == key:
                        return i
                raise UnknownWord(f"unknown intention word {word!r}")
        target = normalize_word(self.intention_merge_map[lab])
        return [normalize_word(w) for w in self.intention_words].index(target)

    def to_dict(self) -> dict:
        return {
            "intention_words": list(self.intention_words),
            "affordance_words": list(self.affordance_words),
            "scenario_words": list(self.scenario_words),
            "intention_merge_map": {k.value: v for k, v in self.intention_merge_map.items()},
            "active_labels": [x.value for x in self.active_labels],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ContextVocabulary":
        kw = dict(d)
        if "intention_merge_map" in kw:
            kw["intention_merge_map"] = {IntentionLabel(k): v for k, v in kw["intention_merge_map"].items()}
        for k in ("intention_words", "affordance_words", "scenario_words", "active_labels"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


_LABEL_BY_KEY = {normalize_word(lab.value): lab for lab in IntentionLabel}


def label_from_word(word: str | IntentionLabel) -> IntentionLabel | None:
    if isinstance(word, IntentionLabel):
        return word
    return _LABEL_BY_KEY.get(normalize_word(word))


# ---------------------------------------------------------------------------
# encoders


def _multi_hot(words: Iterable[str], vocab_words: Sequence[str], kind: str) -> np.ndarray:
    index = {normalize_word(w): i for i, w in enumerate(vocab_words)}
    out = np.zeros(len(vocab_words))
    for w in words:
        i = index.get(normalize_word(w))
        if i is None:
            raise UnknownWord(f"unknown {kind} word {w!r}")
        out[i] = 1.0
    return out


def encode_affordance(words: Iterable[str], vocab: ContextVocabulary = ContextVocabulary()) -> np.ndarray:
    return _multi_hot(words, vocab.affordance_words, "affordance")


def encode_scenario(words: Iterable[str], vocab: ContextVocabulary = ContextVocabulary()) -> np.ndarray:
    return _multi_hot(words, vocab.scenario_words, "scenario")


def encode_intention(words: Sequence[str | IntentionLabel], vocab: ContextVocabulary = ContextVocabulary()) -> np.ndarray:
    """Rank-weighted encoding: the i-th of L words puts weight L - i on its slot."""
    words = list(words)
    if not words:
        raise ValueError("intention list must not be empty")
    n = len(words)
    out = np.zeros(len(vocab.intention_words))
    for i, w in enumerate(words):
        slot = vocab.intention_slot(w)
        weight = float(n - i)
        if out[slot]:
            warnings.warn(
                f"intention {w!r} shares slot {vocab.intention_words[slot]!r} with an earlier word; "
                f"keeping weight {max(out[slot], weight):g}",
                DuplicateAfterMerge,
                stacklevel=2,
            )
        out[slot] = max(out[slot], weight)
    return out


@dataclass(frozen=True, eq=False)
class EncodedContext:
    I: np.ndarray
    A: np.ndarray
    S: np.ndarray
    scenario_id: str = ""

    def __post_init__(self):
        for name, n in (("I", 5), ("A", 8), ("S", 4)):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (n,):
                raise ShapeError(f"{name} must have shape ({n},), got {v.shape}")
            object.__setattr__(self, name, v)

    def __eq__(self, other):
        if not isinstance(other, EncodedContext):
            return NotImplemented
        return (
            self.scenario_id == other.scenario_id
            and np.array_equal(self.I, other.I)
            and np.array_equal(self.A, other.A)
            and np.array_equal(self.S, other.S)
        )

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.I, self.A, self.S])

    def to_json(self) -> str:
        def ints(v):
            return [int(x) if float(x).is_integer() else float(x) for x in v]

        return json.dumps({"scenario_id": self.scenario_id, "I": ints(self.I), "A": ints(self.A), "S": ints(self.S)})

    @classmethod
    def from_json(cls, text: str) -> "EncodedContext":
        d = json.loads(text)
        return cls(np.array(d["I"], float), np.array(d["A"], float), np.array(d["S"], float), d.get("scenario_id", ""))


def encode_context(ctx, vocab: ContextVocabulary = ContextVocabulary(), scenario_id: str = "") -> EncodedContext:
    """Encode a TransportationContext-like object (intentions, affordances, scenario_types)."""
    return EncodedContext(
        encode_intention(ctx.intentions, vocab),
        encode_affordance(ctx.affordances, vocab),
        encode_scenario(ctx.scenario_types, vocab),
        scenario_id,
    )


# ---------------------------------------------------------------------------
# fusion

CONTEXT_DIM = 5 + 8 + 4
PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wq", "Wk", "Wv", "Wo")


@dataclass(frozen=True, eq=False)
class FusionParams:
    D: int
    K: int
    W1: np.ndarray  # (17, D)
    b1: np.ndarray  # (D,)
    W2: np.ndarray  # (D, D)
    b2: np.ndarray  # (D,)
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    rng_seed: int | None = None

    def __post_init__(self):
        if self.D <= 0 or self.K <= 0:
            raise ShapeError("D and K must be positive")
        for name, shape in self.shapes().items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ShapeError(f"{name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        D = self.D
        return {"W1": (CONTEXT_DIM, D), "b1": (D,), "W2": (D, D), "b2": (D,),
                "Wq": (D, D), "Wk": (D, D), "Wv": (D, D), "Wo": (D, D)}

    @classmethod
    def init(cls, D: int = 256, K: int = 6, seed: int = 0) -> "FusionParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
        rng = np.random.default_rng(seed)

        def u(shape, fan_in):
            b = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-b, b, size=shape)

        return cls(
            D, K,
            W1=u((CONTEXT_DIM, D), CONTEXT_DIM), b1=u((D,), CONTEXT_DIM),
            W2=u((D, D), D), b2=u((D,), D),
            Wq=u((D, D), D), Wk=u((D, D), D), Wv=u((D, D), D), Wo=u((D, D), D),
            rng_seed=seed,
        )

    @classmethod
    def zeros(cls, D: int, K: int) -> "FusionParams":
        z = {n: np.zeros(s) for n, s in cls.init(D, K).shapes().items()}
        return cls(D, K, **z)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def replace(self, **arrays) -> "FusionParams":
        kw = self.arrays()
        kw.update(arrays)
        return FusionParams(self.D, self.K, rng_seed=self.rng_seed, **kw)

    def save(self, path: str | os.PathLike) -> None:
        doc = {
            "D": self.D, "K": self.K, "rng_seed": self.rng_seed,
            "arrays": {n: {"shape": list(a.shape), "data": a.ravel().tolist()} for n, a in self.arrays().items()},
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FusionParams":
        doc = json.loads(Path(path).read_text())
        arrays = {n: np.array(v["data"], dtype=float).reshape(v["shape"]) for n, v in doc["arrays"].items()}
        return cls(doc["D"], doc["K"], rng_seed=doc.get("rng_seed"), **arrays)


@dataclass(frozen=True, eq=False)
class QueryContent:
    Q0: np.ndarray
    Q_tc: np.ndarray


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_vector(ctx: EncodedContext | np.ndarray) -> np.ndarray:
    x = ctx.vector if isinstance(ctx, EncodedContext) else np.asarray(ctx, dtype=float)
    if x.shape != (CONTEXT_DIM,):
        raise ShapeError(f"context vector must have shape ({CONTEXT_DIM},), got {x.shape}")
    return x


def _forward(x: np.ndarray, Q0: np.ndarray, p: FusionParams) -> tuple[np.ndarray, dict]:
    pre = x @ p.W1 + p.b1
    h = np.maximum(pre, 0.0)
    tc = h @ p.W2 + p.b2
    TC = np.repeat(tc[None, :], p.K, axis=0)
    q = Q0 @ p.Wq
    k = TC @ p.Wk
    v = TC @ p.Wv
    scale = 1.0 / math.sqrt(p.D)
    P = _softmax_rows((q @ k.T) * scale)
    O = P @ v
    out = O @ p.Wo
    return out, dict(x=x, pre=pre, h=h, tc=tc, TC=TC, q=q, k=k, v=v, P=P, O=O, scale=scale, Q0=Q0)


def fuse(ctx: EncodedContext | np.ndarray, Q0: np.ndarray, params: FusionParams) -> np.ndarray:
    """Context-fused query content Q_tc (K x D)."""
    x = _as_vector(ctx)
    Q0 = np.asarray(Q0, dtype=float)
    if Q0.shape != (params.K, params.D):
        raise ShapeError(f"Q0 must have shape ({params.K}, {params.D}), got {Q0.shape}")
    return _forward(x, Q0, params)[0]


def fuse_query(ctx: EncodedContext | np.ndarray, Q0: np.ndarray, params: FusionParams) -> QueryContent:
    return QueryContent(np.asarray(Q0, dtype=float), fuse(ctx, Q0, params))


def fuse_backward(ctx: EncodedContext | np.ndarray, Q0: np.ndarray, params: FusionParams,
                  grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of <grad_out, Q_tc> with respect to every parameter array (and Q0)."""
    x = _as_vector(ctx)
    _, c = _forward(x, np.asarray(Q0, dtype=float), params)
    G = np.asarray(grad_out, dtype=float)
    g = {"Wo": c["O"].T @ G}
    dO = G @ params.Wo.T
    dP = dO @ c["v"].T
    dv = c["P"].T @ dO
    dZ = c["P"] * (dP - np.sum(dP * c["P"], axis=1, keepdims=True)) * c["scale"]
    dq = dZ @ c["k"]
    dk = dZ.T @ c["q"]
    g["Wq"] = c["Q0"].T @ dq
    g["Wk"] = c["TC"].T @ dk
    g["Wv"] = c["TC"].T @ dv
    g["Q0"] = dq @ params.Wq.T
    dTC = dk @ params.Wk.T + dv @ params.Wv.T
    dtc = dTC.sum(axis=0)
    g["W2"] = np.outer(c["h"], dtc)
    g["b2"] = dtc
    dpre = (dtc @ params.W2.T) * (c["pre"] > 0)
    g["W1"] = np.outer(c["x"], dpre)
    g["b1"] = dpre
    return g


# ---------------------------------------------------------------------------
# losses and gradient check


@dataclass(frozen=True, eq=False)
class Loss:
    """Scalar function of Q_tc with its gradient."""

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]

    def __call__(self, Q: np.ndarray) -> float:
        return self.value(Q)


def linear_loss(C: np.ndarray) -> Loss:
    C = np.asarray(C, dtype=float)
    return Loss(lambda Q: float(np.sum(C * Q)), lambda Q: C)


def squared_loss(target: np.ndarray) -> Loss:
    T = np.asarray(target, dtype=float)
    return Loss(lambda Q: 0.5 * float(np.sum((Q - T) ** 2)), lambda Q: Q - T)


def constant_loss(c: float = 1.0) -> Loss:
    return Loss(lambda Q: float(c), lambda Q: np.zeros_like(Q))


def grad_check(
    params: FusionParams,
    ctx: EncodedContext | np.ndarray,
    Q0: np.ndarray,
    loss: Loss,
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is |a - n| / max(|a|, |n|, floor). The default floor,
    1e4 * eps * max(|loss|, 1) / h, sits well above the round-off of the
    difference quotient so gradients that are zero analytically do not count
    as failures. With ``max_entries`` only a seeded random subset of each
    parameter array is probed.
    """
    x = _as_vector(ctx)
    Q0 = np.asarray(Q0, dtype=float)
    Q = fuse(x, Q0, params)
    if floor is None:
        floor = max(1e-8, 1e4 * np.finfo(float).eps * max(abs(loss(Q)), 1.0) / h)
    analytic = fuse_backward(x, Q0, params, loss.grad(Q))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in PARAM_NAMES:
        base = getattr(params, name)
        idx = list(np.ndindex(base.shape))
        if max_entries is not None and len(idx) > max_entries:
            pick = rng.choice(len(idx), size=max_entries, replace=False)
            idx = [idx[i] for i in sorted(pick)]
        for ix in idx:
            plus = base.copy()
            plus[ix] += h
            minus = base.copy()
            minus[ix] -= h
            fp = loss(fuse(x, Q0, params.replace(**{name: plus})))
            fm = loss(fuse(x, Q0, params.replace(**{name: minus})))
            num = (fp - fm) / (2 * h)
            a = float(analytic[name][ix])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
