"""Text prompt assembly: caption, rule-based lane type, neighbor dynamics, examples, output format."""
from __future__ import annotations

import json
import math
import os
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .context import ContextVocabulary
from .render import RasterImage, RenderConfig, RenderLayout, crop_scenario, neighbor_order, render_with_layout
from .scenario import AgentState, AgentType, LaneTurnType, MapFeature, MapKind, Scenario, wrap_angle


class TemplateError(ValueError):
    pass


class NoLaneFound(LookupError):
    pass


REQUIRED_PLACEHOLDERS = frozenset(
    {"ego_type", "ego_speed", "lane_rule", "neighbors", "positive_examples", "negative_examples", "output_instructions"}
)
OPTIONAL_PLACEHOLDERS = frozenset(
    {"crop_meters", "intention_words", "affordance_words", "scenario_words", "n_neighbors"}
)

COMPASS = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")


@dataclass(frozen=True)
class PromptTemplate:
    caption_template: str
    positive_examples: tuple[str, ...] = ()
    negative_examples: tuple[tuple[str, str], ...] = ()
    output_instructions: str = ""
    vocab: ContextVocabulary = field(default_factory=ContextVocabulary)
    lane_sentences: dict[str, tuple[str, str]] = field(default_factory=dict)
    max_neighbors: int = 8

    def __post_init__(self):
        names = placeholders(self.caption_template)
        unknown = names - REQUIRED_PLACEHOLDERS - OPTIONAL_PLACEHOLDERS
        if unknown:
            raise TemplateError(f"unknown placeholder(s): {sorted(unknown)}")
        missing = REQUIRED_PLACEHOLDERS - names
        if missing:
            raise TemplateError(f"template lacks placeholder(s): {sorted(missing)}")
        for text, analysis in self.negative_examples:
            if not analysis.strip():
                raise TemplateError("negative examples need a non-empty error analysis")


def placeholders(text: str) -> set[str]:
    try:
        return {name for _, name, _, _ in string.Formatter().parse(text) if name is not None}
    except ValueError as e:
        raise TemplateError(str(e)) from None


def load_template(path: str | os.PathLike | None = None, vocab: ContextVocabulary | None = None) -> PromptTemplate:
    """Load a template text file and its sidecar manifest (``<name>.json`` next to it).

    With no path the packaged default template is used.
    """
    if path is None:
        base = resources.files("trafficctx") / "data"
        text = (base / "default_template.txt").read_text(encoding="utf-8")
        manifest = json.loads((base / "default_template.json").read_text(encoding="utf-8"))
    else:
        path = Path(path)
        if not path.exists():
            raise TemplateError(f"template file not found: {path}")
        text = path.read_text(encoding="utf-8")
        side = path.with_suffix(".json")
        manifest = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    n_pos = manifest.get("max_positive")
    n_neg = manifest.get("max_negative")
    pos = tuple(manifest.get("positive_examples", []))[:n_pos]
    neg = tuple((e["text"], e["error_analysis"]) for e in manifest.get("negative_examples", []))[:n_neg]
    lanes = {k: tuple(v) for k, v in manifest.get("lane_sentences", {}).items()}
    return PromptTemplate(
        caption_template=text,
        positive_examples=pos,
        negative_examples=neg,
        output_instructions=manifest.get("output_instructions", ""),
        vocab=vocab or ContextVocabulary(),
        lane_sentences=lanes,
        max_neighbors=int(manifest.get("max_neighbors", 8)),
    )


# ---------------------------------------------------------------------------
# lane type


def _seg_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    d = b - a
    ll = float(d @ d)
    t = 0.0 if ll == 0 else min(max(float((p - a) @ d) / ll, 0.0), 1.0)
    q = a + t * d
    return float(np.hypot(*(p - q))), t


def classify_lane_turn(poly: np.ndarray, start_segment: int = 0,
                       straight_deg: float = 20.0, u_turn_deg: float = 135.0) -> LaneTurnType:
    """Total signed change of tangent direction from ``start_segment`` to the end of the polyline."""
    seg = np.diff(poly[start_segment:], axis=0)
    seg = seg[np.hypot(seg[:, 0], seg[:, 1]) > 1e-9]
    if len(seg) < 2:
        return LaneTurnType.STRAIGHT_LANE
    ang = np.arctan2(seg[:, 1], seg[:, 0])
    total = math.degrees(sum(wrap_angle(float(b - a)) for a, b in zip(ang[:-1], ang[1:])))
    if abs(total) <= straight_deg:
        return LaneTurnType.STRAIGHT_LANE
    if abs(total) > u_turn_deg:
        return LaneTurnType.U_TURN_LANE
    return LaneTurnType.LEFT_TURN_LANE if total > 0 else LaneTurnType.RIGHT_TURN_LANE


def detect_lane_type(
    map_features: Sequence[MapFeature],
    ego_pose: AgentState,
    max_distance: float = 5.0,
    heading_penalty: float = 5.0,
) -> tuple[LaneTurnType, str]:
    """Pick the lane under the ego and say what kind of lane it is.

    Score = perpendicular distance + ``heading_penalty`` * (misalignment / pi);
    the lowest score wins, ties by feature_id. Lanes without a supplied
    ``lane_turn_type`` are classified from the polyline downstream of the ego.
    """
    p = np.array([ego_pose.x, ego_pose.y])
    best = None
    for f in map_features:
        if f.kind is not MapKind.LANE_CENTER:
            continue
        poly = np.asarray(f.polyline, dtype=float)
        for i in range(len(poly) - 1):
            dist, _ = _seg_distance(p, poly[i], poly[i + 1])
            if dist > max_distance:
                continue
            d = poly[i + 1] - poly[i]
            if not d.any():
                continue
            mis = abs(wrap_angle(ego_pose.heading - math.atan2(d[1], d[0])))
            score = dist + heading_penalty * mis / math.pi
            key = (round(score, 9), f.feature_id, i)
            if best is None or key < best[0]:
                best = (key, f, i)
    if best is None:
        raise NoLaneFound(f"no lane center within {max_distance} m of the ego")
    _, f, i = best
    if f.lane_turn_type is not None:
        return f.lane_turn_type, f.feature_id
    return classify_lane_turn(np.asarray(f.polyline, dtype=float), i), f.feature_id


# ---------------------------------------------------------------------------
# neighbors


@dataclass(frozen=True)
class NeighborSummary:
    label: str
    agent_type: AgentType
    speed: float
    relative_bearing: str
    distance: float


def compass_sector(x: float, y: float) -> str:
    """8-way sector of an ego-frame offset; the ego faces N (+y)."""
    ang = math.degrees(math.atan2(x, y)) % 360.0
    return COMPASS[int(math.floor((ang + 22.5) / 45.0)) % 8]


def summarize_neighbors(s: Scenario, max_neighbors: int = 8) -> list[NeighborSummary]:
    """Nearest ``max_neighbors`` neighbors of an already cropped scenario, labeled like the renderer."""
    out = []
    for idx, (a, p, d) in enumerate(neighbor_order(s)[:max_neighbors]):
        out.append(
            NeighborSummary(
                label=str(idx + 1),
                agent_type=a.agent_type,
                speed=a.current.speed,
                relative_bearing=compass_sector(float(p[0]), float(p[1])),
                distance=d,
            )
        )
    return out


# ---------------------------------------------------------------------------
# text

_DEFAULT_LANE_SENTENCES = {
    LaneTurnType.STRAIGHT_LANE.value: (
        "The ego-agent is in a straight lane.",
        "Agents in a straight lane normally keep going straight or change lanes; turning from it is unlikely.",
    ),
    LaneTurnType.LEFT_TURN_LANE.value: (
        "The ego-agent is in a left-turn lane.",
        "Agents in a left-turn lane normally turn left at the next junction, assuming they follow traffic rules.",
    ),
    LaneTurnType.RIGHT_TURN_LANE.value: (
        "The ego-agent is in a right-turn lane.",
        "Agents in a right-turn lane normally turn right at the next junction, assuming they follow traffic rules.",
    ),
    LaneTurnType.U_TURN_LANE.value: (
        "The ego-agent is in a U-turn lane.",
        "Agents in a U-turn lane normally make a U-turn, assuming they follow traffic rules.",
    ),
}


def lane_rule_block(lane: LaneTurnType, tmpl: PromptTemplate) -> str:
    first, second = tmpl.lane_sentences.get(lane.value, _DEFAULT_LANE_SENTENCES[lane.value])
    return f"{first} {second}"


def _neighbors_block(summaries: Sequence[NeighborSummary]) -> str:
    if not summaries:
        return "There are no other agents in the map."
    lines = ["Other agents in the map (label: type, position relative to the ego-agent, speed):"]
    for n in summaries:
        lines.append(
            f"- Agent {n.label}: {n.agent_type.value.lower()}, {n.distance:.1f} m to the {n.relative_bearing}, "
            f"speed {n.speed:.1f} m/s"
        )
    return "\n".join(lines)


def _examples_block(tmpl: PromptTemplate) -> tuple[str, str]:
    pos = "\n\n".join(f"Positive example {i + 1}:\n{t}" for i, t in enumerate(tmpl.positive_examples))
    neg = "\n\n".join(
        f"Negative example {i + 1}:\n{t}\nError analysis: {a}" for i, (t, a) in enumerate(tmpl.negative_examples)
    )
    return pos, neg


def output_instructions(tmpl: PromptTemplate) -> str:
    v = tmpl.vocab
    head = tmpl.output_instructions.strip()
    body = (
        "Reply with exactly this block, then your reasoning:\n"
        "```\n"
        "INTENTIONS: [<most likely intention>, <next most likely>, ...]\n"
        "AFFORDANCES: [<allowed actions>]\n"
        "SCENARIO: [<scenario types>]\n"
        "```\n"
        "REASONING: <free text>\n"
        f"Allowed intentions: {', '.join(v.label_words())}\n"
        f"Allowed affordances: {', '.join(v.affordance_words)}\n"
        f"Allowed scenario types: {', '.join(v.scenario_words)}"
    )
    return f"{head}\n{body}" if head else body


def build_text_prompt(s: Scenario, tmpl: PromptTemplate, render_cfg: RenderConfig = RenderConfig()) -> str:
    ego = s.ego
    if not ego.current.valid:
        raise ValueError("ego current state is not valid")
    try:
        lane, _ = detect_lane_type(s.map, ego.current)
        lane_rule = lane_rule_block(lane, tmpl)
    except NoLaneFound:
        lane_rule = ""
    cropped = crop_scenario(s, render_cfg)
    summaries = summarize_neighbors(cropped, tmpl.max_neighbors)
    pos, neg = _examples_block(tmpl)
    values = {
        "ego_type": ego.agent_type.value.lower(),
        "ego_speed": f"{ego.current.speed:.1f}",
        "lane_rule": lane_rule,
        "neighbors": _neighbors_block(summaries),
        "positive_examples": pos,
        "negative_examples": neg,
        "output_instructions": output_instructions(tmpl),
        "crop_meters": f"{render_cfg.crop_side(ego.agent_type):g}",
        "intention_words": ", ".join(tmpl.vocab.label_words()),
        "affordance_words": ", ".join(tmpl.vocab.affordance_words),
        "scenario_words": ", ".join(tmpl.vocab.scenario_words),
        "n_neighbors": str(len(summaries)),
    }
    out_lines = []
    for line in tmpl.caption_template.splitlines():
        names = placeholders(line)
        stripped = line.strip()
        # a line holding only an empty conditional block disappears entirely
        if len(names) == 1 and stripped == "{" + next(iter(names)) + "}" and values.get(stripped[1:-1]) == "":
            continue
        try:
            out_lines.append(line.format(**values))
        except (KeyError, IndexError) as e:
            raise TemplateError(f"unresolved placeholder {e}") from None
    return "\n".join(out_lines).rstrip("\n") + "\n"


@dataclass(frozen=True)
class TCGP:
    image: RasterImage
    text: str
    layout: RenderLayout


def build_tcgp(s: Scenario, tmpl: PromptTemplate, render_cfg: RenderConfig = RenderConfig()) -> TCGP:
    """Image prompt plus text prompt for one scenario."""
    img, layout = render_with_layout(s, render_cfg)
    return TCGP(img, build_text_prompt(s, tmpl, render_cfg), layout)
