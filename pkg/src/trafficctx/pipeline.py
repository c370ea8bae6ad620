"""Pipeline stages and the resumable runner.

Every stage writes into its own directory together with a ``_stage.json``
manifest holding a hash of the stage's inputs and parameters plus a hash of
each output file. A stage is skipped when the manifest matches; outputs carry
no timestamps, so reruns are byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import evaluation as ev
from .context import ContextVocabulary, DuplicateAfterMerge, encode_context
from .llm import (
    BudgetExceeded,
    CostLedger,
    EndpointConfig,
    LLMClient,
    NoiseConfig,
    QueryRecord,
    QueryStatus,
    TransportationContext,
    mock_record,
)
from .png import write_png_bytes
from .prompt import build_tcgp, load_template
from .propagation import (
    AugmentedDataset,
    EmptyDataset,
    Source,
    encode_features,
    propagate,
    split_dataset,
)
from .render import RenderConfig, render
from .scenario import AgentType, MissingFuture, Scenario, label_gt_intention, parse_scenario, serialize_scenario

logger = logging.getLogger(__name__)

MANIFEST = "_stage.json"
STAGES = ("ingest", "render", "prompt", "annotate", "encode", "propagate", "evaluate")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# hashing and manifests


def _file_hash(p: Path) -> str:
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _tree_files(root: Path) -> list[Path]:
    if root.is_file():
        return [root]
    return sorted(p for p in root.rglob("*") if p.is_file() and p.name != MANIFEST and not p.name.endswith(".tmp"))


def hash_inputs(inputs: Iterable[Path], params: dict) -> str:
    from . import __version__

    h = hashlib.sha256()
    h.update(__version__.encode())
    h.update(json.dumps(params, sort_keys=True, default=str).encode())
    for root in inputs:
        root = Path(root)
        if not root.exists():
            h.update(b"<missing>")
            continue
        for p in _tree_files(root):
            h.update(str(p.relative_to(root) if root.is_dir() else p.name).encode())
            h.update(_file_hash(p).encode())
    return h.hexdigest()


def _outputs(out_dir: Path) -> dict[str, str]:
    return {str(p.relative_to(out_dir)): _file_hash(p) for p in _tree_files(out_dir)}


def stage_is_current(out_dir: Path, input_hash: str) -> bool:
    m = out_dir / MANIFEST
    if not m.exists():
        return False
    try:
        man = json.loads(m.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return False
    return man.get("input_hash") == input_hash and man.get("outputs") == _outputs(out_dir)


def run_stage(name: str, out_dir: Path, inputs: Sequence[Path], params: dict, fn: Callable[[Path], None],
              force: bool = False) -> bool:
    """Run ``fn(out_dir)`` unless the manifest says the outputs are current. Returns True if it ran."""
    out_dir = Path(out_dir)
    ih = hash_inputs(inputs, params)
    if not force and stage_is_current(out_dir, ih):
        logger.info("%s: up to date", name)
        return False
    if out_dir.exists():
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True)
    try:
        fn(out_dir)
    except (BudgetExceeded, StageError):
        raise
    except Exception as e:  # surface with the stage name
        raise StageError(name, f"{type(e).__name__}: {e}") from e
    man = {"stage": name, "input_hash": ih, "outputs": _outputs(out_dir)}
    (out_dir / MANIFEST).write_text(json.dumps(man, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return True


def _write_json(p: Path, obj) -> None:
    p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# stage bodies (usable on their own from the CLI)


def load_scenarios(scen_dir: Path) -> list[Scenario]:
    out = []
    for p in sorted(Path(scen_dir).glob("*.json")):
        if p.name.startswith("_") or p.name == "index.json":
            continue
        try:
            out.append(parse_scenario(p.read_bytes()))
        except ValueError as e:
            raise StageError("ingest", f"{p.name}: {e}") from e
    return out


def ingest(dataset_dir: Path, out_dir: Path) -> None:
    """Validate every scenario file and store canonical copies plus an index."""
    scenarios = load_scenarios(dataset_dir)
    if not scenarios:
        raise StageError("ingest", f"no scenario files in {dataset_dir}")
    seen = set()
    index = []
    (out_dir / "scenarios").mkdir()
    for s in scenarios:
        if s.scenario_id in seen:
            raise StageError("ingest", f"duplicate scenario_id {s.scenario_id!r}")
        seen.add(s.scenario_id)
        (out_dir / "scenarios" / f"{s.scenario_id}.json").write_bytes(serialize_scenario(s))
        try:
            gt = label_gt_intention(s, s.ego_agent_id).value
        except MissingFuture:
            gt = None
        index.append({"scenario_id": s.scenario_id, "agent_id": s.ego_agent_id,
                      "agent_type": s.ego.agent_type.value, "gt_intention": gt})
    _write_json(out_dir / "index.json", index)


def render_dir(scen_dir: Path, out_dir: Path, cfg: RenderConfig) -> None:
    for s in load_scenarios(scen_dir):
        write_png_bytes(render(s, cfg).to_png(), out_dir / f"{s.scenario_id}.png")


def prompt_dir(scen_dir: Path, out_dir: Path, cfg: RenderConfig, template: Path | None,
               vocab: ContextVocabulary = ContextVocabulary()) -> None:
    tmpl = load_template(template, vocab)
    for s in load_scenarios(scen_dir):
        t = build_tcgp(s, tmpl, cfg)
        (out_dir / f"{s.scenario_id}.txt").write_text(t.text, encoding="utf-8")
        write_png_bytes(t.image.to_png(), out_dir / f"{s.scenario_id}.png")


def annotate_dir(
    tcgp_dir: Path,
    out_dir: Path,
    mode: str = "mock",
    scen_dir: Path | None = None,
    noise: NoiseConfig = NoiseConfig(),
    endpoint: EndpointConfig | None = None,
    cache_dir: Path | None = None,
    vocab: ContextVocabulary = ContextVocabulary(),
    only: Iterable[str] | None = None,
    transport=None,
) -> None:
    """Annotate every TCGP (or the ids in ``only``); writes one record per scenario,
    ``contexts.jsonl`` with the parsed contexts and ``ledger.json``."""
    ids = sorted(p.stem for p in Path(tcgp_dir).glob("*.txt"))
    if only is not None:
        keep = set(only)
        ids = [i for i in ids if i in keep]
    recs: list[QueryRecord] = []
    ledger = CostLedger(None if endpoint is None else endpoint.budget_cap)
    if mode == "mock":
        if scen_dir is None:
            raise StageError("annotate", "mock mode needs the scenario directory (--dataset)")
        for sid in ids:
            s = parse_scenario((Path(scen_dir) / f"{sid}.json").read_bytes())
            recs.append(mock_record(s, noise, vocab))
    else:
        endpoint = endpoint or EndpointConfig()
        with LLMClient(endpoint, cache_dir, ledger, transport=transport, vocab=vocab) as client:
            items = [(sid, (Path(tcgp_dir) / f"{sid}.txt").read_text(encoding="utf-8"),
                      (Path(tcgp_dir) / f"{sid}.png").read_bytes()) for sid in ids]
            recs = client.query_many(items)
    agent_of = {}
    if scen_dir is not None:
        for sid in ids:
            p = Path(scen_dir) / f"{sid}.json"
            if p.exists():
                agent_of[sid] = json.loads(p.read_bytes())["ego_agent_id"]
    lines = []
    for r in recs:
        _write_json(out_dir / f"{r.scenario_id}.json", r.to_dict())
        if r.status is QueryStatus.OK and r.parsed is not None:
            lines.append(json.dumps({"scenario_id": r.scenario_id, "agent_id": agent_of.get(r.scenario_id, ""),
                                     "context": r.parsed.to_dict(), "source": Source.LLM.value,
                                     "neighbor_id": None}, sort_keys=True))
    (out_dir / "contexts.jsonl").write_text("".join(x + "\n" for x in lines), encoding="utf-8")
    _write_json(out_dir / "ledger.json", {
        "calls": len(recs),
        "ok": sum(r.status is QueryStatus.OK for r in recs),
        "parse_failed": sum(r.status is QueryStatus.PARSE_FAILED for r in recs),
        "api_error": sum(r.status is QueryStatus.API_ERROR for r in recs),
        "total_cost_micros": sum(r.cost_micros for r in recs),
    })


def load_contexts(context_dir: Path) -> dict[str, TransportationContext]:
    """Parsed contexts keyed by scenario id, from an annotate output directory."""
    out = {}
    p = Path(context_dir) / "contexts.jsonl"
    if p.exists():
        for line in p.read_text(encoding="utf-8").splitlines():
            if line.strip():
                d = json.loads(line)
                out[d["scenario_id"]] = TransportationContext.from_dict(d["context"])
        return out
    for f in sorted(Path(context_dir).glob("*.json")):
        if f.name.startswith("_") or f.name == "ledger.json":
            continue
        r = QueryRecord.from_dict(json.loads(f.read_text(encoding="utf-8")))
        if r.parsed is not None:
            out[r.scenario_id] = r.parsed
    return out


def encode_dir(scen_dir: Path, context_dir: Path | None, out_dir: Path, cfg: RenderConfig,
               vocab: ContextVocabulary = ContextVocabulary(), mask: Sequence[str] = ()) -> None:
    """Scenario feature vectors (features.npy + ids.json) and encoded contexts (contexts.jsonl)."""
    scenarios = load_scenarios(scen_dir)
    ids = [[s.scenario_id, s.ego_agent_id] for s in scenarios]
    F = np.array([encode_features(s, None, cfg, mask) for s in scenarios]).reshape(len(scenarios), -1)
    with open(out_dir / "features.npy", "wb") as fh:
        np.save(fh, F, allow_pickle=False)
    _write_json(out_dir / "ids.json", ids)
    lines = []
    if context_dir is not None:
        ctx = load_contexts(context_dir)
        with warnings.catch_warnings():
            # several labels sharing a slot is expected after merging; the max weight is kept
            warnings.simplefilter("ignore", DuplicateAfterMerge)
            for sid in sorted(ctx):
                lines.append(encode_context(ctx[sid], vocab, sid).to_json())
    (out_dir / "contexts.jsonl").write_text("".join(x + "\n" for x in lines), encoding="utf-8")


def split_for(scenarios: Sequence[Scenario], fraction: float, seed: int, stratified: bool):
    ids = [(s.scenario_id, s.ego_agent_id) for s in scenarios]
    types = [s.ego.agent_type for s in scenarios]
    return split_dataset(ids, fraction, seed, types, stratified)


def propagate_dir(
    scen_dir: Path,
    context_dir: Path,
    out_file: Path,
    fraction: float,
    seed: int,
    stratified: bool = False,
    exact: bool = False,
    cfg: RenderConfig = RenderConfig(),
    features_dir: Path | None = None,
    mask: Sequence[str] = (),
) -> dict:
    """Split, look up T2 contexts and propagate to T1; writes the JSONL dataset and ``split.json`` beside it.

    T2 members whose annotation failed are moved to T1 so every item still
    appears exactly once.
    """
    scenarios = load_scenarios(scen_dir)
    if not scenarios:
        raise EmptyDataset("no scenarios")
    split = split_for(scenarios, fraction, seed, stratified)
    ctx = load_contexts(context_dir)
    if features_dir is not None:
        F = np.load(Path(features_dir) / "features.npy")
        fids = [tuple(x) for x in json.loads((Path(features_dir) / "ids.json").read_text(encoding="utf-8"))]
        feat = dict(zip(fids, F))
    else:
        feat = {(s.scenario_id, s.ego_agent_id): encode_features(s, None, cfg, mask) for s in scenarios}
    T2 = [x for x in split.T2 if x[0] in ctx]
    failed = set(split.T2) - set(T2)
    in_t2 = set(T2)
    T1 = [(s.scenario_id, s.ego_agent_id) for s in scenarios if (s.scenario_id, s.ego_agent_id) not in in_t2]
    if not T2:
        raise EmptyDataset("no annotated context in the small split")
    aug = propagate(T1, np.array([feat[x] for x in T1]).reshape(len(T1), -1), T2,
                    np.array([feat[x] for x in T2]), [ctx[x[0]] for x in T2], exact=exact)
    out_file = Path(out_file)
    aug.write_jsonl(out_file)
    info = {"T1": len(T1), "T2": len(T2), "T2_failed": sorted(x[0] for x in failed),
            "split": split.to_dict()}
    _write_json(out_file.with_name("split.json"), info)
    return info


def _gt_table(scenarios: Sequence[Scenario]) -> dict[tuple[str, str], Scenario]:
    return {(s.scenario_id, s.ego_agent_id): s for s in scenarios}


def evaluate_records(records: Sequence, scenarios: dict, threshold: float = 2.0):
    """Intention accuracy and trajectory metrics for records that have ground truth.

    Trajectory metrics come from the constant-turn-rate baseline with and without
    the record's first intention as a ranking prior.
    """
    preds, gts = [], []
    trajs, confs, confs0, futs, masks, types, buckets = [], [], [], [], [], [], []
    for r in records:
        s = scenarios.get((r.scenario_id, r.agent_id))
        if s is None:
            continue
        try:
            gt = label_gt_intention(s, r.agent_id)
        except MissingFuture:
            continue
        preds.append(list(r.context.intentions))
        gts.append(gt)
        track = s.agent(r.agent_id)
        fut, m = ev.future_arrays(track)
        if not m.any():
            continue
        c, w = ev.baseline_candidates(track, r.context.intentions[0])
        _, w0 = ev.baseline_candidates(track)
        trajs.append(c)
        confs.append(w)
        confs0.append(w0)
        futs.append(fut)
        masks.append(m)
        types.append(track.agent_type)
        buckets.append(ev.merge_straight(gt).value)
    intent = ev.intention_accuracy(preds, gts)
    traj = ev.trajectory_metrics(trajs, confs, futs, masks, types, buckets, threshold)
    base = ev.map_approx(trajs, confs0, futs, buckets, masks, threshold) if futs else 0.0
    return intent, traj, {"baseline_map_approx_without_context": base}


@dataclass
class _Rec:
    scenario_id: str
    agent_id: str
    context: TransportationContext
    source: Source = Source.LLM


def evaluate_dir(pred_file: Path, scen_dir: Path, out_dir: Path, threshold: float = 2.0,
                 llm_contexts: Path | None = None) -> dict:
    """Metrics for a propagated dataset. With ``llm_contexts`` (an annotate directory) the
    intention table is computed on the direct annotations and the propagated records
    contribute a proxy agreement score."""
    scenarios = _gt_table(load_scenarios(scen_dir))
    aug = AugmentedDataset.read_jsonl(pred_file)
    intent, traj, extras = evaluate_records(aug.records, scenarios, threshold)
    prop = [r for r in aug.records if r.source is Source.PROPAGATED]
    if prop:
        pi, _, _ = evaluate_records(prop, scenarios, threshold)
        extras["propagated_n"] = pi.n
        extras["propagated_acc_first"] = pi.acc_first
        extras["propagated_acc_merged"] = pi.acc_merged
    extras["records"] = len(aug)
    if llm_contexts is not None:
        agent_of = {sid: aid for sid, aid in scenarios}
        ctx = load_contexts(llm_contexts)
        recs = [_Rec(sid, agent_of[sid], c) for sid, c in sorted(ctx.items()) if sid in agent_of]
        intent, _, _ = evaluate_records(recs, scenarios, threshold)
    return ev.report(out_dir, intent, traj, extras)


# ---------------------------------------------------------------------------
# runner


def run_pipeline(cfg, transport=None, force: bool = False) -> dict[str, str]:
    """Execute every stage in order; returns {stage: 'ran' | 'skipped'}."""
    from .config import PipelineConfig  # noqa: F401  (type reference only)

    out = Path(cfg.output_dir)
    d = {name: out / name for name in STAGES}
    scen = d["ingest"] / "scenarios"
    status: dict[str, str] = {}
    raw = cfg.raw

    def mark(name, ran):
        status[name] = "ran" if ran else "skipped"

    mark("ingest", run_stage("ingest", d["ingest"], [cfg.dataset_dir], {}, lambda o: ingest(cfg.dataset_dir, o), force))
    mark("render", run_stage("render", d["render"], [scen], raw["render"],
                             lambda o: render_dir(scen, o, cfg.render), force))
    tmpl_inputs = [cfg.template, cfg.template.with_suffix(".json")] if cfg.template else []
    mark("prompt", run_stage("prompt", d["prompt"], [scen, *tmpl_inputs], {"render": raw["render"], "vocab": raw["vocab"]},
                             lambda o: prompt_dir(scen, o, cfg.render, cfg.template, cfg.vocab), force))

    only = None
    if cfg.annotate_scope == "split":
        only = [sid for sid, _ in split_for(load_scenarios(scen), cfg.fraction, cfg.split_seed, cfg.stratified).T2]
    ann_params = {"mode": cfg.mode, "scope": cfg.annotate_scope, "vocab": raw["vocab"],
                  "mock": raw["mock"] if cfg.mode == "mock" else None,
                  "llm": {k: v for k, v in raw["llm"].items() if k not in ("concurrency", "api_key_env")},
                  "split": raw["propagation"] if only is not None else None}
    mark("annotate", run_stage(
        "annotate", d["annotate"], [d["prompt"], scen], ann_params,
        lambda o: annotate_dir(d["prompt"], o, cfg.mode, scen, cfg.noise, cfg.endpoint, cfg.cache_dir,
                               cfg.vocab, only, transport),
        force))
    mark("encode", run_stage("encode", d["encode"], [scen, d["annotate"]],
                             {"render": raw["render"], "vocab": raw["vocab"], "mask": list(cfg.feature_mask)},
                             lambda o: encode_dir(scen, d["annotate"], o, cfg.render, cfg.vocab, cfg.feature_mask), force))
    mark("propagate", run_stage(
        "propagate", d["propagate"], [scen, d["annotate"], d["encode"]], raw["propagation"],
        lambda o: propagate_dir(scen, d["annotate"], o / "augmented.jsonl", cfg.fraction, cfg.split_seed,
                                cfg.stratified, cfg.exact, cfg.render, d["encode"], cfg.feature_mask),
        force))
    mark("evaluate", run_stage(
        "evaluate", d["evaluate"], [scen, d["annotate"], d["propagate"]], raw["metrics"],
        lambda o: evaluate_dir(d["propagate"] / "augmented.jsonl", scen, o, cfg.miss_threshold, d["annotate"]),
        force))
    return status
