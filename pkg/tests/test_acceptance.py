"""One test per acceptance criterion; each records a PASS/FAIL line."""
import contextlib
import itertools
import json
import math
import time
import warnings

import numpy as np
import pytest

from trafficctx.cli import main
from trafficctx.context import (
    ContextVocabulary,
    DuplicateAfterMerge,
    FusionParams,
    encode_affordance,
    encode_intention,
    encode_scenario,
    fuse,
    grad_check,
    squared_loss,
)
from trafficctx.evaluation import CONFUSION_CLASSES, intention_accuracy, merge_straight, min_ade, min_fde, miss_rate
from trafficctx.llm import TransportationContext, format_context, parse_response
from trafficctx.propagation import (
    FEATURE_DIM,
    NearestNeighborIndex,
    brute_force_nearest,
    propagate,
    split_dataset,
)
from trafficctx.render import DEFAULT_PALETTE, RenderConfig, render
from trafficctx.scenario import AgentType, IntentionLabel, transform_scenario
from trafficctx.synth import synth_fixtures

from conftest import ACCEPTANCE

VOCAB = ContextVocabulary()


@contextlib.contextmanager
def criterion(n: int, name: str, budget_s: float):
    t0 = time.perf_counter()
    line = f"FAIL  criterion {n}: {name}"
    try:
        yield
        dt = time.perf_counter() - t0
        assert dt < budget_s, f"took {dt:.1f}s, budget {budget_s}s"
        line = f"PASS  criterion {n}: {name} ({dt:.2f}s)"
    except BaseException as e:
        line += f" ({type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''})"
        raise
    finally:
        ACCEPTANCE[n] = line
        print(line)


def test_criterion_1_encoding_conformance():
    with criterion(1, "intention weights and one-hot context encodings", 1.0):
        words = list(VOCAB.intention_words)
        for i, w in enumerate(words):
            want = np.zeros(5)
            want[i] = 1
            assert np.array_equal(encode_intention([w]), want)
        for a, b in itertools.permutations(range(5), 2):
            want = np.zeros(5)
            want[a], want[b] = 2, 1
            assert np.array_equal(encode_intention([words[a], words[b]]), want)
        # every fine label, alone and in ordered pairs
        for la in IntentionLabel:
            want = np.zeros(5)
            want[VOCAB.intention_slot(la)] = 1
            assert np.array_equal(encode_intention([la]), want)
        for la, lb in itertools.permutations(IntentionLabel, 2):
            sa, sb = VOCAB.intention_slot(la), VOCAB.intention_slot(lb)
            want = np.zeros(5)
            want[sb] = 1
            want[sa] = 2
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DuplicateAfterMerge)
                assert np.array_equal(encode_intention([la, lb]), want)
        assert encode_intention(["Straight", "Right-Turn"])[[1, 3]].tolist() == [2, 1]

        for enc, vocab_words, dim in ((encode_affordance, VOCAB.affordance_words, 8),
                                      (encode_scenario, VOCAB.scenario_words, 4)):
            assert enc([]).shape == (dim,)
            for i, w in enumerate(vocab_words):
                assert np.array_equal(enc([w]), np.eye(dim)[i])
            for i, j in itertools.permutations(range(dim), 2):
                assert np.array_equal(enc([vocab_words[i], vocab_words[j]]), np.eye(dim)[i] + np.eye(dim)[j])


def _context_vector(rng):
    return np.concatenate([rng.integers(0, 4, 5), rng.integers(0, 2, 8), rng.integers(0, 2, 4)]).astype(float)


def test_criterion_2_fusion_properties():
    rng = np.random.default_rng(2)
    with criterion(2, "fused query rows equal, independent of Q0, gradients match", 30.0):
        worst_row = worst_q0 = 0.0
        for i in range(100):
            D, K = (256, 6) if i % 2 == 0 else (4, 2)
            p = FusionParams.init(D, K, seed=i)
            x = _context_vector(rng)
            Q0 = rng.normal(size=(K, D))
            out = fuse(x, Q0, p)
            worst_row = max(worst_row, float(np.max(np.abs(out - out[0]))))
            worst_q0 = max(worst_q0, float(np.max(np.abs(out - fuse(x, rng.normal(size=(K, D)) * 10, p)))))
        assert worst_row <= 1e-12 and worst_q0 <= 1e-12, (worst_row, worst_q0)

        errs = []
        for D, K, cap in ((4, 2, None), (256, 6, 24)):
            for seed in range(3):
                p = FusionParams.init(D, K, seed=100 + seed)
                x = _context_vector(rng)
                Q0 = rng.normal(size=(K, D))
                errs.append(grad_check(p, x, Q0, squared_loss(rng.normal(size=(K, D))), max_entries=cap, seed=seed))
        assert max(errs) <= 1e-4, errs


def _clustered(rng, n, dim, centers=500):
    C = rng.normal(size=(centers, dim)) * 5
    return C[rng.integers(0, centers, n)] + rng.normal(size=(n, dim)) * 0.3


def test_criterion_3_nearest_neighbor_exactness():
    rng = np.random.default_rng(3)
    with criterion(3, "tree nearest neighbor equals brute force; propagation covers T1 and T2", 60.0):
        F = _clustered(rng, 100_000, FEATURE_DIM)
        pick = rng.choice(len(F), 10_000, replace=False)
        Q = F[pick].copy()
        Q[: 5_000] += rng.normal(size=(5_000, FEATURE_DIM)) * 0.05  # near points
        # remaining queries are exact copies, which stresses zero-distance ties with duplicates
        F[rng.choice(len(F), 2_000, replace=False)] = F[pick[-2_000:]]
        tree = NearestNeighborIndex(F).query(Q)
        brute = brute_force_nearest(Q, F)
        agree = float(np.mean(tree == brute))
        assert agree == 1.0, f"agreement {agree:.6f}"

        ids = [(f"s{i}", "ego") for i in range(len(F))]
        sp = split_dataset(ids, 0.007, seed=3)
        pos = {x: i for i, x in enumerate(ids)}
        F1 = F[[pos[x] for x in sp.T1]]
        F2 = F[[pos[x] for x in sp.T2]]
        labels = list(IntentionLabel)
        TC2 = [TransportationContext((labels[i % 8],)) for i in range(len(sp.T2))]
        aug = propagate(sp.T1, F1, sp.T2, F2, TC2)
        assert len(aug) == len(sp.T1) + len(sp.T2) == len(F)
        assert set(aug.ids()) == set(ids)


def test_criterion_4_split_ratio():
    with criterion(4, "T2 size 70 of 10,000; stratified 9:3:3 within one per type", 1.0):
        ids = [(f"s{i}", "ego") for i in range(10_000)]
        sp = split_dataset(ids, 0.007, seed=4)
        assert len(sp.T2) == 70 and len(sp.T1) == 9_930
        assert set(sp.T1).isdisjoint(sp.T2)
        rng = np.random.default_rng(4)
        types = [AgentType(t) for t in rng.choice([t.value for t in AgentType], 10_000, p=[0.6, 0.2, 0.2])]
        sp = split_dataset(ids, 0.007, seed=4, types=types, stratified=True)
        tmap = dict(zip(ids, types))
        counts = [sum(tmap[x] is t for x in sp.T2)
                  for t in (AgentType.VEHICLE, AgentType.PEDESTRIAN, AgentType.CYCLIST)]
        assert sum(counts) == 70
        for c, want in zip(counts, (42, 14, 14)):
            assert abs(c - want) <= 1, counts


def test_criterion_5_renderer_invariants():
    rng = np.random.default_rng(5)
    cfg = RenderConfig()
    ego = tuple(DEFAULT_PALETTE["ego"])
    sides = {AgentType.VEHICLE: 480, AgentType.PEDESTRIAN: 320, AgentType.CYCLIST: 240}
    assert cfg.crop_side(AgentType.VEHICLE) == 120.0 and cfg.resolution == 0.25
    with criterion(5, "ego at image center, rotation byte-identical, crop size by type", 60.0):
        seen = set()
        for s, _ in synth_fixtures(200, seed=55):
            img = render(s, cfg)
            atype = s.ego.agent_type
            seen.add(atype)
            assert (img.width, img.height) == (sides[atype], sides[atype])
            assert img.pixel(img.width // 2, img.height // 2) == ego
            moved = transform_scenario(s, float(rng.uniform(-math.pi, math.pi)), *rng.uniform(-500, 500, 2))
            assert render(moved, cfg).to_png() == img.to_png(), s.scenario_id
        assert AgentType.VEHICLE in seen


def _brute_ade(pred, gt, mask):
    best = math.inf
    for k in range(pred.shape[0]):
        tot, n = 0.0, 0
        for t in range(gt.shape[0]):
            if mask[t]:
                tot += math.hypot(pred[k, t, 0] - gt[t, 0], pred[k, t, 1] - gt[t, 1])
                n += 1
        best = min(best, tot / n)
    return best


def _brute_fde(pred, gt, mask):
    t = max(i for i in range(len(mask)) if mask[i])
    return min(math.hypot(pred[k, t, 0] - gt[t, 0], pred[k, t, 1] - gt[t, 1]) for k in range(pred.shape[0]))


def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(6)
    labels = list(IntentionLabel)
    with criterion(6, "minADE, minFDE, miss rate vs brute force; accuracy ordering", 30.0):
        worst = 0.0
        preds, gts, masks = [], [], []
        for _ in range(1_000):
            K, T = int(rng.integers(1, 7)), int(rng.integers(1, 81))
            gt = rng.normal(size=(T, 2)) * rng.uniform(0.1, 50)
            pred = gt + rng.normal(size=(K, T, 2)) * rng.uniform(0.01, 5)
            mask = rng.random(T) < 0.8
            mask[rng.integers(0, T)] = True
            worst = max(worst, abs(min_ade(pred, gt, mask) - _brute_ade(pred, gt, mask)),
                        abs(min_fde(pred, gt, mask) - _brute_fde(pred, gt, mask)))
            preds.append(pred)
            gts.append(gt)
            masks.append(mask)
        assert worst <= 1e-9, worst
        for thr in (0.5, 2.0, 5.0):
            want = sum(_brute_fde(p, g, m) > thr for p, g, m in zip(preds, gts, masks)) / len(preds)
            assert abs(miss_rate(preds, gts, masks, threshold=thr) - want) <= 1e-9

        for _ in range(300):
            n = int(rng.integers(1, 40))
            gt = [labels[i] for i in rng.integers(0, 8, n)]
            pr = [[labels[j] for j in rng.choice(8, size=int(rng.integers(1, 4)), replace=False)] for _ in range(n)]
            r = intention_accuracy(pr, gt)
            assert 0 <= r.acc_first <= r.acc_any <= r.acc_merged <= 1


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_7_end_to_end_mock_run(tmp_path, capsys):
    with criterion(7, "mock run with zero noise: perfect first intention, diagonal confusion, stable rerun", 120.0):
        truth = synth_fixtures(50, seed=7, out_dir=tmp_path / "ds")
        args = ["run", "--dataset", str(tmp_path / "ds"), "--mock", "--noise", "0"]
        assert main(args + ["--out", str(tmp_path / "out")]) == 0
        m = json.loads((tmp_path / "out" / "evaluate" / "metrics.json").read_text())
        assert m["intention"]["acc_first"] == 1.0
        counts = [sum(merge_straight(lab) is c for _, lab in truth) for c in CONFUSION_CLASSES]
        assert np.array_equal(np.array(m["intention"]["confusion"]), np.diag(counts))

        before = _tree(tmp_path / "out")
        capsys.readouterr()
        assert main(args + ["--out", str(tmp_path / "out")]) == 0
        assert all(line.endswith("skipped") for line in capsys.readouterr().out.strip().splitlines())
        assert _tree(tmp_path / "out") == before
        assert main(args + ["--out", str(tmp_path / "fresh")]) == 0
        assert _tree(tmp_path / "fresh") == before


def test_criterion_8_parser_roundtrip():
    rng = np.random.default_rng(8)
    labels = list(IntentionLabel)
    with criterion(8, "format then parse is the identity; literal lists parse as expected", 5.0):
        for _ in range(1_000):
            k = int(rng.integers(1, 4))
            intents = tuple(labels[i] for i in rng.choice(8, size=k, replace=False))
            aff = tuple(w for w in VOCAB.affordance_words if rng.random() < 0.4)
            scen = tuple(w for w in VOCAB.scenario_words if rng.random() < 0.4)
            reason = " ".join(rng.choice(["lane", "bends", "left", "signal", "red", "clear"], size=int(rng.integers(0, 6))))
            ctx = TransportationContext(intents, aff, scen, reason)
            assert parse_response(format_context(ctx), strict=True) == ctx
        lit = parse_response("INTENTIONS: [Straight, Right-Turn]\nAFFORDANCES: [Slow-Allow, Right-Allow]\n"
                             "SCENARIO: [Intersection]")
        assert lit == TransportationContext((IntentionLabel.STRAIGHT, IntentionLabel.RIGHT_TURN),
                                            ("Slow-Allow", "Right-Allow"), ("Intersection",))
