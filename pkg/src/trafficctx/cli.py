"""Command-line entry point: ``trafficctx <subcommand>``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 stage failure,
3 LLM budget exceeded.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .config import ConfigError, defaults_toml, load_config, validate
from .llm import BudgetExceeded, NoiseConfig
from .prompt import TemplateError
from .synth import synth_fixtures

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_BUDGET = 0, 1, 2, 3


def _cfg(args, overrides: dict | None = None, need_dataset: bool = True):
    raw = load_config(getattr(args, "config", None), overrides)
    base = Path(args.config).parent if getattr(args, "config", None) else Path(".")
    if not need_dataset:
        raw["paths"]["dataset_dir"] = "."
    return validate(raw, base)


def _overrides(args) -> dict:
    o: dict = {}
    if getattr(args, "mock", False):
        o.setdefault("llm", {})["mode"] = "mock"
    if getattr(args, "noise", None) is not None:
        o.setdefault("mock", {})["noise"] = args.noise
    if getattr(args, "seed", None) is not None:
        o.setdefault("mock", {})["seed"] = args.seed
    return o


def cmd_config(args) -> int:
    if args.print_defaults:
        sys.stdout.write(defaults_toml())
        return EXIT_OK
    cfg = _cfg(args)
    sys.stdout.write(f"config OK: dataset {cfg.dataset_dir}, output {cfg.output_dir}\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    synth_fixtures(args.n, args.seed, args.out)
    print(f"wrote {args.n} scenarios to {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    pl.run_stage("ingest", Path(args.out), [Path(args.inp)], {}, lambda o: pl.ingest(Path(args.inp), o))
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _cfg(args, need_dataset=False)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    pl.render_dir(Path(args.inp), Path(args.out), cfg.render)
    return EXIT_OK


def cmd_prompt(args) -> int:
    cfg = _cfg(args, need_dataset=False)
    if args.template and not Path(args.template).exists():
        raise ConfigError("--template", f"file not found: {args.template}")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    pl.prompt_dir(Path(args.inp), Path(args.out), cfg.render, Path(args.template) if args.template else cfg.template,
                  cfg.vocab)
    return EXIT_OK


def cmd_annotate(args) -> int:
    cfg = _cfg(args, _overrides(args), need_dataset=False)
    if cfg.mode == "mock" and not args.dataset:
        raise ConfigError("--dataset", "mock annotation needs the scenario directory")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    only = args.scenarios.split(",") if args.scenarios else None
    pl.annotate_dir(Path(args.inp), Path(args.out), cfg.mode, Path(args.dataset) if args.dataset else None,
                    cfg.noise, cfg.endpoint, cfg.cache_dir, cfg.vocab, only)
    return EXIT_OK


def cmd_encode(args) -> int:
    cfg = _cfg(args, need_dataset=False)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    pl.encode_dir(Path(args.dataset), Path(args.contexts) if args.contexts else None, Path(args.out), cfg.render,
                  cfg.vocab, cfg.feature_mask)
    return EXIT_OK


def cmd_propagate(args) -> int:
    cfg = _cfg(args, need_dataset=False)
    fraction = cfg.fraction if args.fraction is None else args.fraction
    if not 0 < fraction < 0.5:
        raise ConfigError("--fraction", f"must be in (0, 0.5), got {fraction}")
    info = pl.propagate_dir(Path(args.dataset), Path(args.contexts), Path(args.out), fraction,
                            cfg.split_seed if args.seed is None else args.seed,
                            args.stratified or cfg.stratified, args.exact or cfg.exact, cfg.render,
                            mask=cfg.feature_mask)
    print(f"propagated {info['T1']} items from {info['T2']} annotated items")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _cfg(args, need_dataset=False)
    m = pl.evaluate_dir(Path(args.pred), Path(args.gt), Path(args.out), cfg.miss_threshold,
                        Path(args.contexts) if args.contexts else None)
    if m["intention"]:
        print(f"acc_first {m['intention']['acc_first']:.4f}  acc_any {m['intention']['acc_any']:.4f}  "
              f"acc_merged {m['intention']['acc_merged']:.4f}")
    return EXIT_OK


def cmd_run(args) -> int:
    o = _overrides(args)
    if args.dataset:
        o.setdefault("paths", {})["dataset_dir"] = str(Path(args.dataset).resolve())
    if args.out:
        o.setdefault("paths", {})["output_dir"] = str(Path(args.out).resolve())
    cfg = _cfg(args, o)
    status = pl.run_pipeline(cfg, force=args.force)
    for name in pl.STAGES:
        print(f"{name:<10} {status[name]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trafficctx", description="Transportation-context augmentation pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="TOML configuration file")
        return sp

    sp = add("config", cmd_config, "validate a config or print the defaults")
    sp.add_argument("--print-defaults", action="store_true")

    sp = add("synth", cmd_synth, "generate synthetic intersection scenarios")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("ingest", cmd_ingest, "validate and canonicalize a scenario directory")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)

    sp = add("render", cmd_render, "render context maps")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)

    sp = add("prompt", cmd_prompt, "build image + text prompts")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--template")
    sp.add_argument("--out", required=True)

    sp = add("annotate", cmd_annotate, "query the LLM (or the mock) for contexts")
    sp.add_argument("--in", dest="inp", required=True, help="prompt directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dataset", help="scenario directory (required with --mock)")
    sp.add_argument("--mock", action="store_true")
    sp.add_argument("--noise", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--scenarios", help="comma-separated subset of scenario ids")

    sp = add("encode", cmd_encode, "feature vectors and encoded contexts")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--contexts")
    sp.add_argument("--out", required=True)

    sp = add("propagate", cmd_propagate, "split and propagate contexts by nearest neighbor")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--contexts", required=True)
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--exact", action="store_true", help="brute-force scan instead of the k-d tree")
    sp.add_argument("--stratified", action="store_true")

    sp = add("evaluate", cmd_evaluate, "intention and trajectory metrics")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--contexts", help="annotate directory; intention table uses direct annotations")

    sp = add("run", cmd_run, "run every stage")
    sp.add_argument("--dataset")
    sp.add_argument("--out")
    sp.add_argument("--mock", action="store_true")
    sp.add_argument("--noise", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--force", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, TemplateError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetExceeded as e:
        print(f"budget exceeded: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except pl.StageError as e:
        print(f"stage failed: {e}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
