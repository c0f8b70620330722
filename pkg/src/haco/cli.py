"""Command line entry point: ``haco run | synth | audit``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .errors import HacoError, StageError


def _cmd_run(args: argparse.Namespace) -> int:
    from .pipeline import PipelineConfig, resolve_output_dir, run_pipeline

    cfg = PipelineConfig.load(args.config).with_overrides(seed=args.seed)
    out = resolve_output_dir(cfg, args.out)
    manifest = run_pipeline(cfg, threads=args.threads, output_dir=out, figures=args.figures)
    print(f"{len(manifest['artifacts'])} artifacts written to {out}")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    from .pipeline import OUTPUT_DIR_ENV, write_json
    from .synth import SynthConfig, generate_dataset
    from .trajectory_store import write_demographics, write_trajectories
    import os

    with open(args.config, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    block = dict(raw.get("synth", raw))
    block.setdefault("seed", raw.get("seed", 0) if "synth" in raw else 0)
    if args.seed is not None:
        block["seed"] = args.seed
    cfg = SynthConfig.from_dict(block)
    out = Path(args.out or os.environ.get(OUTPUT_DIR_ENV) or raw.get("output_dir") or "haco_synth")
    out.mkdir(parents=True, exist_ok=True)
    ds, mdp = generate_dataset(cfg, threads=args.threads)
    write_trajectories(ds, out / f"trajectories.{args.format}", format=args.format)
    write_demographics(ds, out / "demographics.csv")
    mdp.save_json(out / "ground_truth.json")
    write_json(out / "load_summary.json", {
        "rows_read": len(ds), "rows_dropped": 0, "episodes": ds.n_episodes,
        "patients": len(set(ds.patient_id)), "feature_count": len(ds.feature_names),
    })
    print(f"{len(ds)} steps, {ds.n_episodes} episodes written to {out}")
    return 0


def _cmd_audit(args: argparse.Namespace) -> int:
    from .pipeline import run_audit

    run_audit(
        dataset=args.dataset,
        policy=args.policy,
        demographics=args.demographics,
        out=args.out,
        config=args.config,
        seed=args.seed or 0,
        threads=args.threads,
        action_count=args.action_count,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="haco", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full pipeline from a config file")
    run.add_argument("--config", required=True, help="YAML pipeline config")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    run.add_argument("--out", help="output directory (beats HACO_OUTPUT_DIR and the config)")
    run.add_argument("--figures", action="store_true", help="also render PNG figures")
    run.set_defaults(func=_cmd_run)

    synth = sub.add_parser("synth", help="generate a synthetic dataset only")
    synth.add_argument("--config", required=True, help="YAML config with a synth section")
    synth.add_argument("--seed", type=int, help="override the config seed")
    synth.add_argument("--threads", type=int, default=1, help="worker threads")
    synth.add_argument("--out", help="output directory")
    synth.add_argument("--format", choices=("csv", "jsonl"), default="csv", help="trajectory file format")
    synth.set_defaults(func=_cmd_synth)

    aud = sub.add_parser("audit", help="subgroup audit of a dataset under a policy")
    aud.add_argument("--dataset", required=True, help="trajectory CSV or JSONL")
    aud.add_argument("--policy", required=True, help="policy JSON or per-step probability CSV")
    aud.add_argument("--demographics", action="append", default=[], help="demographics CSV (repeatable)")
    aud.add_argument("--config", help="optional pipeline config supplying fqe/audit settings")
    aud.add_argument("--action-count", type=int, default=9, help="size of the action set")
    aud.add_argument("--seed", type=int, help="bootstrap seed")
    aud.add_argument("--threads", type=int, default=1, help="worker threads")
    aud.add_argument("--out", help="output directory")
    aud.set_defaults(func=_cmd_audit)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"haco: stage '{exc.stage}' failed: {exc.cause}", file=sys.stderr)
        return 2
    except (HacoError, OSError, yaml.YAMLError) as exc:
        print(f"haco: stage 'config' failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
