"""Command line entry point.

    concise-rl train   --config PATH [--preset desk|paper-scaled|paper] [--output-dir DIR]
    concise-rl eval    --checkpoint PATH [--config PATH] [--preset NAME] [--dump PATH]
    concise-rl analyze keywords --corpus PATH [--pool PATH] [--extra PHRASE ...] [--overlapping]
    concise-rl analyze lengths  --corpus PATH [--unit tokens|chars]
    concise-rl analyze curves   --metrics PATH --out DIR

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 batch starvation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from concise_rl import analysis_cli, config, trainer
from concise_rl.checkpoint import CheckpointError, load_checkpoint
from concise_rl.policy_core import ConfigError
from concise_rl.rollout_engine import BatchStarvation, write_jsonl

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_STARVED = 0, 1, 2, 3

log = logging.getLogger("concise_rl")


def _load(args) -> config.RunConfig:
    if args.config:
        return config.load_config(args.config, args.preset)
    return config.preset(args.preset)


def _print_json(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    res = trainer.run_two_stage(cfg)
    summary = {"output_dir": res.output_dir, "evals": [
        {"stage": st, "step": step, "pass_at_1": ev.pass_at_1, "mean_len": ev.mean_len}
        for st, step, ev in res.evals]}
    _print_json(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    params, header = load_checkpoint(args.checkpoint)
    e = cfg.eval
    ev = trainer.evaluate(params, trainer.eval_questions(cfg), int(e["samples_per_question"]),
                          float(e["temperature"]), float(e["top_p"]), int(e["L_max"]), cfg.seed,
                          key=args.key)
    if args.dump:
        with open(args.dump, "w") as f:
            write_jsonl(ev.corpus, f)
    _print_json({"checkpoint": args.checkpoint, "stage": header.get("stage"),
                 "step": header.get("step"), "pass_at_1": ev.pass_at_1,
                 "mean_len": ev.mean_len, "empty_think_frac": ev.empty_think_frac,
                 "n_questions": len(ev.rows),
                 "samples_per_question": int(e["samples_per_question"])})
    return EXIT_OK


def cmd_keywords(args) -> int:
    pool = analysis_cli.load_pool(args.pool, args.extra or ())
    _print_json(analysis_cli.count_keywords(args.corpus, pool, args.overlapping))
    return EXIT_OK


def cmd_lengths(args) -> int:
    _print_json(analysis_cli.length_stats(args.corpus, args.unit).to_json())
    return EXIT_OK


def cmd_curves(args) -> int:
    for path in analysis_cli.emit_curves(args.metrics, args.out):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="concise-rl", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    presets = sorted(config.PRESETS)

    p = sub.add_parser("train", help="run stage 1 then stage 2")
    p.add_argument("--config", help="run config JSON, merged over the preset")
    p.add_argument("--preset", default="desk", choices=presets)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="pass@1 and mean length of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--preset", default="desk", choices=presets)
    p.add_argument("--key", type=int, default=0, help="sampling stream key")
    p.add_argument("--dump", help="write the sampled responses as a corpus JSONL")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="trace diagnostics")
    asub = p.add_subparsers(dest="analysis", required=True)
    k = asub.add_parser("keywords", help="reflection keyword counts")
    k.add_argument("--corpus", required=True)
    k.add_argument("--pool", help="JSON list or one phrase per line")
    k.add_argument("--extra", nargs="*", help="phrases added to the pool")
    k.add_argument("--overlapping", action="store_true",
                   help="count every phrase independently")
    k.set_defaults(func=cmd_keywords)
    ln = asub.add_parser("lengths", help="correct / incorrect length report")
    ln.add_argument("--corpus", required=True)
    ln.add_argument("--unit", default="tokens", choices=["tokens", "chars"])
    ln.set_defaults(func=cmd_lengths)
    c = asub.add_parser("curves", help="TSV curves from a metrics CSV")
    c.add_argument("--metrics", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_curves)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BatchStarvation as exc:
        print(f"batch starvation: {exc}", file=sys.stderr)
        return EXIT_STARVED
    except (CheckpointError, analysis_cli.CorpusError, analysis_cli.SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
