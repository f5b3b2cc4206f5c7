"""Command-line entry point.

Every subcommand takes ``--config FILE --seed N --out DIR``, prints one JSON
summary line on success and exits 0.  Failures print a single JSON line
``{"error": <type>, "message": <text>}`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import duplex as dx
from .checkpoint import load_checkpoint
from .config import apply_overrides, load_config, parse_assignments
from .corpus import write_corpus
from .evaluate import evaluate, loss_curves_from_log
from .gradcheck import EPS, TOLERANCE, run_gradcheck
from .mllm import prompt_sequence
from .pipeline import (LOG_NAME, build_codec, build_corpus, ckpt_path, duplex_scripts, load_utterances,
                       model_from_checkpoint, run_merge, run_pipeline, run_stage, train_duplex)
from .tokens import TokenStream, encode_synthetic, format_stream

EXIT_ERROR = 2
EXIT_CHECK_FAILED = 1


class UsageError(ValueError):
    pass


class CheckFailed(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file ([section] key = value)")
    p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    p.add_argument("--out", default="run", help="output directory (default ./run)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", default=[],
                   help="override one config value; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualres", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="write train/held-out corpora and duplex scripts")
    _common(p)

    for name, stage in (("prealign", "prealign"), ("train-stage1", "cocktail1"),
                        ("train-stage2", "cocktail2"), ("dpo", "dpo")):
        p = sub.add_parser(name, help=f"run the {stage} stage")
        _common(p)
        p.add_argument("--init", help="upstream checkpoint (default: previous stage in --out)")
        p.add_argument("--corpus", help="corpus file (default: --out/corpus_train.txt, else from config)")
        p.set_defaults(stage=stage)

    p = sub.add_parser("merge", help="interpolate two checkpoints")
    _common(p)
    p.add_argument("--m0", help="base checkpoint (default --out/prealign.ckpt)")
    p.add_argument("--m1", help="fine-tuned checkpoint (default --out/cocktail1.ckpt)")
    p.add_argument("--alpha", type=float, help="weight of m1 (default from config)")

    p = sub.add_parser("pipeline", help="run every stage, resuming at the first missing checkpoint")
    _common(p)
    p.add_argument("--init", help="starting checkpoint for pre-alignment")
    p.add_argument("--corpus", help="corpus file")
    p.add_argument("--no-resume", action="store_true", help="retrain stages even if up to date")

    p = sub.add_parser("generate", help="decode replies with a checkpoint")
    _common(p)
    p.add_argument("--ckpt", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--prompt", help="user text ids, space separated")
    group.add_argument("--corpus", help="corpus file whose user turns are used as prompts")
    p.add_argument("--mode", choices=("greedy", "sampled"), default="greedy")
    p.add_argument("--max-new", type=int, default=None)

    p = sub.add_parser("duplex-sim", help="simulate duplex scripts, write traces and metrics")
    _common(p)
    p.add_argument("--scripts", help="script file (default: --out/duplex_scripts.jsonl, else from config)")
    p.add_argument("--ckpt", help="duplex checkpoint (default --out/duplex.ckpt; trained if missing)")
    p.add_argument("--mode", choices=("greedy", "sampled"), default="greedy")

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", help="corpus file (default: split from [eval] config)")

    p = sub.add_parser("gradcheck", help="compare autograd against finite differences")
    _common(p)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--eps", type=float, default=EPS)
    return parser


def _config(args):
    return apply_overrides(load_config(args.config), parse_assignments(args.set))


def _default_corpus(args):
    if getattr(args, "corpus", None):
        return args.corpus
    path = Path(args.out) / "corpus_train.txt"
    return path if path.exists() else None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_gen_corpus(args, cfg) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # --seed shifts the configured split seed so one config yields many corpora
    cfg.corpus = dataclasses.replace(cfg.corpus, split_seed=cfg.corpus.split_seed + args.seed)
    corpus = build_corpus(cfg)
    write_corpus(out / "corpus_train.txt", corpus.train)
    write_corpus(out / "corpus_heldout.txt", corpus.heldout)
    scripts = duplex_scripts(cfg)
    dx.write_scripts(out / "duplex_scripts.jsonl", scripts)
    stats = {"train": len(corpus.train), "heldout": len(corpus.heldout),
             "lengths": {str(k): v for k, v in sorted(corpus.lengths().items())},
             "duplex_scripts": len(scripts)}
    _write_json(out / "corpus_stats.json", stats)
    return stats


def cmd_stage(args, cfg) -> dict:
    ck = run_stage(args.stage, cfg, args.out, args.seed, init=args.init, corpus_file=_default_corpus(args),
                   resume=False)
    m = ck.metadata
    return {"stage": ck.stage, "checkpoint": str(ckpt_path(args.out, ck.stage)),
            "corpus_loss_before": m["corpus_loss_before"], "corpus_loss_after": m["corpus_loss_after"]}


def cmd_merge(args, cfg) -> dict:
    if args.alpha is not None:
        cfg = apply_overrides(cfg, {"merge": {"alpha": str(args.alpha)}})
    ck = run_merge(cfg, args.out, args.seed, m0=args.m0, m1=args.m1, resume=False)
    return {"stage": "merged", "checkpoint": str(ckpt_path(args.out, "merged")), "alpha": cfg.merge.alpha}


def cmd_pipeline(args, cfg) -> dict:
    cks = run_pipeline(cfg, args.out, args.seed, init=args.init, corpus_file=_default_corpus(args),
                       resume=not args.no_resume)
    return {"stages": list(cks), "final": str(ckpt_path(args.out, "dpo")),
            "final_corpus_loss": cks["dpo"].metadata.get("corpus_loss_after")}


def cmd_generate(args, cfg) -> dict:
    ck = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(cfg, ck, args.seed)
    codec = build_codec(cfg)
    k = cfg.model.k
    if args.prompt is not None:
        try:
            ids = [int(x) for x in args.prompt.split()]
        except ValueError:
            raise UsageError(f"--prompt must be integer ids, got {args.prompt!r}") from None
        prompts = [encode_synthetic(TokenStream.text(ids, channel="user"), codec).ids]
    else:
        prompts = [u.user_speech.ids for u in load_utterances(cfg, args.corpus, cfg.eval.split)]
    lines = []
    for i, speech in enumerate(prompts):
        steps = model.generate(prompt_sequence(speech, k), args.mode, seed=args.seed + i, max_new=args.max_new)
        lines.append(format_stream(TokenStream.text([s.text for s in steps])))
        lines.append(format_stream(TokenStream.speech([x for s in steps for x in s.speech])))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "generations.txt").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return {"generations": len(prompts), "file": str(out / "generations.txt")}


def cmd_duplex_sim(args, cfg) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    codec = build_codec(cfg)
    default_scripts = out / "duplex_scripts.jsonl"
    if args.scripts:
        scripts = dx.read_scripts(args.scripts)
    elif default_scripts.exists():
        scripts = dx.read_scripts(default_scripts)
    else:
        scripts = duplex_scripts(cfg)
        dx.write_scripts(default_scripts, scripts)
    path = Path(args.ckpt) if args.ckpt else ckpt_path(out, "duplex")
    if path.exists():
        ck = load_checkpoint(path)
    elif args.ckpt:
        raise FileNotFoundError(f"{path}: no such checkpoint")
    else:
        ck = train_duplex(cfg, scripts, out, args.seed)
    model = model_from_checkpoint(cfg, ck, args.seed)
    policy = cfg.duplex.policy()
    traces = [dx.simulate(model, s, codec, policy, args.mode, seed=args.seed + i) for i, s in enumerate(scripts)]
    dx.write_traces(out / "duplex_traces.jsonl", traces)
    metrics = dx.score_duplex(traces, scripts, codec, cfg.duplex.start_window, cfg.duplex.yield_window).to_dict()
    _write_json(out / "duplex_metrics.json", metrics)
    return metrics


def cmd_eval(args, cfg) -> dict:
    ck = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(cfg, ck, args.seed)
    utts = load_utterances(cfg, args.corpus, cfg.eval.split)
    report = evaluate(model, utts, build_codec(cfg), max_new=cfg.eval.max_new or None,
                      loss_curves=loss_curves_from_log(Path(args.out) / LOG_NAME))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", report.to_dict())
    return {"text_accuracy": report.text_accuracy, "alignment_error_rate": report.alignment_error_rate,
            "n_utterances": report.n_utterances, "checkpoint_stage": ck.stage}


def cmd_gradcheck(args, cfg) -> dict:
    worst = run_gradcheck(args.instances, seed=args.seed, eps=args.eps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = {"instances": args.instances, "eps": args.eps, "tolerance": TOLERANCE, "max_relative_error": worst}
    _write_json(out / "gradcheck.json", result)
    failed = sorted(n for n, e in worst.items() if not e < TOLERANCE)
    if failed:
        raise CheckFailed(f"relative error >= {TOLERANCE} for: {', '.join(failed)}")
    return result


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "prealign": cmd_stage, "train-stage1": cmd_stage, "train-stage2": cmd_stage,
    "dpo": cmd_stage, "merge": cmd_merge, "pipeline": cmd_pipeline, "generate": cmd_generate,
    "duplex-sim": cmd_duplex_sim, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
}


def _fail(exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(json.dumps({"error": type(exc).__name__, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        result = COMMANDS[args.command](args, _config(args))
    except CheckFailed as exc:
        return _fail(exc, EXIT_CHECK_FAILED)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        return _fail(exc, EXIT_ERROR)
    print(json.dumps({"command": args.command, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
