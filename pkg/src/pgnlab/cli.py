"""Command-line entry point: ``pgnlab {train,evaluate,grid,visualize,analyze,synth}``.

Exit status is 0 on success, 1 on invalid input or configuration and 2 on
any other failure. Relative output directories are resolved against
``$PGNLAB_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

from .bpe import Tokenizer, TokenizerError
from .checkpoint import CheckpointError
from .corpus import CorpusError, ParallelCorpus, SyntheticPairSpec, load_parallel, save_parallel, \
    synthesize_language_pair, token_heuristics
from .metrics import MetricError
from .runconfig import RunConfig, load_config, parse_value
from .seq2seq import AttentionTrace
from .train import CompatibilityError, evaluate, load_model, prepare_splits, run_grid, \
    run_training, write_report
from .transformer import ConfigError
from .viz import write_svg

log = logging.getLogger("pgnlab")

OUTPUT_ROOT_ENV = "PGNLAB_OUTPUT_ROOT"
DEFAULT_GRID_SIZES = (5000, 15000, 30000, 60000)
VALIDATION_ERRORS = (ConfigError, CorpusError, TokenizerError, CompatibilityError, MetricError,
                     CheckpointError, FileNotFoundError)

ANALYZE_REPORT_SCHEMA = {
    "type": "object",
    "required": ["corpus", "pairs", "dropped", "tokenizer_budget", "vocab_size", "stats"],
    "properties": {
        "corpus": {"type": "string"},
        "pairs": {"type": "integer", "minimum": 0},
        "dropped": {"type": "integer", "minimum": 0},
        "tokenizer_budget": {"type": "integer", "minimum": 1},
        "vocab_size": {"type": "integer", "minimum": 1},
        "stats": {
            "type": "object",
            "required": ["common_tokens", "total_target_tokens", "total_lines",
                         "avg_common_per_line", "avg_common_per_target_token", "unk_rate"],
            "properties": {
                "common_tokens": {"type": "integer", "minimum": 0},
                "total_target_tokens": {"type": "integer", "minimum": 0},
                "total_lines": {"type": "integer", "minimum": 0},
                "avg_common_per_line": {"type": "number", "minimum": 0},
                "avg_common_per_target_token": {"type": "number", "minimum": 0, "maximum": 1},
                "unk_rate": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
    },
}


def resolve_output(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


# -- commands ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig):
    cfg.validate()
    out = resolve_output(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, dev, test = prepare_splits(cfg)
    for name, part in (("train", train), ("dev", dev), ("test", test)):
        save_parallel(part, out / f"{name}.src", out / f"{name}.tgt")
    result = run_training(cfg, train, dev, test, out_dir=out)
    log.info("best epoch %d (dev loss %.4f); checkpoints in %s", result.best_epoch,
             result.best_dev_loss, out)
    return result


def cmd_evaluate(checkpoint, test: ParallelCorpus, tokenizer_path=None, subset_k: int = 0,
                 out_dir=None) -> dict:
    tok_path = Path(tokenizer_path) if tokenizer_path else Path(checkpoint).parent / "tokenizer.bpe"
    tok = Tokenizer.load(tok_path)
    model = load_model(checkpoint, tok)
    if len(test) == 0:
        raise MetricError("test corpus is empty")
    report = evaluate(model, tok, test, subset_k)
    write_report(report, out_dir or Path(checkpoint).parent / "eval")
    return report


def cmd_grid(cfg: RunConfig, sizes: Sequence[int], jobs: int = 1) -> dict:
    return run_grid(cfg, sizes, resolve_output(cfg.output_dir), jobs=jobs)


def cmd_visualize(trace: AttentionTrace, out_path) -> Path:
    return write_svg(trace, out_path)


def cmd_analyze_corpus(corpus: ParallelCorpus, budget: int) -> dict:
    tok = Tokenizer.train(corpus.sources + corpus.targets, budget)
    stats = token_heuristics(corpus, tok)
    return {"corpus": corpus.name, "pairs": len(corpus), "dropped": corpus.dropped,
            "tokenizer_budget": budget, "vocab_size": len(tok), "stats": stats.to_dict()}


SPEC_KEYS = {"vocab_size": int, "min_len": int, "max_len": int, "cognate_rate": float,
             "sound_change_rate": float, "noise_rate": float, "seed": int, "num_pairs": int,
             "zipf": float}


def load_synth_spec(path) -> SyntheticPairSpec:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = (part.strip() for part in line.partition("="))
        if not sep or key not in SPEC_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown or malformed entry {line!r}")
        try:
            values[key] = SPEC_KEYS[key](val)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value {val!r} for {key}") from None
    lo, hi = values.pop("min_len", 3), values.pop("max_len", 8)
    spec = SyntheticPairSpec(sentence_length_range=(lo, hi), **values)
    spec.validate()
    return spec


# -- argument parsing ---------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    group = p.add_argument_group("run configuration overrides")
    for f in fields(RunConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", default=None,
                           metavar="VALUE")


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for f in fields(RunConfig):
        raw = getattr(args, f"cfg_{f.name}")
        if raw is not None:
            overrides[f.name] = parse_value(f.name, raw)
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgnlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a tokenizer and an NMT/PGN model")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="decode a test corpus and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--tokenizer")
    p.add_argument("--subset-k", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("grid", help="NMT vs PGN across training sizes")
    _add_config_flags(p)
    p.add_argument("--sizes", default=",".join(map(str, DEFAULT_GRID_SIZES)))
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("visualize", help="render an attention trace JSON file as SVG")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("analyze", help="token-overlap statistics for a corpus")
    p.add_argument("--src")
    p.add_argument("--tgt")
    p.add_argument("--synth-spec")
    p.add_argument("--budget", type=int, default=16000)
    p.add_argument("--out")

    p = sub.add_parser("synth", help="generate a synthetic related-language corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out-prefix", required=True, help="writes PREFIX.src and PREFIX.tgt")
    return parser


def _corpus_from_args(args) -> ParallelCorpus:
    if args.synth_spec:
        return synthesize_language_pair(load_synth_spec(args.synth_spec))
    if not (args.src and args.tgt):
        raise ConfigError("give --src and --tgt, or --synth-spec")
    return load_parallel(args.src, args.tgt)


def _dispatch(args) -> None:
    if args.command == "train":
        cmd_train(_config_from_args(args))
    elif args.command == "evaluate":
        test = load_parallel(args.src, args.tgt)
        report = cmd_evaluate(args.checkpoint, test, args.tokenizer, args.subset_k, args.out)
        summary = {"bleu": report["bleu"]["score"], "token_accuracy": report["token_accuracy"]}
        if "subsets" in report:
            summary.update({k: report["subsets"][k] for k in
                            ("k", "high_mean_overlap", "low_mean_overlap", "high_bleu", "low_bleu")})
        print(json.dumps(summary, indent=1))
    elif args.command == "grid":
        try:
            sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"bad --sizes {args.sizes!r}") from None
        summary = cmd_grid(_config_from_args(args), sizes, args.jobs)
        print(summary["table"], end="")
        if summary["errors"]:
            raise RuntimeError(f"grid cells failed: {summary['errors']}")
    elif args.command == "visualize":
        trace = AttentionTrace.from_dict(json.loads(Path(args.trace).read_text(encoding="utf-8")))
        try:
            trace.validate()
        except ValueError as exc:
            raise ConfigError(f"invalid trace: {exc}") from None
        cmd_visualize(trace, args.out)
    elif args.command == "analyze":
        report = cmd_analyze_corpus(_corpus_from_args(args), args.budget)
        text = json.dumps(report, indent=1, sort_keys=True)
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(text)
    elif args.command == "synth":
        corpus = synthesize_language_pair(load_synth_spec(args.spec))
        prefix = args.out_prefix
        save_parallel(corpus, prefix + ".src", prefix + ".tgt")
        print(f"wrote {len(corpus)} pairs to {prefix}.src / {prefix}.tgt")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        _dispatch(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
