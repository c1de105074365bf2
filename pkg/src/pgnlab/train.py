"""Training loop, evaluation and the NMT-vs-PGN size grid."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .bpe import SPECIAL_IDS, Tokenizer
from .checkpoint import load_checkpoint, params_to_tensors, save_checkpoint
from .corpus import ParallelCorpus, build_controlled_subsets, load_parallel, split_corpus, \
    synthesize_language_pair
from .metrics import CopyUsageRecord, MetricError, attention_entropy, copy_usage_summary, \
    pcopy_entropy_correlation, sp_bleu
from .optim import Adam
from .runconfig import RunConfig
from .seq2seq import AttentionTrace, Seq2Seq, make_batch, plain_loss
from .transformer import ConfigError
from .viz import write_svg

log = logging.getLogger(__name__)

Pair = tuple[list[int], list[int]]


class CompatibilityError(RuntimeError):
    pass


# -- data -----------------------------------------------------------------------------

def build_corpus(cfg: RunConfig) -> ParallelCorpus:
    if cfg.synthetic:
        return synthesize_language_pair(cfg.synthetic_spec())
    return load_parallel(cfg.src_path, cfg.tgt_path)


def prepare_splits(cfg: RunConfig, corpus: Optional[ParallelCorpus] = None):
    corpus = corpus if corpus is not None else build_corpus(cfg)
    return split_corpus(corpus, cfg.train_size, cfg.dev_size, cfg.test_size, cfg.seed)


def train_tokenizer(train: ParallelCorpus, budget: int) -> Tokenizer:
    """Joint tokenizer over both sides of the training split."""
    return Tokenizer.train(train.sources + train.targets, budget)


def encode_corpus(corpus: ParallelCorpus, tok: Tokenizer) -> list[Pair]:
    return [(list(tok.encode(s).ids), list(tok.encode(t).ids)) for s, t in corpus.pairs]


# -- training -------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: Optional[float]
    step_losses: list[float]
    seconds: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss, "dev_loss": self.dev_loss,
                "step_losses": self.step_losses, "seconds": round(self.seconds, 3)}


@dataclass
class TrainResult:
    model: Seq2Seq
    tokenizer: Tokenizer
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_loss: float = math.inf
    out_dir: Optional[Path] = None
    steps: int = 0


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


class Trainer:
    """Minibatch Adam training of a :class:`Seq2Seq`.

    ``objective`` selects the loss: ``"model"`` uses the model's own output
    distribution (PGN mixture or generate-only), ``"plain"`` always uses the
    bare encoder-decoder softmax objective.
    """

    def __init__(self, model: Seq2Seq, cfg: RunConfig, objective: str = "model"):
        if objective not in ("model", "plain"):
            raise ValueError(f"unknown objective {objective!r}")
        self.model = model
        self.cfg = cfg
        self.objective = objective
        self.opt = Adam(model.params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2),
                        eps=cfg.adam_eps)

    def _loss(self, batch, rng) -> ag.Tensor:
        if self.objective == "plain":
            return plain_loss(self.model.core, batch, rng)
        return self.model.loss(batch, rng)

    def train_epoch(self, data: Sequence[Pair], epoch: int) -> list[float]:
        cfg = self.cfg
        order = batch_order(len(data), cfg.seed, epoch)
        losses = []
        for b, start in enumerate(range(0, len(data), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = make_batch([data[i] for i in idx], self.model.config.max_len)
            rng = np.random.default_rng([cfg.seed, epoch, b])
            self.opt.zero_grad()
            loss = self._loss(batch, rng)
            ag.backward(loss)
            self.opt.step()
            losses.append(loss.item())
        return losses

    def eval_loss(self, data: Sequence[Pair], batch_size: int = 64) -> float:
        total = weight = 0.0
        with ag.no_grad():
            for start in range(0, len(data), batch_size):
                batch = make_batch(data[start:start + batch_size], self.model.config.max_len)
                n = float((~batch.tgt_mask).sum())
                total += self._loss(batch, None).item() * n
                weight += n
        return total / weight if weight else math.nan


def snapshot_traces(model: Seq2Seq, tok: Tokenizer, probes: Sequence[Pair], step: int,
                    out_dir: Path, epoch: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, (s, t) in enumerate(probes):
        trace = model.trace_pair(s, t, step=step)
        label_trace(trace, tok)
        stem = out_dir / f"epoch{epoch:03d}_probe{i}"
        stem.with_suffix(".json").write_text(json.dumps(trace.to_dict()), encoding="utf-8")
        write_svg(trace, stem.with_suffix(".svg"))


def label_trace(trace: AttentionTrace, tok: Tokenizer) -> AttentionTrace:
    words = tok.vocab.id_to_subword
    trace.source_tokens = [words[i] for i in trace.source_ids]
    trace.target_tokens = [words[i] for i in trace.target_ids]
    return trace


def run_training(cfg: RunConfig, train: ParallelCorpus, dev: ParallelCorpus,
                 test: Optional[ParallelCorpus] = None, tokenizer: Optional[Tokenizer] = None,
                 out_dir=None, objective: str = "model",
                 stop_after: Optional[int] = None) -> TrainResult:
    """Train until ``patience`` epochs pass without dev improvement or ``max_epochs``.

    With ``out_dir`` set, writes the tokenizer, ``train_log.jsonl``,
    ``last.ckpt``, ``best.ckpt`` and attention snapshots for the first two
    test pairs. ``stop_after`` ends the run after that epoch regardless of
    convergence (used to produce resumable partial runs).
    """
    cfg.validate()
    tok = tokenizer or (Tokenizer.load(cfg.tokenizer_path) if cfg.tokenizer_path
                        else train_tokenizer(train, cfg.tokenizer_budget))
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        tok.save(out / "tokenizer.bpe")
        cfg.save(out / "config.txt")
    vocab_hash = tok.fingerprint()
    train_ids, dev_ids = encode_corpus(train, tok), encode_corpus(dev, tok)
    probes = encode_corpus(test, tok)[:2] if test is not None and len(test) else []

    mcfg = cfg.model_config(len(tok))
    model = Seq2Seq.initialize(mcfg, cfg.seed)
    trainer = Trainer(model, cfg, objective)
    result = TrainResult(model, tok, out_dir=out)
    start_epoch, since_best = 1, 0

    if cfg.resume:
        ck = load_checkpoint(cfg.resume)
        if ck.vocab_hash != vocab_hash:
            raise CompatibilityError("resume checkpoint was trained with a different vocabulary")
        for k, v in ck.params.items():
            model.params[k].data[...] = v
        if ck.adam is not None:
            trainer.opt.state = ck.adam
        start_epoch = int(ck.extra.get("epoch", 0)) + 1
        since_best = int(ck.extra.get("since_best", 0))
        result.best_epoch = int(ck.extra.get("best_epoch", 0))
        result.best_dev_loss = float(ck.extra.get("best_dev_loss", math.inf))
        result.history = [EpochRecord(r["epoch"], r["train_loss"], r["dev_loss"],
                                      r["step_losses"], 0.0)
                          for r in ck.extra.get("history", [])]

    log_file = open(out / "train_log.jsonl", "a", encoding="utf-8") if out else None
    try:
        for epoch in range(start_epoch, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            steps = trainer.train_epoch(train_ids, epoch)
            dev_loss = trainer.eval_loss(dev_ids) if dev_ids else None
            rec = EpochRecord(epoch, float(np.mean(steps)), dev_loss, steps,
                              time.perf_counter() - t0)
            result.history.append(rec)
            log.info("epoch %d train %.4f dev %s (%.1fs)", epoch, rec.train_loss,
                     "n/a" if dev_loss is None else f"{dev_loss:.4f}", rec.seconds)
            improved = dev_loss is not None and dev_loss < result.best_dev_loss
            if improved:
                result.best_dev_loss, result.best_epoch, since_best = dev_loss, epoch, 0
            else:
                since_best += 1
            if log_file:
                log_file.write(json.dumps(rec.to_dict()) + "\n")
                log_file.flush()
                extra = {"epoch": epoch, "since_best": since_best,
                         "best_epoch": result.best_epoch, "best_dev_loss": result.best_dev_loss,
                         # wall-clock times stay out so checkpoints are reproducible
                         "history": [{k: v for k, v in r.to_dict().items() if k != "seconds"}
                                     for r in result.history]}
                kw = dict(vocab_hash=vocab_hash, seed=cfg.seed, step=trainer.opt.state.step,
                          extra=extra)
                save_checkpoint(out / "last.ckpt", mcfg, model.params, adam=trainer.opt.state, **kw)
                if improved or dev_loss is None:
                    save_checkpoint(out / "best.ckpt", mcfg, model.params, **kw)
                if probes and epoch % cfg.snapshot_every == 0:
                    snapshot_traces(model, tok, probes, trainer.opt.state.step,
                                    out / "snapshots", epoch)
            if stop_after is not None and epoch >= stop_after:
                break
            if since_best >= cfg.patience:
                log.info("no dev improvement for %d epochs; stopping", since_best)
                break
    finally:
        if log_file:
            log_file.close()
    result.steps = trainer.opt.state.step
    if out and (out / "best.ckpt").exists():
        best = load_checkpoint(out / "best.ckpt")
        for k, v in best.params.items():
            model.params[k].data[...] = v
    return result


# -- evaluation -------------------------------------------------------------------------

def token_accuracy(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]]) -> float:
    """Position-wise exact matches over ``max(len(hyp), len(ref))`` summed over the corpus."""
    hit = total = 0
    for h, r in zip(hyps, refs):
        hit += sum(1 for a, b in zip(h, r) if a == b)
        total += max(len(h), len(r))
    return hit / total if total else 1.0


def default_subset_k(test_size: int, requested: int = 0) -> int:
    return requested if requested else min(500, test_size // 10)


def usage_records(decoded, sources: Sequence[Sequence[int]], step: int) -> list[CopyUsageRecord]:
    records = []
    for sid, ((hyp, trace), src) in enumerate(zip(decoded, sources)):
        if trace.p_copy is None:
            continue
        src_set = set(src) - SPECIAL_IDS
        for t, tok_id in enumerate(hyp):
            records.append(CopyUsageRecord(
                token_id=tok_id, p_copy=trace.p_copy[t],
                entropy=attention_entropy(trace.attention[t]),
                in_source=tok_id in src_set, sentence_id=sid, step=step))
    return records


def evaluate(model: Seq2Seq, tok: Tokenizer, test: ParallelCorpus, subset_k: int = 0,
             step: int = 0) -> dict:
    """Greedy-decode ``test`` and score it overall and on high/low overlap subsets."""
    if len(test) == 0:
        raise MetricError("cannot evaluate on an empty test set")
    data = encode_corpus(test, tok)
    sources = [s for s, _ in data]
    refs = [t for _, t in data]
    decoded = model.greedy_decode(sources)
    hyps = [h for h, _ in decoded]
    bleu = sp_bleu(hyps, refs)
    report = {
        "test_size": len(test),
        "pgn_enabled": model.config.pgn_enabled,
        "step": step,
        "bleu": bleu.to_dict(),
        "token_accuracy": token_accuracy(hyps, refs),
        "hypotheses": hyps,
    }
    k = default_subset_k(len(test), subset_k)
    if k >= 1 and len(test) >= 2 * k:
        sub = build_controlled_subsets(test, tok, k)
        report["subsets"] = {
            "k": k,
            "high_mean_overlap": sub.high_mean,
            "low_mean_overlap": sub.low_mean,
            "ranking_ok": sub.high_mean >= sub.low_mean,
            "high_bleu": sp_bleu([hyps[i] for i in sub.high_indices],
                                 [refs[i] for i in sub.high_indices]).score,
            "low_bleu": sp_bleu([hyps[i] for i in sub.low_indices],
                                [refs[i] for i in sub.low_indices]).score,
            "high_indices": sub.high_indices,
            "low_indices": sub.low_indices,
        }
    records = usage_records(decoded, sources, step)
    if records:
        report["mean_p_copy"] = float(np.mean([r.p_copy for r in records]))
        report["copy_usage"] = copy_usage_summary(records).to_dict()
        try:
            report["pcopy_entropy_r"] = pcopy_entropy_correlation(records)
        except MetricError:
            report["pcopy_entropy_r"] = None
    report["_records"] = records
    return report


def write_report(report: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = report.get("_records", [])
    with open(out / "copy_usage.jsonl", "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict()) + "\n")
    clean = {k: v for k, v in report.items() if not k.startswith("_")}
    path = out / "report.json"
    path.write_text(json.dumps(clean, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_model(checkpoint_path, tok: Optional[Tokenizer] = None) -> Seq2Seq:
    ck = load_checkpoint(checkpoint_path)
    if tok is not None and ck.vocab_hash and ck.vocab_hash != tok.fingerprint():
        raise CompatibilityError(f"{checkpoint_path} was trained with a different vocabulary "
                                 "than the supplied tokenizer")
    return Seq2Seq(ck.config, params_to_tensors(ck.params))


# -- grid -------------------------------------------------------------------------------

SYSTEMS = ("NMT", "PGN")


def _run_cell(cfg: RunConfig, train, dev, test, tok_path: str, out_dir: str) -> dict:
    tok = Tokenizer.load(tok_path)
    t0 = time.perf_counter()
    result = run_training(cfg, train, dev, test, tokenizer=tok, out_dir=out_dir)
    report = evaluate(result.model, tok, test, cfg.subset_k, step=result.steps)
    report["epochs"] = len(result.history)
    report["best_epoch"] = result.best_epoch
    report["seconds"] = round(time.perf_counter() - t0, 1)
    write_report(report, out_dir)
    report.pop("_records", None)
    return report


def grid_summary(sizes: Sequence[int], cells: dict) -> dict:
    """Results table: one row per system, one column per size, plus mean delta."""
    rows = {s: [cells.get((n, s), {}).get("bleu", {}).get("score") for n in sizes]
            for s in SYSTEMS}
    deltas = [p - b for b, p in zip(rows["NMT"], rows["PGN"]) if b is not None and p is not None]
    avg = float(np.mean(deltas)) if deltas else None
    lines = ["system\t" + "\t".join(str(n) for n in sizes) + "\tAvg. Δ"]
    for s in SYSTEMS:
        vals = ["-" if v is None else f"{v:.2f}" for v in rows[s]]
        tail = "" if s == "NMT" or avg is None else f"{avg:+.2f}"
        lines.append(f"{s}\t" + "\t".join(vals) + f"\t{tail}")
    return {"sizes": list(sizes), "rows": rows, "deltas": deltas, "avg_delta": avg,
            "table": "\n".join(lines) + "\n"}


def run_grid(base: RunConfig, sizes: Sequence[int], out_dir, jobs: int = 1) -> dict:
    """Train and evaluate NMT and PGN for each training size with shared seeds."""
    base.validate()
    sizes = sorted(set(int(s) for s in sizes))
    if not sizes or sizes[0] <= 0:
        raise ConfigError("grid sizes must be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    big = base.replace(train_size=sizes[-1])
    big.validate()
    corpus = build_corpus(big)
    jobs_spec = []
    for n in sizes:
        cfg_n = base.replace(train_size=n, synth_num_pairs=big.synth_num_pairs or
                             big.needed_pairs())
        train, dev, test = split_corpus(corpus, n, base.dev_size, base.test_size, base.seed)
        cell_root = out / str(n)
        cell_root.mkdir(parents=True, exist_ok=True)
        tok = (Tokenizer.load(base.tokenizer_path) if base.tokenizer_path
               else train_tokenizer(train, base.tokenizer_budget))
        tok_path = cell_root / "tokenizer.bpe"
        tok.save(tok_path)
        for system in SYSTEMS:
            cfg = cfg_n.replace(pgn_enabled=(system == "PGN"),
                                output_dir=str(cell_root / system), resume=None)
            jobs_spec.append(((n, system), (cfg, train, dev, test, str(tok_path),
                                            str(cell_root / system))))
    cells: dict = {}
    errors: dict = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {key: pool.submit(_run_cell, *args) for key, args in jobs_spec}
            for key, fut in futures.items():
                try:
                    cells[key] = fut.result()
                except Exception as exc:  # keep the other cells
                    errors[key] = repr(exc)
    else:
        for key, args in jobs_spec:
            try:
                cells[key] = _run_cell(*args)
            except Exception as exc:
                log.exception("grid cell %s failed", key)
                errors[key] = repr(exc)
    summary = grid_summary(sizes, cells)
    summary["errors"] = {f"{n}/{s}": e for (n, s), e in errors.items()}
    summary["cells"] = {f"{n}/{s}": {k: v for k, v in rep.items() if k != "hypotheses"}
                        for (n, s), rep in cells.items()}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True),
                                      encoding="utf-8")
    (out / "summary.tsv").write_text(summary["table"], encoding="utf-8")
    return summary
