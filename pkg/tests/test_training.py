import json
import struct

import numpy as np
import pytest

from pgnlab.bpe import Tokenizer
from pgnlab.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from pgnlab.corpus import ParallelCorpus
from pgnlab.metrics import MetricError
from pgnlab.optim import AdamState
from pgnlab.runconfig import RunConfig
from pgnlab.seq2seq import AttentionTrace, Seq2Seq
from pgnlab.train import (CompatibilityError, evaluate, grid_summary, load_model, prepare_splits,
                          run_grid, run_training, token_accuracy)
from conftest import toy_config


def tiny_cfg(**kw):
    base = dict(synthetic=True, synth_cognate_rate=1.0, synth_sound_change_rate=0.0,
                synth_vocab_size=40, synth_min_len=2, synth_max_len=5, tokenizer_budget=120,
                num_layers=1, num_heads=2, hidden_size=16, ffn_size=32, max_len=24, dropout=0.1,
                learning_rate=3e-3, batch_size=16, train_size=96, dev_size=16, test_size=20,
                seed=3, max_epochs=3, patience=5, snapshot_every=1)
    base.update(kw)
    return RunConfig(**base)


# -- checkpoint format ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = toy_config(vocab_size=30, hidden_size=16, ffn_size=32)
    m = Seq2Seq.initialize(cfg, 0)
    adam = AdamState(step=4, m={"out.b": np.arange(30.0)}, v={"out.b": np.ones(30)})
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, cfg, m.params, vocab_hash="abc", seed=7, step=4, adam=adam,
                    extra={"epoch": 2})
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    assert header["vocab_hash"] == "abc" and header["seed"] == 7
    names = [e["name"] for e in header["manifest"]]
    assert "pgn.W" in names and "pgn.B" in names and "adam.m.out.b" in names
    offsets = [e["offset"] for e in header["manifest"]]
    assert offsets == sorted(offsets) and offsets[0] == 0

    ck = load_checkpoint(path)
    assert ck.config == cfg and ck.step == 4 and ck.extra == {"epoch": 2}
    for k, p in m.params.items():
        assert np.array_equal(ck.params[k], p.data)
    assert np.array_equal(ck.adam.m["out.b"], np.arange(30.0)) and ck.adam.step == 4


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    cfg = toy_config(vocab_size=30, hidden_size=16, ffn_size=32)
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, cfg, Seq2Seq.initialize(cfg, 0).params)
    (tmp_path / "cut.ckpt").write_bytes(good.read_bytes()[:-100])
    with pytest.raises(CheckpointError, match="past end"):
        load_checkpoint(tmp_path / "cut.ckpt")


# -- training ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_cfg()
    train, dev, test = prepare_splits(cfg)
    return cfg, run_training(cfg, train, dev, test, out_dir=out), (train, dev, test), out


def test_training_writes_artifacts(trained):
    cfg, result, _, out = trained
    for name in ("tokenizer.bpe", "config.txt", "train_log.jsonl", "last.ckpt", "best.ckpt"):
        assert (out / name).exists(), name
    log = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2, 3]
    snaps = sorted(p.name for p in (out / "snapshots").iterdir())
    assert "epoch001_probe0.svg" in snaps and "epoch003_probe1.json" in snaps
    trace = AttentionTrace.from_dict(json.loads((out / "snapshots" / "epoch002_probe0.json").read_text()))
    trace.validate()
    assert trace.source_tokens and trace.p_copy is not None


def test_identity_training_loss_decreases(trained):
    _, result, _, _ = trained
    losses = [r.train_loss for r in result.history]
    assert losses[0] > losses[1] > losses[2]


def test_full_run_is_reproducible(trained, tmp_path):
    cfg, result, (train, dev, test), out = trained
    again = run_training(cfg, train, dev, test, out_dir=tmp_path)
    assert [r.step_losses for r in again.history] == [r.step_losses for r in result.history]
    assert (tmp_path / "best.ckpt").read_bytes() == (out / "best.ckpt").read_bytes()
    a = (out / "snapshots" / "epoch003_probe0.svg").read_bytes()
    assert (tmp_path / "snapshots" / "epoch003_probe0.svg").read_bytes() == a


def test_resume_reproduces_unbroken_run(trained, tmp_path):
    cfg, result, (train, dev, test), _ = trained
    run_training(cfg, train, dev, test, out_dir=tmp_path, stop_after=2)
    resumed = run_training(cfg.replace(resume=str(tmp_path / "last.ckpt")), train, dev, test,
                           out_dir=tmp_path)
    assert [r.epoch for r in resumed.history] == [1, 2, 3]
    assert resumed.history[2].step_losses == result.history[2].step_losses


def test_resume_with_other_vocabulary_is_refused(trained, tmp_path):
    cfg, _, (train, dev, test), out = trained
    other = Tokenizer.train(["completely different words"], 60)
    with pytest.raises(CompatibilityError):
        run_training(cfg.replace(resume=str(out / "last.ckpt")), train, dev, test, tokenizer=other)


def test_patience_stops_early(tmp_path):
    cfg = tiny_cfg(max_epochs=30, patience=1, learning_rate=0.5)
    train, dev, test = prepare_splits(cfg)
    result = run_training(cfg, train, dev, test)
    assert len(result.history) < 30
    assert len(result.history) - result.best_epoch == 1


def test_baseline_equals_plain_encoder_decoder():
    cfg = tiny_cfg(pgn_enabled=False, max_epochs=2)
    train, dev, _ = prepare_splits(cfg)
    a = run_training(cfg, train, dev)
    b = run_training(cfg, train, dev, objective="plain")
    assert [r.step_losses for r in a.history] == [r.step_losses for r in b.history]
    assert [r.dev_loss for r in a.history] == [r.dev_loss for r in b.history]


# -- evaluation ----------------------------------------------------------------------

def test_evaluate_report(trained):
    _, result, (_, _, test), _ = trained
    rep = evaluate(result.model, result.tokenizer, test, subset_k=5)
    assert 0 <= rep["bleu"]["score"] <= 100 and 0 <= rep["token_accuracy"] <= 1
    sub = rep["subsets"]
    assert sub["k"] == 5 and sub["ranking_ok"] and sub["high_mean_overlap"] >= sub["low_mean_overlap"]
    assert 0 < rep["mean_p_copy"] < 1
    assert len(rep["hypotheses"]) == len(test)


def test_evaluate_empty_test_set(trained):
    _, result, _, _ = trained
    with pytest.raises(MetricError):
        evaluate(result.model, result.tokenizer, ParallelCorpus([]))


def test_load_model_checks_vocabulary(trained):
    _, result, _, out = trained
    m = load_model(out / "best.ckpt", result.tokenizer)
    assert m.config == result.model.config
    with pytest.raises(CompatibilityError, match="vocabulary"):
        load_model(out / "best.ckpt", Tokenizer.train(["x y z"], 20))


def test_token_accuracy():
    assert token_accuracy([[1, 2, 3]], [[1, 2, 3]]) == 1.0
    assert token_accuracy([[1, 2]], [[1, 5, 6, 7]]) == 0.25
    assert token_accuracy([[]], [[]]) == 1.0


# -- grid --------------------------------------------------------------------------------

def test_grid_summary_arithmetic():
    cells = {(100, "NMT"): {"bleu": {"score": 10.0}}, (100, "PGN"): {"bleu": {"score": 12.5}},
             (200, "NMT"): {"bleu": {"score": 20.0}}, (200, "PGN"): {"bleu": {"score": 19.0}}}
    s = grid_summary([100, 200], cells)
    assert s["deltas"] == [2.5, -1.0] and s["avg_delta"] == pytest.approx(0.75)
    lines = s["table"].splitlines()
    assert lines[0] == "system\t100\t200\tAvg. Δ"
    assert lines[2] == "PGN\t12.50\t19.00\t+0.75"


def test_smoke_grid(tmp_path):
    cfg = tiny_cfg(max_epochs=1, synth_num_pairs=1000, train_size=100, dev_size=10, test_size=20,
                   synth_cognate_rate=0.6, synth_sound_change_rate=0.2)
    s = run_grid(cfg, [100], tmp_path)
    assert set(s["cells"]) == {"100/NMT", "100/PGN"} and not s["errors"]
    rows = s["rows"]
    recomputed = rows["PGN"][0] - rows["NMT"][0]
    assert s["avg_delta"] == pytest.approx(recomputed)
    reports = {k: json.loads((tmp_path / "100" / k / "report.json").read_text())
               for k in ("NMT", "PGN")}
    assert reports["PGN"]["bleu"]["score"] - reports["NMT"]["bleu"]["score"] == pytest.approx(recomputed)
    assert (tmp_path / "summary.tsv").read_text() == s["table"]
