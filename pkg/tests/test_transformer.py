import warnings

import numpy as np
import pytest

from pgnlab import autograd as ag
from pgnlab.bpe import BOS, EOS
from pgnlab.seq2seq import Seq2Seq, make_batch
from pgnlab.transformer import (ConfigError, EncoderStates, ModelConfig, Transformer,
                                init_params, parameter_count, sinusoidal_positions)
from conftest import toy_config


@pytest.fixture(scope="module")
def model():
    return Transformer.initialize(toy_config(), seed=3)


def test_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(vocab_size=10, num_heads=3, hidden_size=64)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, dropout=1.0)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, num_heads=2, hidden_size=8, pgn_head_mode="single:2")
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, pgn_head_mode="max")
    assert ModelConfig(vocab_size=10, num_heads=2, hidden_size=8,
                       pgn_head_mode="single:1").pgn_head() == 1


def test_config_round_trip():
    cfg = toy_config(pgn_head_mode="single:0")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_single_token_shape(model):
    enc = model.encode([[7]])
    assert enc.e.shape == (1, 1, 64)


def test_decoder_output_shapes(model):
    enc = model.encode([[5, 6, 7, 0]])
    out = model.decode_forward([[BOS, 9, 10]], enc)
    assert out.d.shape == out.s.shape == (1, 3, 64)
    assert out.gen_logits.shape == (1, 3, 50)
    assert len(out.cross_attn) == 2 and out.cross_attn[0].shape == (1, 2, 3, 4)


def test_encoder_determinism(model):
    a = model.encode([[4, 5, 6]]).e.data
    b = Transformer.initialize(toy_config(), seed=3).encode([[4, 5, 6]]).e.data
    assert np.array_equal(a, b)


def test_cross_attention_rows_normalised_and_masked(model):
    src = np.array([[5, 6, 7, 0, 0], [8, 9, 10, 11, 12]])
    enc = model.encode(src)
    out = model.decode_forward([[BOS, 4, 4], [BOS, 3, 2]], enc)
    for w in out.cross_attn:
        assert np.all(np.abs(w.data.sum(-1) - 1.0) <= 1e-9)
        assert np.all(w.data[0, :, :, 3:] == 0.0)


def test_pad_tail_does_not_change_encoding(model):
    short = model.encode([[5, 6, 7]]).e.data
    padded = model.encode([[5, 6, 7, 0, 0]]).e.data
    np.testing.assert_allclose(padded[:, :3], short, rtol=0, atol=1e-12)


def test_causality(model):
    enc = model.encode([[5, 6, 7, 8]])
    base = model.decode_forward([[BOS, 10, 11, 12, 13]], enc).gen_logits.data
    for t in range(4):
        tgt = np.array([[BOS, 10, 11, 12, 13]])
        tgt[0, t + 1:] = 20 + t
        pert = model.decode_forward(tgt, enc).gen_logits.data
        assert np.array_equal(pert[0, : t + 1], base[0, : t + 1])


def test_hidden_size_mismatch_is_config_error(model):
    enc = EncoderStates(ag.Tensor(np.zeros((1, 3, 32))), np.zeros((1, 3), bool))
    with pytest.raises(ConfigError, match="hidden size"):
        model.decode_forward([[BOS]], enc)


def test_over_length_source_is_truncated_with_flag():
    m = Transformer.initialize(toy_config(max_len=4), seed=0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        enc = m.encode([[5] * 9])
    assert enc.truncated and enc.e.shape[1] == 4
    assert any("truncating" in str(w.message) for w in caught)


@pytest.mark.parametrize("cfg", [toy_config(), toy_config(pgn_enabled=False),
                                 toy_config(vocab_size=600, num_layers=3, num_heads=4)])
def test_parameter_count_matches_closed_form(cfg):
    params = init_params(cfg, 0)
    assert sum(p.size for p in params.values()) == parameter_count(cfg)


def test_parameter_count_toy_value():
    assert parameter_count(toy_config(vocab_size=600)) == 283673


def test_gate_params_do_not_disturb_core_init():
    on = init_params(toy_config(), 11)
    off = init_params(toy_config(pgn_enabled=False), 11)
    assert set(on) - set(off) == {"pgn.W", "pgn.B"}
    for k in off:
        assert np.array_equal(on[k].data, off[k].data)
    assert on["pgn.W"].shape == (3 * 64,) and on["pgn.B"].shape == ()


def test_sinusoidal_positions():
    pe = sinusoidal_positions(5, 6)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1])
    assert pe[3, 0] == pytest.approx(np.sin(3.0))


def test_eval_mode_is_deterministic_dropout_is_not():
    cfg = toy_config(dropout=0.3)
    m = Seq2Seq.initialize(cfg, 2)
    batch = make_batch([([5, 6, 7], [8, 9])], cfg.max_len)
    assert m.loss(batch).item() == m.loss(batch).item()
    a = m.loss(batch, np.random.default_rng(0)).item()
    b = m.loss(batch, np.random.default_rng(0)).item()
    c = m.loss(batch, np.random.default_rng(1)).item()
    assert a == b and a != c


@pytest.mark.parametrize("pgn", [False, True])
def test_forced_eos_output_halts_immediately(pgn):
    cfg = toy_config(pgn_enabled=pgn, forced_p_copy=0.0 if pgn else None)
    m = Seq2Seq.initialize(cfg, 1)
    m.params["out.w"].data[...] = 0.0
    m.params["out.b"].data[...] = -50.0
    m.params["out.b"].data[EOS] = 50.0
    (ids, trace), = m.greedy_decode([[5, 6, 7]])
    assert ids == [] and trace.attention == []


def test_greedy_decode_is_deterministic():
    m = Seq2Seq.initialize(toy_config(), 4)
    srcs = [[5, 6, 7], [9, 9, 10, 11]]
    first = [ids for ids, _ in m.greedy_decode(srcs, max_out_len=6)]
    again = [ids for ids, _ in m.greedy_decode(srcs, max_out_len=6)]
    assert first == again and all(len(x) <= 6 for x in first)


def test_batched_decode_equals_one_by_one():
    m = Seq2Seq.initialize(toy_config(), 4)
    srcs = [[5, 6, 7], [9, 9, 10, 11, 12, 13], [8]]
    together = [ids for ids, _ in m.greedy_decode(srcs, max_out_len=5)]
    single = [m.greedy_decode([s], max_out_len=5)[0][0] for s in srcs]
    assert together == single
