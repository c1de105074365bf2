import math

import numpy as np
import pytest

from pgnlab.bpe import TokenSequence
from pgnlab.metrics import (CopyUsageRecord, MetricError, attention_entropy, copy_usage_summary,
                            pcopy_entropy_correlation, pearson, sp_bleu)


def test_identity_scores_exactly_100():
    refs = [[5, 6, 7, 8, 9], [10, 11, 12, 13], [4, 4, 4, 4, 4, 4]]
    assert sp_bleu(refs, refs).score == 100.0


def test_hand_derived_single_pair():
    rep = sp_bleu([list("abcde")], [list("abcdf")])
    assert rep.precisions == [4 / 5, 3 / 4, 2 / 3, 1 / 2]
    assert rep.brevity_penalty == 1.0
    assert rep.score == pytest.approx(100 * 0.2 ** 0.25, abs=1e-9)
    assert abs(rep.score - 66.87) <= 0.01


def test_accepts_token_sequences():
    seq = TokenSequence((5, 6, 7, 8), ((0, 1),) * 4)
    assert sp_bleu([seq], [seq]).score == 100.0


def test_permutation_invariance():
    rng = np.random.default_rng(0)
    hyps = [rng.integers(4, 12, size=rng.integers(3, 9)).tolist() for _ in range(30)]
    refs = [rng.integers(4, 12, size=rng.integers(3, 9)).tolist() for _ in range(30)]
    base = sp_bleu(hyps, refs).score
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(30)
        assert sp_bleu([hyps[i] for i in perm], [refs[i] for i in perm]).score == pytest.approx(base, abs=1e-12)


def test_disjoint_case_uses_smoothing_floor():
    short = sp_bleu([[1, 2, 3, 4, 5]], [[6, 7, 8, 9, 10]])
    assert short.precisions == [1 / 10, 1 / 8, 1 / 6, 1 / 4]
    assert short.score == pytest.approx(100 * (1 / 1920) ** 0.25)
    long = sp_bleu([list(range(100, 160))], [list(range(200, 260))])
    assert 0.0 < long.score < 1.0


def test_brevity_penalty():
    rep = sp_bleu([[1, 2, 3, 4]], [[1, 2, 3, 4, 5, 6, 7, 8]])
    assert rep.brevity_penalty == pytest.approx(math.exp(1 - 8 / 4))
    assert rep.score == pytest.approx(100 * math.exp(-1.0))
    empty = sp_bleu([[]], [[1, 2]])
    assert empty.score == 0.0 and empty.brevity_penalty == 0.0


def test_score_formula_invariant():
    rng = np.random.default_rng(1)
    hyps = [rng.integers(4, 8, size=6).tolist() for _ in range(10)]
    refs = [rng.integers(4, 8, size=7).tolist() for _ in range(10)]
    rep = sp_bleu(hyps, refs)
    geo = math.exp(sum(math.log(p) for p in rep.precisions) / 4)
    assert rep.score == pytest.approx(100 * rep.brevity_penalty * geo, rel=1e-12)
    assert 0 < rep.brevity_penalty <= 1


def test_clipping():
    rep = sp_bleu([[7, 7, 7, 7]], [[7, 8, 9, 10]])
    assert rep.precisions[0] == 1 / 4


def test_bleu_errors():
    with pytest.raises(MetricError):
        sp_bleu([], [])
    with pytest.raises(MetricError):
        sp_bleu([[1]], [[1], [2]])


def test_entropy_examples():
    assert attention_entropy([0.0, 1.0, 0.0]) == 0.0
    assert attention_entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-12)
    assert attention_entropy([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(MetricError):
        attention_entropy([0.5, 0.4])


def test_entropy_bounded_with_equality_only_when_uniform():
    rng = np.random.default_rng(2)
    for n in range(2, 30):
        a = rng.dirichlet(np.ones(n))
        assert attention_entropy(a) < math.log(n) - 1e-9
        assert abs(attention_entropy(np.full(n, 1 / n)) - math.log(n)) <= 1e-9


def recs(p, h):
    return [CopyUsageRecord(token_id=i % 7, p_copy=float(a), entropy=float(b), in_source=i % 2 == 0)
            for i, (a, b) in enumerate(zip(p, h))]


def test_correlation_planted_values():
    p = np.linspace(0.01, 0.99, 50)
    assert pcopy_entropy_correlation(recs(p, p)) == 1.0
    assert pcopy_entropy_correlation(recs(p, 1 - p)) == -1.0
    rng = np.random.default_rng(3)
    x = rng.standard_normal(10000)
    y = 0.5 * x + math.sqrt(0.75) * rng.standard_normal(10000)
    assert abs(pcopy_entropy_correlation(recs(x, y)) - 0.5) <= 0.05


def test_correlation_symmetry_and_affine_invariance():
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal(200), rng.standard_normal(200)
    r = pearson(x, y)
    assert pearson(y, x) == pytest.approx(r, abs=1e-12)
    assert pearson(3.5 * x + 2, y) == pytest.approx(r, abs=1e-12)


def test_correlation_zero_variance():
    with pytest.raises(MetricError):
        pcopy_entropy_correlation(recs([0.5] * 5, [0.1, 0.2, 0.3, 0.4, 0.5]))
    with pytest.raises(MetricError):
        pcopy_entropy_correlation(recs([0.5], [0.1]))


def test_usage_summary_hand_built():
    records = [CopyUsageRecord(5, 0.9, 0.1, True), CopyUsageRecord(6, 0.75, 0.2, True),
               CopyUsageRecord(7, 0.2, 0.3, False), CopyUsageRecord(5, 0.5, 0.4, False)]
    s = copy_usage_summary(records)
    assert s.in_source.count == 2 and s.in_source.mean == pytest.approx(0.825)
    assert s.not_in_source.mean == pytest.approx(0.35) and s.not_in_source.median == pytest.approx(0.35)
    assert [t[0] for t in s.top_tokens] == [6, 5, 7]
    assert s.top_tokens[1][1] == pytest.approx(0.7) and s.top_tokens[1][2] == 2


def test_usage_summary_degenerate_split():
    s = copy_usage_summary([CopyUsageRecord(5, 0.4, 0.1, True), CopyUsageRecord(6, 0.4, 0.2, True)])
    assert s.not_in_source.count == 0 and s.not_in_source.mean is None
    same = copy_usage_summary([CopyUsageRecord(5, 0.3, 0.1, True), CopyUsageRecord(6, 0.3, 0.2, False)])
    assert same.in_source.mean == same.not_in_source.mean


def test_usage_summary_ordering_is_deterministic():
    records = [CopyUsageRecord(i, 0.5, 0.1, True) for i in (9, 3, 7)]
    assert [t[0] for t in copy_usage_summary(records).top_tokens] == [3, 7, 9]
    assert copy_usage_summary(records, top_k=2).top_tokens == [(3, 0.5, 1), (7, 0.5, 1)]


def test_exactly_linear_relation_gives_unit_correlation():
    x = np.linspace(0.01, 0.99, 100)
    assert pearson(x, 2 * x + 1) == 1.0 and pearson(x, 3 - 0.7 * x) == -1.0
