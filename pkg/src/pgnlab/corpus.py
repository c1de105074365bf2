"""Parallel corpora: loading, splitting, overlap statistics and synthetic pairs."""

from __future__ import annotations

import json
import unicodedata
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .bpe import SPECIAL_IDS, UNK, Tokenizer


class CorpusError(ValueError):
    pass


@dataclass
class ParallelCorpus:
    pairs: list[tuple[str, str]]
    name: str = ""
    provenance: str = ""
    dropped: int = 0
    # position of each pair in the corpus it was drawn from
    origin: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list[str]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[str]:
        return [t for _, t in self.pairs]

    def select(self, indices: Sequence[int], name: Optional[str] = None) -> "ParallelCorpus":
        base = self.origin or list(range(len(self.pairs)))
        return ParallelCorpus([self.pairs[i] for i in indices], name or self.name,
                              self.provenance, 0, [base[i] for i in indices])


def _read_lines(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    # read_text already folds CRLF/CR into LF
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def load_parallel(src_path, tgt_path, name: str = "") -> ParallelCorpus:
    """Read two line-aligned UTF-8 files; pairs with an empty side are dropped."""
    src, tgt = _read_lines(src_path), _read_lines(tgt_path)
    if len(src) != len(tgt):
        raise CorpusError(f"line count mismatch: {src_path} has {len(src)} lines, "
                          f"{tgt_path} has {len(tgt)}")
    pairs, origin, dropped = [], [], 0
    for i, (s, t) in enumerate(zip(src, tgt)):
        s = unicodedata.normalize("NFC", s).strip()
        t = unicodedata.normalize("NFC", t).strip()
        if not s or not t:
            dropped += 1
            continue
        pairs.append((s, t))
        origin.append(i)
    return ParallelCorpus(pairs, name or Path(src_path).stem, f"{src_path} | {tgt_path}",
                          dropped, origin)


def save_parallel(corpus: ParallelCorpus, src_path, tgt_path) -> None:
    Path(src_path).write_text("".join(s + "\n" for s in corpus.sources), encoding="utf-8")
    Path(tgt_path).write_text("".join(t + "\n" for t in corpus.targets), encoding="utf-8")


def subsample(corpus: ParallelCorpus, train_n: int, test_n: int,
              seed: int) -> tuple[ParallelCorpus, ParallelCorpus]:
    """Seeded disjoint split. The test set is drawn first, so for a fixed seed
    the test set is the same for every ``train_n`` and train sets are nested."""
    if train_n < 0 or test_n < 0:
        raise CorpusError("split sizes must be non-negative")
    need = train_n + test_n
    if need > len(corpus):
        raise CorpusError(f"need {need} pairs ({train_n} train + {test_n} test) but corpus has "
                          f"{len(corpus)}; short by {need - len(corpus)}")
    perm = np.random.default_rng(seed).permutation(len(corpus))
    test = corpus.select(perm[:test_n].tolist(), f"{corpus.name}.test")
    train = corpus.select(perm[test_n:need].tolist(), f"{corpus.name}.train")
    return train, test


def split_corpus(corpus: ParallelCorpus, train_n: int, dev_n: int, test_n: int,
                 seed: int) -> tuple[ParallelCorpus, ParallelCorpus, ParallelCorpus]:
    """Three-way variant of :func:`subsample`: test, then dev, then train from one permutation."""
    rest, test = subsample(corpus, train_n + dev_n, test_n, seed)
    dev = rest.select(range(dev_n), f"{corpus.name}.dev")
    train = ParallelCorpus(rest.pairs[dev_n:], f"{corpus.name}.train", corpus.provenance, 0,
                           rest.origin[dev_n:])
    return train, dev, test


# -- overlap statistics ---------------------------------------------------------------

@dataclass
class OverlapStats:
    common_tokens: int
    total_target_tokens: int
    total_lines: int
    avg_common_per_line: float
    avg_common_per_target_token: float
    unk_rate: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _content(ids: Iterable[int]) -> list[int]:
    return [i for i in ids if i not in SPECIAL_IDS]


def token_heuristics(corpus: ParallelCorpus, tokenizer: Tokenizer) -> OverlapStats:
    """Count target tokens whose id also occurs in the paired source (occurrences, not types)."""
    common = total = unk = all_tokens = 0
    for s, t in corpus.pairs:
        src_ids = tokenizer.encode(s).ids
        tgt_ids = tokenizer.encode(t).ids
        unk += sum(1 for i in src_ids + tgt_ids if i == UNK)
        all_tokens += len(src_ids) + len(tgt_ids)
        src_set = set(_content(src_ids))
        tgt = _content(tgt_ids)
        total += len(tgt)
        common += sum(1 for i in tgt if i in src_set)
    lines = len(corpus)
    return OverlapStats(
        common_tokens=common, total_target_tokens=total, total_lines=lines,
        avg_common_per_line=common / lines if lines else 0.0,
        avg_common_per_target_token=common / total if total else 0.0,
        unk_rate=unk / all_tokens if all_tokens else 0.0)


def shared_subword_fraction(src_ids: Sequence[int], tgt_ids: Sequence[int]) -> float:
    """Fraction of target positions whose id occurs anywhere in the source. Specials ignored."""
    tgt = _content(tgt_ids)
    if not tgt:
        raise CorpusError("shared_subword_fraction is undefined for an empty target")
    src = set(_content(src_ids))
    return sum(1 for i in tgt if i in src) / len(tgt)


@dataclass
class ControlledSubsets:
    high: ParallelCorpus
    low: ParallelCorpus
    high_indices: list[int]
    low_indices: list[int]
    high_mean: float
    low_mean: float
    fractions: list[float]


def overlap_fractions(corpus: ParallelCorpus, tokenizer: Tokenizer) -> list[float]:
    out = []
    for s, t in corpus.pairs:
        tgt = tokenizer.encode(t).ids
        # a target made only of specials/UNK shares nothing
        out.append(shared_subword_fraction(tokenizer.encode(s).ids, tgt) if _content(tgt) else 0.0)
    return out


def rank_by_overlap(fractions: Sequence[float]) -> list[int]:
    """Indices sorted by fraction, highest first; ties keep original order."""
    return sorted(range(len(fractions)), key=lambda i: -fractions[i])


def build_controlled_subsets(test_corpus: ParallelCorpus, tokenizer: Tokenizer,
                             k: int = 500) -> ControlledSubsets:
    if k <= 0:
        raise CorpusError("k must be positive")
    if len(test_corpus) < 2 * k:
        raise CorpusError(f"test set of {len(test_corpus)} pairs is too small for two "
                          f"disjoint subsets of {k}")
    fr = overlap_fractions(test_corpus, tokenizer)
    order = rank_by_overlap(fr)
    high, low = order[:k], order[-k:]
    return ControlledSubsets(
        high=test_corpus.select(high, f"{test_corpus.name}.high"),
        low=test_corpus.select(low, f"{test_corpus.name}.low"),
        high_indices=high, low_indices=low,
        high_mean=float(np.mean([fr[i] for i in high])),
        low_mean=float(np.mean([fr[i] for i in low])),
        fractions=fr)


def make_identity_corpus(sentences: Iterable[str], name: str = "identity") -> ParallelCorpus:
    sents = [unicodedata.normalize("NFC", s).strip() for s in sentences]
    sents = [s for s in sents if s]
    if not sents:
        raise CorpusError("identity corpus needs at least one non-empty sentence")
    return ParallelCorpus([(s, s) for s in sents], name, "identity")


# -- synthetic related-language pairs ---------------------------------------------------

CONSONANTS = "ptkbdgmnslrvzfh"
VOWELS = "aeiou"


@dataclass
class SyntheticPairSpec:
    vocab_size: int = 300
    sentence_length_range: tuple[int, int] = (3, 8)
    cognate_rate: float = 0.5
    sound_change_rate: float = 0.2
    noise_rate: float = 0.0
    seed: int = 0
    num_pairs: int = 1000
    # Zipf exponent of the source unigram model over lexicon ranks
    zipf: float = 0.8

    def validate(self) -> None:
        lo, hi = self.sentence_length_range
        if self.vocab_size < 1:
            raise CorpusError("vocab_size must be positive")
        if not 1 <= lo <= hi:
            raise CorpusError(f"bad sentence_length_range {self.sentence_length_range}")
        for name in ("cognate_rate", "sound_change_rate", "noise_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CorpusError(f"{name} must lie in [0, 1], got {v}")
        if self.cognate_rate + self.sound_change_rate > 1.0 + 1e-12:
            raise CorpusError("cognate_rate + sound_change_rate must not exceed 1")
        if self.num_pairs < 1:
            raise CorpusError("num_pairs must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sentence_length_range"] = list(self.sentence_length_range)
        return d


def _random_word(rng: np.random.Generator) -> str:
    n_syll = rng.choice([1, 2, 3], p=[0.2, 0.5, 0.3])
    parts = []
    for _ in range(n_syll):
        parts.append(CONSONANTS[rng.integers(len(CONSONANTS))] + VOWELS[rng.integers(len(VOWELS))])
        if rng.random() < 0.25:
            parts.append(CONSONANTS[rng.integers(len(CONSONANTS))])
    return "".join(parts)


def _sound_change_table(rng: np.random.Generator) -> dict[str, str]:
    """A derangement over all vowels plus a random subset of consonants.

    Every generated word contains a vowel, so the mapped form always differs
    from the source form.
    """
    cons = [c for c in CONSONANTS if rng.random() < 0.5]
    table = {}
    for group in (list(VOWELS), cons):
        if len(group) < 2:
            continue
        order = [group[i] for i in rng.permutation(len(group))]
        for a, b in zip(order, order[1:] + order[:1]):
            table[a] = b
    return table


def synthesize_language_pair(spec: SyntheticPairSpec) -> ParallelCorpus:
    """Generate a seeded word-for-word related language pair.

    Each lexeme maps to an identical form (cognate), a sound-changed form or
    an unrelated form. Category thresholds are applied to a per-lexeme
    uniform draw stratified over frequency ranks, so realised token rates
    track the requested ones and raising ``cognate_rate`` only converts
    lexemes into cognates. Independent streams drive the lexicon, the
    sentences and the noise, so changing a rate leaves the source side
    unchanged.
    """
    spec.validate()
    lex_rng = np.random.default_rng([spec.seed, 0])
    sent_rng = np.random.default_rng([spec.seed, 1])
    noise_rng = np.random.default_rng([spec.seed, 2])

    lexicon: list[str] = []
    seen: set[str] = set()
    while len(lexicon) < spec.vocab_size:
        w = _random_word(lex_rng)
        if w not in seen:
            seen.add(w)
            lexicon.append(w)

    V = spec.vocab_size
    u = np.empty(V)
    for start in range(0, V, 10):
        n = min(10, V - start)
        u[start:start + n] = (lex_rng.permutation(n) + lex_rng.random(n)) / n
    table = _sound_change_table(lex_rng)
    target_forms: list[str] = []
    used = set(seen)
    for i, w in enumerate(lexicon):
        other = _random_word(lex_rng)
        while other in used:
            other = _random_word(lex_rng)
        used.add(other)
        if u[i] < spec.cognate_rate:
            target_forms.append(w)
        elif u[i] < spec.cognate_rate + spec.sound_change_rate:
            target_forms.append("".join(table.get(ch, ch) for ch in w))
        else:
            target_forms.append(other)

    weights = 1.0 / np.power(np.arange(1, V + 1), spec.zipf)
    weights /= weights.sum()
    lo, hi = spec.sentence_length_range

    def sentence(rng: np.random.Generator) -> list[int]:
        return rng.choice(V, size=int(rng.integers(lo, hi + 1)), p=weights).tolist()

    pairs = []
    for _ in range(spec.num_pairs):
        src = sentence(sent_rng)
        tgt = src
        if noise_rng.random() < spec.noise_rate:
            tgt = sentence(noise_rng)
        pairs.append((" ".join(lexicon[i] for i in src), " ".join(target_forms[i] for i in tgt)))
    return ParallelCorpus(pairs, f"synthetic-{spec.seed}",
                          json.dumps(spec.to_dict(), sort_keys=True),
                          origin=list(range(len(pairs))))
