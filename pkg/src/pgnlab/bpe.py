"""Joint byte-pair-encoding tokenizer with ``##`` continuation subwords.

Words are whitespace-delimited. The first symbol of a word is written bare
and every later symbol carries a ``##`` prefix, so ``"abc"`` starts out as
``["a", "##b", "##c"]``. Training greedily merges the most frequent adjacent
pair (ties: lexicographically smallest ``(left, right)``) until the
vocabulary budget is reached or no pair occurs at least twice.

Characters missing from the vocabulary map to ``<unk>``; there is no
byte or character fallback.
"""

from __future__ import annotations

import hashlib
import heapq
import re
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
SPECIAL_IDS = frozenset(range(len(SPECIALS)))
CONT = "##"
HEADER = "bpe-v1"
VOCAB_MARKER = "#vocab"

_WORD = re.compile(r"\S+")


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    offsets: tuple[tuple[int, int], ...] = ()

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Vocabulary:
    id_to_subword: list[str]
    subword_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.subword_to_id:
            self.subword_to_id = {s: i for i, s in enumerate(self.id_to_subword)}
        if len(self.subword_to_id) != len(self.id_to_subword):
            raise TokenizerError("vocabulary contains duplicate subwords")
        if tuple(self.id_to_subword[:len(SPECIALS)]) != SPECIALS:
            raise TokenizerError(f"vocabulary must start with {SPECIALS}")

    def __len__(self) -> int:
        return len(self.id_to_subword)

    def __contains__(self, subword: str) -> bool:
        return subword in self.subword_to_id


def word_symbols(word: str) -> list[str]:
    return [word[0]] + [CONT + ch for ch in word[1:]]


def merge_symbol(left: str, right: str) -> str:
    return left + right[len(CONT):] if right.startswith(CONT) else left + right


def _merge_word(symbols: Sequence[str], left: str, right: str, joined: str) -> list[str]:
    out: list[str] = []
    i, n = 0, len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == left and symbols[i + 1] == right:
            out.append(joined)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def base_alphabet(chars: Iterable[str]) -> list[str]:
    """Initial symbols: every character in bare and ``##`` form."""
    chars = sorted(set(chars))
    return chars + [CONT + c for c in chars]


def train_bpe(corpus: Iterable[str], vocab_budget: int) -> tuple[list[tuple[str, str]], Vocabulary]:
    """Learn merges over ``corpus`` until the vocabulary holds ``vocab_budget`` entries."""
    word_freq: Counter[str] = Counter()
    for sentence in corpus:
        word_freq.update(unicodedata.normalize("NFC", sentence).split())
    if not word_freq:
        raise TokenizerError("cannot train BPE on an empty corpus")

    alphabet = base_alphabet(ch for w in word_freq for ch in w)
    if vocab_budget < len(alphabet) + len(SPECIALS):
        raise TokenizerError(
            f"vocab budget {vocab_budget} is smaller than the base alphabet "
            f"({len(alphabet)} symbols) plus {len(SPECIALS)} reserved ids")
    id_to_subword = list(SPECIALS) + alphabet
    known = set(id_to_subword)

    words = [word_symbols(w) for w in sorted(word_freq)]
    freqs = [word_freq[w] for w in sorted(word_freq)]
    counts: dict[tuple[str, str], int] = defaultdict(int)
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, syms in enumerate(words):
        for pair in zip(syms, syms[1:]):
            counts[pair] += freqs[wi]
            where[pair].add(wi)
    heap = [(-c, a, b) for (a, b), c in counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[str, str]] = []
    while len(id_to_subword) < vocab_budget:
        best = None
        while heap:
            negc, a, b = heap[0]
            if counts.get((a, b), 0) == -negc and -negc > 0:
                best = (a, b)
                break
            heapq.heappop(heap)
        if best is None or counts[best] < 2:
            break
        left, right = best
        joined = merge_symbol(left, right)
        merges.append(best)
        if joined not in known:
            known.add(joined)
            id_to_subword.append(joined)

        touched: set[tuple[str, str]] = set()
        for wi in sorted(where.pop(best)):
            old = words[wi]
            new = _merge_word(old, left, right, joined)
            f = freqs[wi]
            for pair in zip(old, old[1:]):
                counts[pair] -= f
                touched.add(pair)
            for pair in zip(new, new[1:]):
                counts[pair] += f
                touched.add(pair)
            for pair in set(zip(old, old[1:])) - set(zip(new, new[1:])):
                where[pair].discard(wi)
            for pair in zip(new, new[1:]):
                where[pair].add(wi)
            words[wi] = new
        counts.pop(best, None)
        for pair in touched:
            c = counts.get(pair, 0)
            if c > 0:
                heapq.heappush(heap, (-c, pair[0], pair[1]))
            else:
                counts.pop(pair, None)
                where.pop(pair, None)

    return merges, Vocabulary(id_to_subword)


class Tokenizer:
    """Merge table plus vocabulary, with cached per-word segmentation."""

    def __init__(self, merges: Sequence[tuple[str, str]], vocab: Vocabulary):
        self.merges = [tuple(m) for m in merges]
        self.vocab = vocab
        self.ranks = {m: i for i, m in enumerate(self.merges)}
        if len(self.ranks) != len(self.merges):
            raise TokenizerError("merge table contains a duplicate pair")
        self._cache: dict[str, tuple[str, ...]] = {}

    @classmethod
    def train(cls, corpus: Iterable[str], vocab_budget: int) -> "Tokenizer":
        return cls(*train_bpe(corpus, vocab_budget))

    def __len__(self) -> int:
        return len(self.vocab)

    def segment_word(self, word: str) -> tuple[str, ...]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        syms = word_symbols(word)
        ranks = self.ranks
        while len(syms) > 1:
            best, best_rank = None, None
            for pair in zip(syms, syms[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            syms = _merge_word(syms, best[0], best[1], merge_symbol(*best))
        out = tuple(syms)
        self._cache[word] = out
        return out

    def tokenize(self, text: str) -> list[str]:
        text = unicodedata.normalize("NFC", text)
        return [s for m in _WORD.finditer(text) for s in self.segment_word(m.group())]

    def encode(self, text: str) -> TokenSequence:
        """Ids plus character spans; spans index the NFC-normalised text."""
        text = unicodedata.normalize("NFC", text)
        ids: list[int] = []
        offsets: list[tuple[int, int]] = []
        lookup = self.vocab.subword_to_id
        for m in _WORD.finditer(text):
            pos = m.start()
            for sym in self.segment_word(m.group()):
                width = len(sym) - (len(CONT) if sym.startswith(CONT) and pos > m.start() else 0)
                ids.append(lookup.get(sym, UNK))
                offsets.append((pos, pos + width))
                pos += width
        return TokenSequence(tuple(ids), tuple(offsets))

    def decode(self, ids: Iterable[int]) -> str:
        return decode(ids, self.vocab)

    # -- persistence ----------------------------------------------------------
    def to_text(self) -> str:
        lines = [f"{HEADER} {len(self.vocab)}"]
        lines += [f"{a}\t{b}" for a, b in self.merges]
        lines.append(VOCAB_MARKER)
        lines += self.vocab.id_to_subword
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Tokenizer":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        head = lines[0].split(" ") if lines else []
        if len(head) != 2 or head[0] != HEADER:
            raise TokenizerError(f"not a {HEADER} tokenizer file")
        size = int(head[1])
        try:
            marker = lines.index(VOCAB_MARKER, 1)
        except ValueError:
            raise TokenizerError(f"missing {VOCAB_MARKER!r} line") from None
        merges = []
        for line in lines[1:marker]:
            a, sep, b = line.partition("\t")
            if not sep:
                raise TokenizerError(f"malformed merge line {line!r}")
            merges.append((a, b))
        vocab = Vocabulary(lines[marker + 1:])
        if len(vocab) != size:
            raise TokenizerError(f"header declares {size} subwords, file lists {len(vocab)}")
        return cls(merges, vocab)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def encode(text: str, merges: Sequence[tuple[str, str]], vocab: Vocabulary) -> TokenSequence:
    return Tokenizer(merges, vocab).encode(text)


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Join subwords back into text; PAD/BOS/EOS are dropped, ``<unk>`` is kept."""
    parts: list[str] = []
    n = len(vocab)
    for i in ids:
        i = int(i)
        if not 0 <= i < n:
            raise IndexError(f"token id {i} outside vocabulary of size {n}")
        if i in (PAD, BOS, EOS):
            continue
        sym = vocab.id_to_subword[i]
        if sym.startswith(CONT) and parts:
            parts.append(sym[len(CONT):])
        else:
            if parts:
                parts.append(" ")
            parts.append(sym)
    return "".join(parts)
