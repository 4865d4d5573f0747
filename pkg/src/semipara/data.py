"""Corpus ingestion, vocabulary, tokenization, semi-supervised splits and batching."""
from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import torch

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
N_SPECIAL = len(SPECIALS)
DEFAULT_MAX_LEN = 20


class DataError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.id_to_token:
            self.id_to_token = [None] * len(self.token_to_id)
            for tok, i in self.token_to_id.items():
                self.id_to_token[i] = tok

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocab":
        t2i = {s: i for i, s in enumerate(SPECIALS)}
        for tok in tokens:
            if tok in t2i:
                raise DataError(f"duplicate or reserved token {tok!r}")
            t2i[tok] = len(t2i)
        return cls(t2i)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, tok: str) -> bool:
        return tok in self.token_to_id

    @property
    def tokens(self) -> list[str]:
        """Non-special tokens in id order."""
        return self.id_to_token[N_SPECIAL:]

    def lookup(self, tok: str) -> int:
        # special strings in raw text are ordinary unknown words, never control ids
        i = self.token_to_id.get(tok, UNK)
        return UNK if i < N_SPECIAL else i

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_tokens([ln for ln in lines if ln])


def build_vocab(corpus: Sequence[str], min_freq: int = 1, max_size: int | None = None) -> Vocab:
    """Frequency-ordered vocabulary; ties broken lexicographically.

    Tokens below ``min_freq`` (or past ``max_size``) are left out and will
    encode to UNK.
    """
    if not corpus:
        raise DataError("empty corpus")
    if min_freq < 1:
        raise DataError("min_freq must be >= 1")
    counts = Counter(tok for line in corpus for tok in tokenize(line))
    if not counts:
        raise DataError("empty corpus")
    ranked = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIALS),
                    key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocab.from_tokens(ranked)


@dataclass(frozen=True)
class TokenSequence:
    """BOS ... EOS id sequence, unpadded."""

    ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) < 2 or self.ids[0] != BOS:
            raise DataError("token sequence must start with BOS and hold at least 2 ids")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def length(self) -> int:
        return len(self.ids)

    @property
    def body(self) -> tuple[int, ...]:
        """Ids between BOS and the terminal EOS (if present)."""
        end = len(self.ids) - 1 if self.ids[-1] == EOS else len(self.ids)
        return self.ids[1:end]

    def validate(self, vocab_size: int, max_len: int = DEFAULT_MAX_LEN) -> None:
        if not 1 <= len(self.ids) <= max_len:
            raise DataError(f"sequence length {len(self.ids)} outside [1, {max_len}]")
        if any(i < 0 or i >= vocab_size for i in self.ids):
            raise DataError("token id out of vocabulary range")
        if PAD in self.ids:
            raise DataError("unpadded sequence contains PAD")


@dataclass(frozen=True)
class ParallelPair:
    source: TokenSequence
    target: TokenSequence


@dataclass
class SemiSplit:
    labelled: list[ParallelPair]
    unlabelled: list[TokenSequence]
    val: list[ParallelPair]
    test: list[ParallelPair]


def encode_text(vocab: Vocab, text: str, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    if max_len < 2:
        raise DataError("max_len must be >= 2")
    toks = tokenize(text)
    if not toks:
        raise DataError("empty sequence")
    body = [vocab.lookup(t) for t in toks][: max_len - 2]
    return TokenSequence((BOS, *body, EOS))


def decode_ids(vocab: Vocab, ids: Sequence[int]) -> str:
    """Inverse of encode_text: drops BOS/PAD and stops at the first EOS."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        out.append(vocab.id_to_token[i])
    return " ".join(out)


def read_lines(path: str | Path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def load_parallel_tsv(path: str | Path, vocab: Vocab,
                      max_len: int = DEFAULT_MAX_LEN) -> list[ParallelPair]:
    pairs = []
    for lineno, line in enumerate(read_lines(path), start=1):
        fields = line.split("\t")
        if len(fields) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
        try:
            pairs.append(ParallelPair(encode_text(vocab, fields[0], max_len),
                                      encode_text(vocab, fields[1], max_len)))
        except DataError as err:
            raise DataError(f"{path}:{lineno}: {err}") from None
    return pairs


def load_reference_tsv(path: str | Path, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN
                       ) -> list[tuple[TokenSequence, list[str]]]:
    """Test file rows ``source<TAB>ref1[<TAB>ref2...]``; references stay as text."""
    rows = []
    for lineno, line in enumerate(read_lines(path), start=1):
        fields = line.split("\t")
        if len(fields) < 2:
            raise DataError(f"{path}:{lineno}: expected a source and at least one reference")
        refs = [" ".join(tokenize(f)) for f in fields[1:]]
        if not all(refs):
            raise DataError(f"{path}:{lineno}: empty reference")
        try:
            rows.append((encode_text(vocab, fields[0], max_len), refs))
        except DataError as err:
            raise DataError(f"{path}:{lineno}: {err}") from None
    return rows


def load_mono(path: str | Path, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> list[TokenSequence]:
    seqs = []
    for lineno, line in enumerate(read_lines(path), start=1):
        try:
            seqs.append(encode_text(vocab, line, max_len))
        except DataError as err:
            raise DataError(f"{path}:{lineno}: {err}") from None
    return seqs


def make_semi_split(pairs: Sequence[ParallelPair], m: int, n: int, seed: int,
                    n_val: int = 0, n_test: int = 0) -> SemiSplit:
    """Seeded split with ``m`` labelled pairs drawn from a pool of ``n`` sources.

    The labelled pairs are the first ``m`` of the ``n`` pooled pairs, so the
    unlabelled sources always contain every labelled source.
    """
    if m > n:
        raise DataError("labelled exceeds unlabelled")
    if m < 0 or n_val < 0 or n_test < 0:
        raise DataError("split sizes must be non-negative")
    if n + n_val + n_test > len(pairs):
        raise DataError(f"split needs {n + n_val + n_test} pairs, only {len(pairs)} available")
    order = list(range(len(pairs)))
    random.Random(seed).shuffle(order)
    test = [pairs[i] for i in order[:n_test]]
    val = [pairs[i] for i in order[n_test:n_test + n_val]]
    pool = [pairs[i] for i in order[n_test + n_val:n_test + n_val + n]]
    return SemiSplit(labelled=pool[:m], unlabelled=[p.source for p in pool],
                     val=val, test=test)


def pad_batch(seqs: Sequence[TokenSequence | Sequence[int]]) -> torch.Tensor:
    rows = [s.ids if isinstance(s, TokenSequence) else tuple(s) for s in seqs]
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), PAD, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return out


def epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    order = list(range(n))
    random.Random(seed * 100003 + epoch).shuffle(order)
    return order


def batch_iter(dataset: Sequence, batch_size: int, seed: int, epoch: int
               ) -> Iterator[torch.Tensor | tuple[torch.Tensor, torch.Tensor]]:
    """Seeded per-epoch permutation, padded to the longest row of each batch.

    Items may be TokenSequence (yields one tensor) or ParallelPair (yields
    ``(source, target)`` tensors). The final partial batch is kept.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise DataError("empty dataset")
    order = epoch_order(len(dataset), seed, epoch)
    for start in range(0, len(order), batch_size):
        items = [dataset[i] for i in order[start:start + batch_size]]
        if isinstance(items[0], ParallelPair):
            yield pad_batch([p.source for p in items]), pad_batch([p.target for p in items])
        else:
            yield pad_batch(items)
