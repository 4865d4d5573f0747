import random

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from semipara import toy
from semipara.data import (
    BOS,
    EOS,
    PAD,
    UNK,
    DataError,
    ParallelPair,
    TokenSequence,
    Vocab,
    batch_iter,
    build_vocab,
    decode_ids,
    encode_text,
    load_mono,
    load_parallel_tsv,
    load_reference_tsv,
    make_semi_split,
)


@pytest.fixture
def abc():
    return build_vocab(["a b", "a c"])


class TestVocab:
    def test_frequency_then_lexicographic(self, abc):
        assert abc.tokens == ["a", "b", "c"]
        assert abc.lookup("a") == 4

    def test_min_freq_maps_rare_to_unk(self):
        v = build_vocab(["a b", "a c"], min_freq=2)
        assert v.tokens == ["a"]
        assert encode_text(v, "b").ids == (BOS, UNK, EOS)

    def test_fifty_types(self):
        rng = random.Random(0)
        types = [f"w{i:02d}" for i in range(50)]
        corpus = [" ".join(rng.choice(types) for _ in range(8)) for _ in range(1000)]
        distinct = len({w for line in corpus for w in line.split()})
        v = build_vocab(corpus, min_freq=1, max_size=100)
        assert len(v) == distinct + 4 == 54

    def test_max_size(self):
        v = build_vocab(["a a a b b c"], max_size=2)
        assert v.tokens == ["a", "b"]

    def test_empty_corpus(self):
        with pytest.raises(DataError, match="empty corpus"):
            build_vocab([])

    def test_specials_never_from_corpus(self):
        v = build_vocab(["<pad> x"])
        assert v.lookup("<pad>") == UNK
        assert encode_text(v, "<bos> <eos> x").ids == (BOS, UNK, UNK, 4, EOS)

    def test_save_load(self, abc, tmp_path):
        abc.save(tmp_path / "v.txt")
        assert (tmp_path / "v.txt").read_text().splitlines() == ["a", "b", "c"]
        assert Vocab.load(tmp_path / "v.txt") == abc


class TestEncode:
    def test_simple(self, abc):
        assert encode_text(abc, "A b").ids == (BOS, 4, 5, EOS)

    def test_truncates_to_twenty(self):
        words = [f"w{i}" for i in range(30)]
        v = build_vocab([" ".join(words)])
        seq = encode_text(v, " ".join(words), max_len=20)
        assert len(seq.ids) == 20
        assert seq.ids[0] == BOS and seq.ids[-1] == EOS

    def test_repeats_kept(self, abc):
        assert encode_text(abc, "a a a").ids == (BOS, 4, 4, 4, EOS)

    def test_empty(self, abc):
        with pytest.raises(DataError, match="empty sequence"):
            encode_text(abc, "   ")

    def test_sequence_invariants(self):
        with pytest.raises(ValueError):
            TokenSequence((EOS, BOS))

    @given(st.lists(st.sampled_from(toy.all_words()), min_size=1, max_size=30),
           st.integers(2, 25))
    def test_round_trip(self, words, max_len):
        v = build_vocab([" ".join(toy.all_words())])
        text = " ".join(words)
        assert decode_ids(v, encode_text(v, text, max_len).ids) == " ".join(words[: max_len - 2])


class TestFiles:
    def test_parallel(self, tmp_path):
        v = build_vocab(["hello world hi"])
        p = tmp_path / "p.tsv"
        p.write_text("hello world\thi world\n")
        pairs = load_parallel_tsv(p, v)
        assert len(pairs) == 1
        assert decode_ids(v, pairs[0].source.ids) == "hello world"

    def test_bad_line_number(self, tmp_path):
        v = build_vocab(["a b"])
        p = tmp_path / "p.tsv"
        p.write_text("a\tb\na\tb\tc\n")
        with pytest.raises(DataError, match=r"p.tsv:2:"):
            load_parallel_tsv(p, v)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_parallel_tsv(tmp_path / "nope.tsv", build_vocab(["a"]))

    def test_toy_corpus_line_count(self, tmp_path):
        pairs = toy.make_pairs(2000, seed=3)
        toy.write_tsv(pairs, tmp_path / "toy.tsv")
        v = build_vocab([s for s, _ in pairs] + [t for _, t in pairs])
        assert len(load_parallel_tsv(tmp_path / "toy.tsv", v)) == 2000

    def test_mono_and_references(self, tmp_path):
        v = build_vocab(["a b c"])
        (tmp_path / "m.txt").write_text("a b\nc\n")
        assert len(load_mono(tmp_path / "m.txt", v)) == 2
        (tmp_path / "r.tsv").write_text("a b\tb a\tA  B\n")
        rows = load_reference_tsv(tmp_path / "r.tsv", v)
        assert rows[0][1] == ["b a", "a b"]
        (tmp_path / "bad.tsv").write_text("a b\n")
        with pytest.raises(DataError, match=":1:"):
            load_reference_tsv(tmp_path / "bad.tsv", v)


def _pairs(n):
    v = build_vocab([f"x{i}" for i in range(n)] + [f"y{i}" for i in range(n)])
    return [ParallelPair(encode_text(v, f"x{i}"), encode_text(v, f"y{i}")) for i in range(n)]


class TestSplit:
    def test_scaled_semi_setup(self):
        pairs = _pairs(200)
        sp = make_semi_split(pairs, 20, 100, seed=1000)
        assert len(sp.labelled) == 20 and len(sp.unlabelled) == 100
        assert {p.source for p in sp.labelled} <= set(sp.unlabelled)

    def test_equal_sizes_add_nothing(self):
        sp = make_semi_split(_pairs(100), 50, 50, seed=1)
        assert [p.source for p in sp.labelled] == sp.unlabelled

    def test_labelled_exceeds(self):
        with pytest.raises(DataError, match="labelled exceeds unlabelled"):
            make_semi_split(_pairs(10), 5, 3, seed=0)

    @given(st.integers(0, 30), st.integers(0, 30), st.integers(0, 20), st.integers(0, 20),
           st.integers(0, 10**6))
    def test_disjoint_and_deterministic(self, m, extra, n_val, n_test, seed):
        pairs = _pairs(100)
        n = min(m + extra, 100 - n_val - n_test)
        m = min(m, n)
        a = make_semi_split(pairs, m, n, seed, n_val, n_test)
        assert a == make_semi_split(pairs, m, n, seed, n_val, n_test)
        ids = [set(map(id, part)) for part in (a.labelled, a.val, a.test)]
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


class TestBatches:
    def test_partition(self):
        seqs = [TokenSequence((BOS, 4 + i % 3, EOS)) for i in range(10)]
        assert [b.shape[0] for b in batch_iter(seqs, 4, 0, 0)] == [4, 4, 2]

    def test_full_batch(self):
        seqs = [TokenSequence((BOS, 4, EOS))] * 512
        assert len(list(batch_iter(seqs, 512, 0, 0))) == 1

    def test_seeded(self):
        seqs = [TokenSequence((BOS, *([4] * (i % 5 + 1)), EOS)) for i in range(20)]
        a = [b.tolist() for b in batch_iter(seqs, 6, 3, 2)]
        b = [b.tolist() for b in batch_iter(seqs, 6, 3, 2)]
        c = [b.tolist() for b in batch_iter(seqs, 6, 3, 3)]
        assert a == b and a != c

    def test_pairs_yield_tuples(self):
        src, tgt = next(batch_iter(_pairs(4), 4, 0, 0))
        assert src.shape == tgt.shape == (4, 3)

    def test_empty(self):
        with pytest.raises(DataError):
            list(batch_iter([], 2, 0, 0))

    @given(st.lists(st.integers(1, 18), min_size=1, max_size=40), st.integers(1, 16))
    def test_pad_only_trails(self, lengths, bs):
        seqs = [TokenSequence((BOS, *([5] * n), EOS)) for n in lengths]
        for batch in batch_iter(seqs, bs, 0, 0):
            is_pad = batch == PAD
            # once PAD starts in a row it never stops
            assert torch.equal(is_pad, is_pad.cummax(-1).values)
