import numpy as np
import pytest
from scipy import stats

from spikemar.data import (
    BUILTIN_TEXT,
    SEP,
    VOCAB_SIZE,
    Corpus,
    batches,
    copy_sequence,
    gen_copy_task,
    gen_markov_text,
    load_corpus,
    load_text_file,
    save_corpus,
)
from spikemar.errors import ConfigError, DataError


def test_copy_sequence_example():
    assert copy_sequence([7, 3]).tolist() == [7, 3, SEP, 7, 3]


def test_copy_task_shape_and_framing():
    c = gen_copy_task(seed=0, n_sequences=20, length=9)
    assert len(c) == 20
    for s in c.sequences:
        assert s.size == 9 and s[4] == SEP
        assert np.array_equal(s[:4], s[5:])
        assert np.all((s[:4] >= 97) & (s[:4] <= 122))


@pytest.mark.parametrize("length", [1, 2, 4, 0])
def test_copy_task_rejects_bad_length(length):
    with pytest.raises(ConfigError):
        gen_copy_task(0, 3, length)


def test_copy_task_deterministic_and_seed_sensitive():
    assert gen_copy_task(5, 10, 11).equals(gen_copy_task(5, 10, 11))
    same = sum(gen_copy_task(s, 4, 9).equals(gen_copy_task(s + 1000, 4, 9)) for s in range(100))
    assert same == 0


def test_markov_order0_matches_source_histogram():
    n = 100_000
    corpus = gen_markov_text(seed=1, order=0, n_tokens=n)
    got = np.bincount(corpus.sequences[0], minlength=256)
    src = np.bincount(np.frombuffer(BUILTIN_TEXT.encode(), dtype=np.uint8), minlength=256)
    keep = src > 0
    assert got[~keep].sum() == 0
    expected = src[keep] / src.sum() * n
    chi2 = float(np.sum((got[keep] - expected) ** 2 / expected))
    assert chi2 < stats.chi2.ppf(0.999, keep.sum() - 1)


def test_markov_higher_order_only_emits_seen_ngrams():
    src = BUILTIN_TEXT.encode()
    corpus = gen_markov_text(seed=2, order=3, n_tokens=2000)
    text = bytes(corpus.sequences[0].astype(np.uint8))
    assert len(text) == 2000
    grams = {src[i:i + 4] for i in range(len(src) - 3)}
    assert all(text[i:i + 4] in grams for i in range(len(text) - 3))
    assert gen_markov_text(2, 3, 2000).equals(corpus)


def test_markov_validation():
    with pytest.raises(ConfigError):
        gen_markov_text(0, -1, 10)
    with pytest.raises(ConfigError):
        gen_markov_text(0, 5, 10, source="abc")


def test_corpus_rejects_out_of_vocab():
    with pytest.raises(DataError):
        Corpus([[0, VOCAB_SIZE]])


def test_round_trip(tmp_path):
    for corpus in (gen_copy_task(3, 7, 13), gen_markov_text(4, 2, 300), Corpus([])):
        path = save_corpus(corpus, tmp_path / f"{corpus.kind}.txt")
        assert load_corpus(path).equals(corpus)


def test_load_text_file(tmp_path):
    p = tmp_path / "t.txt"
    p.write_bytes(b"hi\n")
    assert load_text_file(p).sequences[0].tolist() == [104, 105, 10]
    empty = tmp_path / "e.txt"
    empty.write_bytes(b"")
    c = load_text_file(empty)
    assert len(c) == 0 and c.n_tokens == 0
    with pytest.raises(DataError, match="no full batch"):
        batches(c, 2, 4, seed=0)
    missing = tmp_path / "nope.txt"
    with pytest.raises(DataError, match=str(missing)):
        load_text_file(missing)


def test_batches_drop_remainder_and_shift_targets():
    corpus = gen_copy_task(0, 10, 9)
    out = list(batches(corpus, batch=3, seq_len=8, seed=1))
    assert len(out) == 3
    for x, y in out:
        assert x.shape == y.shape == (3, 8)
        assert np.array_equal(x[:, 1:], y[:, :-1])
    again = list(batches(corpus, batch=3, seq_len=8, seed=1))
    assert all(np.array_equal(a[0], b[0]) for a, b in zip(out, again))
    other = list(batches(corpus, batch=3, seq_len=8, seed=2))
    assert any(not np.array_equal(a[0], b[0]) for a, b in zip(out, other))


def test_batches_windows_and_short_sequences():
    corpus = Corpus([np.arange(10), np.arange(3)])
    # seq_len 3 -> windows of 4: two from the first sequence, none from the short one
    out = list(batches(corpus, batch=1, seq_len=3, seed=0))
    firsts = sorted(int(x[0, 0]) for x, _ in out)
    assert firsts == [0, 4]
