import numpy as np
import pytest

from farzi.corpus import (CorpusFormatError, PopularityIndex, batch_iter,
                          gen_markov_corpus, load_corpus, save_corpus)


def test_splits_disjoint_and_sized():
    c = gen_markov_corpus(0, 8, 1, 100, 6)
    tr, va, te = (set(c.splits[s]) for s in ("train", "valid", "test"))
    assert len(tr) == 80 and len(va) == 10 and len(te) == 10
    assert not (tr & va or tr & te or va & te)
    assert tr | va | te == set(range(100))


def test_fingerprint_sensitive_to_content():
    c = gen_markov_corpus(0, 8, 1, 50, 6)
    fp = c.fingerprint()
    assert fp == c.fingerprint()  # stable
    c.sequences[0][0] = (c.sequences[0][0] + 1) % 8
    assert c.fingerprint() != fp


def test_roundtrip_through_tokens_txt(tmp_path):
    c = gen_markov_corpus(3, 10, 2, 40, 7)
    path = tmp_path / "c.txt"
    save_corpus(c, path)
    c2 = load_corpus(path, split_seed=5)
    assert c2.sequences == c.sequences
    assert c2.vocab_size == c.vocab_size
    assert c2.fingerprint() == c.fingerprint()


def test_loader_reports_line_numbers(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("1 2 3\n4 x 5\n")
    with pytest.raises(CorpusFormatError, match="2"):
        load_corpus(p)


def test_loader_drops_short_sequences_with_warning(tmp_path):
    p = tmp_path / "short.txt"
    p.write_text("1 2 3\n7\n4 5\n")
    with pytest.warns(UserWarning, match="dropped 1"):
        c = load_corpus(p)
    assert len(c.sequences) == 2


def test_loader_rejects_out_of_vocab(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("1 2 9\n")
    with pytest.raises(CorpusFormatError, match="vocab"):
        load_corpus(p, vocab_size=5)


def test_json_lines_format(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"tokens": [0, 1, 2]}\n{"tokens": [3, 1]}\n')
    c = load_corpus(p, fmt="json_lines")
    assert c.sequences == [[0, 1, 2], [3, 1]]
    p.write_text('{"nope": 1}\n')
    with pytest.raises(CorpusFormatError, match="1"):
        load_corpus(p, fmt="json_lines")


def test_markov_empirical_transitions_match_table():
    """Empirical next-token frequencies approach the generating chain."""
    c = gen_markov_corpus(1, 4, 1, 1500, 20, concentration=0.5)
    table = c.provenance["transition_table"]
    counts = np.zeros((4, 4))
    for s in c.sequences:
        for a, b in zip(s, s[1:]):
            counts[a, b] += 1
    emp = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)
    assert np.max(np.abs(emp - table)) < 0.05


def test_batch_iter_padding_and_determinism():
    c = gen_markov_corpus(2, 6, 1, 30, 9)
    b1 = next(batch_iter(c, "train", 4, 12, seed=9))
    b2 = next(batch_iter(c, "train", 4, 12, seed=9))
    assert np.array_equal(b1.tokens, b2.tokens)
    assert b1.tokens.shape == (4, 12)
    # padded tail is masked out
    assert np.all(b1.mask[:, 9:] == 0.0)
    assert np.all(b1.tokens[b1.mask == 0.0] == 0)


def test_batch_iter_truncates_to_suffix():
    c = gen_markov_corpus(2, 6, 1, 30, 9)
    b = next(batch_iter(c, "train", 4, 5, seed=0))
    assert b.tokens.shape == (4, 5)
    assert np.all(b.mask == 1.0)


def test_popularity_deciles_cover_vocab():
    c = gen_markov_corpus(4, 40, 1, 200, 15)
    pop = PopularityIndex.from_corpus(c)
    assert pop.deciles.min() == 0 and pop.deciles.max() == 9
    assert pop.counts.sum() == sum(len(s) for s in c.split_sequences("train"))
    # hotter decile has at least as many occurrences as a colder one
    means = [pop.counts[pop.deciles == d].mean() for d in range(10)]
    assert all(a <= b + 1e-9 for a, b in zip(means, means[1:]))
