import math

import numpy as np
import pytest

from farzi.autodiff import NumericError
from farzi.corpus import gen_markov_corpus
from farzi.models import ModelConfig
from farzi.optim import AdamHyper
from farzi.trajectories import (StoreFormatError, load_store,
                                pretrain_trajectories, save_store)


@pytest.fixture(scope="module")
def setup():
    corpus = gen_markov_corpus(0, 12, 1, 120, 8, concentration=0.4)
    config = ModelConfig(12, 3, arch="embed_softmax", max_seq_len=8)
    store = pretrain_trajectories(corpus, config, 3, 30, 10, AdamHyper(),
                                  batch_size=16, seed=5)
    return corpus, config, store


def test_snapshot_cadence_and_initial_loss(setup):
    _, _, store = setup
    for traj in store.trajectories:
        assert traj.steps == [0, 10, 20, 30]
        assert traj.losses[0] == pytest.approx(math.log(12), abs=1e-12)
        assert traj.losses[-1] < traj.losses[0]


def test_runs_are_independently_seeded(setup):
    _, _, store = setup
    a, b = store.trajectories[0], store.trajectories[1]
    assert not np.array_equal(a.flats[0], b.flats[0])


def test_pretrain_deterministic(setup):
    corpus, config, store = setup
    again = pretrain_trajectories(corpus, config, 3, 30, 10, AdamHyper(),
                                  batch_size=16, seed=5)
    for t1, t2 in zip(store.trajectories, again.trajectories):
        assert np.array_equal(t1.flats, t2.flats)


def test_roundtrip_bit_exact(tmp_path, setup):
    corpus, _, store = setup
    path = tmp_path / "s.ftrj"
    save_store(store, path)
    back = load_store(path, expect_fingerprint=corpus.fingerprint())
    assert back.vocab_size == store.vocab_size
    assert back.corpus_fingerprint == store.corpus_fingerprint
    for t1, t2 in zip(store.trajectories, back.trajectories):
        assert np.array_equal(t1.flats, t2.flats)
        assert t1.steps == t2.steps and t1.losses == t2.losses


def test_fingerprint_mismatch_warns(tmp_path, setup):
    _, _, store = setup
    path = tmp_path / "s.ftrj"
    save_store(store, path)
    with pytest.warns(UserWarning, match="different corpus"):
        load_store(path, expect_fingerprint=store.corpus_fingerprint ^ 1)


def test_corrupt_magic_is_reported(tmp_path, setup):
    _, _, store = setup
    path = tmp_path / "s.ftrj"
    save_store(store, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(raw)
    with pytest.raises(StoreFormatError, match="offset 0"):
        load_store(path)


def test_truncated_payload_is_reported(tmp_path, setup):
    _, _, store = setup
    path = tmp_path / "s.ftrj"
    save_store(store, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(StoreFormatError, match="truncated"):
        load_store(path)


def test_vocab_mismatch_rejected(setup):
    corpus, _, _ = setup
    bad = ModelConfig(13, 3, arch="embed_softmax", max_seq_len=8)
    with pytest.raises(ValueError, match="vocab"):
        pretrain_trajectories(corpus, bad, 1, 5, 5)


def test_sample_init_covers_all_snapshots(setup):
    _, _, store = setup
    rng = np.random.default_rng(0)
    seen = set()
    flats = {tuple(np.round(t.flats[i], 12))
             for t in store.trajectories for i in range(len(t))}
    for _ in range(300):
        seen.add(tuple(np.round(store.sample_init(rng).flatten(), 12)))
    assert seen == flats
