"""Token-sequence corpora: loading, synthetic generation, splits, batching."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .models import HardBatch

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class CorpusFormatError(ValueError):
    pass


@dataclass
class TokenCorpus:
    sequences: list            # list of list[int]
    vocab_size: int
    splits: dict               # {"train": [idx], "valid": [...], "test": [...]}
    provenance: dict = field(default_factory=dict)

    def split_sequences(self, split):
        return [self.sequences[i] for i in self.splits[split]]

    def fingerprint(self) -> int:
        """64-bit FNV-1a over the canonical TokensTxt serialization."""
        h = FNV_OFFSET
        for data in (to_tokens_txt(self).encode("ascii"),):
            for byte in data:
                h ^= byte
                h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
        return h


def to_tokens_txt(corpus: TokenCorpus) -> str:
    return "".join(" ".join(str(t) for t in s) + "\n" for s in corpus.sequences)


def make_splits(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict:
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    return {
        "train": sorted(order[:n_train].tolist()),
        "valid": sorted(order[n_train:n_train + n_valid].tolist()),
        "test": sorted(order[n_train + n_valid:].tolist()),
    }


def load_corpus(path, fmt="tokens_txt", vocab_size=None, split_seed=0) -> TokenCorpus:
    """Read a corpus file; sequences shorter than 2 tokens are dropped.

    tokens_txt: one sequence per line, space-separated decimal token ids.
    json_lines: one object per line with a "tokens" field.
    """
    if fmt not in ("tokens_txt", "json_lines"):
        raise CorpusFormatError("unknown corpus format %r" % fmt)
    sequences = []
    dropped = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if fmt == "tokens_txt":
                try:
                    seq = [int(tok) for tok in line.split()]
                except ValueError:
                    raise CorpusFormatError(
                        "%s:%d: non-integer token" % (path, lineno))
            else:
                try:
                    obj = json.loads(line)
                    seq = [int(t) for t in obj["tokens"]]
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    raise CorpusFormatError(
                        "%s:%d: expected a JSON object with a 'tokens' list" % (path, lineno))
            if any(t < 0 for t in seq):
                raise CorpusFormatError("%s:%d: negative token id" % (path, lineno))
            if len(seq) < 2:
                dropped += 1
                continue
            sequences.append(seq)
    if not sequences:
        raise CorpusFormatError("%s: no usable sequences" % path)
    if dropped:
        warnings.warn("%s: dropped %d sequences shorter than 2 tokens" % (path, dropped))
    max_tok = max(max(s) for s in sequences)
    if vocab_size is None:
        vocab_size = max_tok + 1
    elif max_tok >= vocab_size:
        raise CorpusFormatError(
            "%s: token %d outside declared vocab %d" % (path, max_tok, vocab_size))
    return TokenCorpus(sequences, vocab_size,
                       make_splits(len(sequences), split_seed),
                       provenance={"source": str(path), "format": fmt,
                                   "dropped_short": dropped})


def save_corpus(corpus: TokenCorpus, path):
    with open(path, "w") as fh:
        fh.write(to_tokens_txt(corpus))


def gen_markov_corpus(seed, vocab_size, order, n_sequences, length,
                      concentration=1.0, split_seed=None) -> TokenCorpus:
    """Sample a random Markov chain, then sample sequences from it.

    The transition table is drawn from a symmetric Dirichlet and kept in
    provenance so tests can compare empirical statistics against it.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    rng = np.random.default_rng(seed)
    n_states = vocab_size ** order
    table = rng.dirichlet(np.full(vocab_size, concentration), size=n_states)
    init = rng.dirichlet(np.full(vocab_size, concentration))
    sequences = []
    for _ in range(n_sequences):
        seq = [int(rng.choice(vocab_size, p=init))]
        if order == 2:
            seq.append(int(rng.choice(vocab_size, p=table[seq[0] * vocab_size])))
        while len(seq) < length:
            state = seq[-1] if order == 1 else seq[-2] * vocab_size + seq[-1]
            seq.append(int(rng.choice(vocab_size, p=table[state])))
        sequences.append(seq[:length])
    return TokenCorpus(
        sequences, vocab_size,
        make_splits(n_sequences, seed if split_seed is None else split_seed),
        provenance={"source": "markov", "order": order, "seed": seed,
                    "concentration": concentration,
                    "transition_table": table, "initial_dist": init})


def batch_iter(corpus: TokenCorpus, split, batch_size, max_len, seed):
    """Endless stream of seeded uniform HardBatch samples.

    Sequences longer than max_len keep their most recent max_len tokens;
    shorter ones are right-padded with token 0 and masked. Sampling is
    with replacement when batch_size exceeds the split size.
    """
    idx = corpus.splits[split]
    if not idx:
        raise ValueError("split %r is empty" % split)
    seqs = [corpus.sequences[i] for i in idx]
    rng = np.random.default_rng(seed)
    replace = batch_size > len(seqs)
    while True:
        pick = rng.choice(len(seqs), size=batch_size, replace=replace)
        tokens = np.zeros((batch_size, max_len), dtype=np.int64)
        mask = np.zeros((batch_size, max_len))
        for r, i in enumerate(pick):
            s = seqs[i][-max_len:]
            tokens[r, :len(s)] = s
            mask[r, :len(s)] = 1.0
        yield HardBatch(tokens, mask)


@dataclass
class PopularityIndex:
    counts: np.ndarray   # per-token occurrence counts
    deciles: np.ndarray  # decile id per token, 0 (coldest) .. 9 (hottest)

    @classmethod
    def from_corpus(cls, corpus: TokenCorpus, split="train"):
        counts = np.zeros(corpus.vocab_size, dtype=np.int64)
        for s in corpus.split_sequences(split):
            np.add.at(counts, s, 1)
        # equal-sized bins over the popularity ordering
        order = np.argsort(counts, kind="stable")
        deciles = np.empty(corpus.vocab_size, dtype=np.int64)
        bins = np.array_split(order, 10)
        for b, members in enumerate(bins):
            deciles[members] = b
        return cls(counts, deciles)
