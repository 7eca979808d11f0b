"""Ranking and language-model evaluation metrics.

Ranks are 1-based. Ties are broken deterministically (ascending item id)
for the top-k metrics and counted as half for AUC. Perplexity uses base-2
logs and corpus perplexity is the arithmetic mean of per-sentence
perplexities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamVector
from .corpus import PopularityIndex, TokenCorpus
from .models import HardBatch, ModelConfig, hard_forward


@dataclass
class RankInstance:
    scores: np.ndarray       # (n_items,)
    positives: np.ndarray    # int item ids

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.positives = np.atleast_1d(np.asarray(self.positives, dtype=np.int64))


@dataclass
class MetricReport:
    values: dict
    n_instances: int
    n_skipped: int = 0
    strata: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]


def _rank_of(scores, item):
    """1-based rank of `item` with ascending-id tie-break."""
    s = scores[item]
    above = int(np.sum(scores > s))
    tied_before = int(np.sum((scores == s) & (np.arange(scores.size) < item)))
    return above + tied_before + 1


def _instance_metrics(inst: RankInstance, ks):
    n = inst.scores.size
    pos = set(int(p) for p in inst.positives)
    out = {}
    ranks = [_rank_of(inst.scores, p) for p in sorted(pos)]
    for k in ks:
        out["hr@%d" % k] = float(any(r <= k for r in ranks))
        dcg = sum(1.0 / np.log2(r + 1.0) for r in ranks if r <= k)
        idcg = sum(1.0 / np.log2(i + 2.0) for i in range(min(len(ranks), k)))
        out["ndcg@%d" % k] = dcg / idcg
    neg = np.setdiff1d(np.arange(n), inst.positives)
    best = inst.scores[inst.positives].max()
    below = int(np.sum(inst.scores[neg] < best))
    tied = int(np.sum(inst.scores[neg] == best))
    out["auc"] = (below + 0.5 * tied) / neg.size
    return out


def rank_metrics(instances, ks=(1, 5, 10)) -> MetricReport:
    """Mean HR@k / nDCG@k / AUC over instances.

    Instances whose items are all positive carry no ranking information
    and are excluded (reported in ``n_skipped``).
    """
    usable, skipped = [], 0
    for inst in instances:
        if len(set(inst.positives.tolist())) >= inst.scores.size:
            skipped += 1
        else:
            usable.append(inst)
    if not usable:
        raise ValueError("no usable ranking instances")
    keys = ["hr@%d" % k for k in ks] + ["ndcg@%d" % k for k in ks] + ["auc"]
    acc = {k: 0.0 for k in keys}
    for inst in usable:
        m = _instance_metrics(inst, ks)
        for k in keys:
            acc[k] += m[k]
    return MetricReport({k: v / len(usable) for k, v in acc.items()},
                        n_instances=len(usable), n_skipped=skipped)


def stratified_report(instances, popularity: PopularityIndex, ks=(1, 5, 10)):
    """rank_metrics per popularity decile of the (first) positive item.

    Deciles with no instances are absent from ``strata``.
    """
    overall = rank_metrics(instances, ks)
    buckets = {}
    for inst in instances:
        d = int(popularity.deciles[int(inst.positives[0])])
        buckets.setdefault(d, []).append(inst)
    for d, bucket in sorted(buckets.items()):
        try:
            overall.strata[d] = rank_metrics(bucket, ks)
        except ValueError:
            pass  # every instance in the decile was degenerate
    return overall


# ---------------------------------------------------------------------------
# language-model evaluation
# ---------------------------------------------------------------------------

def sentence_ppl(logprobs2) -> float:
    """Perplexity of one sentence from base-2 token log-probabilities."""
    logprobs2 = np.asarray(logprobs2, dtype=np.float64)
    if logprobs2.size == 0:
        raise ValueError("empty sentence")
    if np.any(np.isneginf(logprobs2)):
        return float("inf")
    return float(2.0 ** (-np.mean(logprobs2)))


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def lm_eval(params: ParamVector, corpus: TokenCorpus, config: ModelConfig,
            split="test", max_sentences=None) -> MetricReport:
    """Corpus perplexity (mean of sentence PPLs) and greedy top-1 accuracy."""
    seqs = corpus.split_sequences(split)
    if max_sentences is not None:
        seqs = seqs[:max_sentences]
    if not seqs:
        raise ValueError("split %r is empty" % split)
    ppls, hits, total = [], 0, 0
    for seq in seqs:
        s = seq[:config.max_seq_len]
        tokens = np.asarray(s, dtype=np.int64)[None, :]
        batch = HardBatch(tokens, np.ones_like(tokens, dtype=np.float64))
        logits = hard_forward(params, batch, config)[0]     # (L-1, V)
        probs = _softmax_np(logits)
        targets = tokens[0, 1:]
        p = probs[np.arange(targets.size), targets]
        with np.errstate(divide="ignore"):
            ppls.append(sentence_ppl(np.log2(p)))
        hits += int(np.sum(np.argmax(logits, axis=-1) == targets))
        total += targets.size
    return MetricReport({"ppl": float(np.mean(ppls)),
                         "top1_acc": hits / total},
                        n_instances=len(ppls))


def next_token_instances(params: ParamVector, corpus: TokenCorpus,
                         config: ModelConfig, split="test",
                         max_sentences=None):
    """One RankInstance per next-token event: scores are the model logits,
    the positive is the observed token."""
    seqs = corpus.split_sequences(split)
    if max_sentences is not None:
        seqs = seqs[:max_sentences]
    instances = []
    for seq in seqs:
        s = seq[:config.max_seq_len]
        tokens = np.asarray(s, dtype=np.int64)[None, :]
        batch = HardBatch(tokens, np.ones_like(tokens, dtype=np.float64))
        logits = hard_forward(params, batch, config)[0]
        for i, tgt in enumerate(tokens[0, 1:]):
            instances.append(RankInstance(logits[i], np.array([tgt])))
    return instances
