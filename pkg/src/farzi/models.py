"""Tiny causal next-token models over hard tokens or soft token distributions.

Three interchangeable architectures share one parameter/loss interface:

  * ``embed_softmax`` -- bigram-style: logits depend on the current token only
  * ``attention``     -- single-head, single-block, pre-norm causal attention
  * ``recurrent``     -- gated recurrent cell (minimal GRU-like)

Soft inputs are sequences of distributions over the vocabulary; position i
feeds the distribution-weighted embedding ``probs[i] @ E``. With one-hot
rows the soft path is bit-identical to the hard path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Var

ARCHS = ("embed_softmax", "attention", "recurrent")

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int
    arch: str = "embed_softmax"
    max_seq_len: int = 16
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError("unknown arch %r (choose from %s)" % (self.arch, ARCHS))
        if self.vocab_size < 2 or self.embed_dim < 1 or self.max_seq_len < 2:
            raise ValueError("invalid model config: V>=2, d>=1, max_seq_len>=2")

    def to_dict(self):
        return {"vocab_size": self.vocab_size, "embed_dim": self.embed_dim,
                "arch": self.arch, "max_seq_len": self.max_seq_len,
                "dropout": self.dropout, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class HardBatch:
    tokens: np.ndarray  # (b, L) int64
    mask: np.ndarray    # (b, L) float64, 1 = valid

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.float64)


@dataclass
class SoftBatch:
    probs: np.ndarray   # (b, L, V) float64, rows sum to 1 where unmasked
    mask: np.ndarray    # (b, L)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)


def one_hot_batch(batch: HardBatch, vocab_size: int) -> SoftBatch:
    b, L = batch.tokens.shape
    probs = np.zeros((b, L, vocab_size))
    rows = np.repeat(np.arange(b), L)
    cols = np.tile(np.arange(L), b)
    probs[rows, cols, batch.tokens.reshape(-1)] = 1.0
    return SoftBatch(probs, batch.mask.copy())


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(config: ModelConfig) -> ParamVector:
    """Seeded init; output layer zeroed so the initial loss is exactly ln V."""
    rng = np.random.default_rng(config.seed)
    V, d = config.vocab_size, config.embed_dim
    s = 1.0 / np.sqrt(d)
    segs = [("embed", rng.normal(0.0, s, size=(V, d)))]
    if config.arch == "attention":
        segs += [
            ("pos", rng.normal(0.0, s, size=(config.max_seq_len, d))),
            ("wq", rng.normal(0.0, s, size=(d, d))),
            ("wk", rng.normal(0.0, s, size=(d, d))),
            ("wv", rng.normal(0.0, s, size=(d, d))),
            ("wo", rng.normal(0.0, s, size=(d, d))),
            ("ln_g", np.ones(d)),
            ("ln_b", np.zeros(d)),
        ]
    elif config.arch == "recurrent":
        segs += [
            ("wz", rng.normal(0.0, s, size=(d, d))),
            ("uz", rng.normal(0.0, s, size=(d, d))),
            ("bz", np.zeros(d)),
            ("wh", rng.normal(0.0, s, size=(d, d))),
            ("uh", rng.normal(0.0, s, size=(d, d))),
            ("bh", np.zeros(d)),
        ]
    segs.append(("out", np.zeros((d, V))))
    return ParamVector(segs)


# ---------------------------------------------------------------------------
# forward passes (graph-building; pvars maps segment name -> Var)
# ---------------------------------------------------------------------------

def _layernorm(x, g, b):
    mu = ad.vmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.vmean(ad.mul(xc, xc), axis=-1, keepdims=True)
    return ad.mul(ad.div(xc, ad.sqrt(var + ad.const(LN_EPS))), g) + b


def _mm3(x, w):
    # (b, L, d) @ (d, k) via a 2-D matmul
    b, L, d = x.shape
    return ad.reshape(ad.matmul(ad.reshape(x, (b * L, d)), w), (b, L, w.shape[1]))


def _hidden(pvars, emb, config: ModelConfig):
    """Causal hidden states (b, L, d) from input embeddings."""
    b, L, d = emb.shape
    if config.arch == "embed_softmax":
        return emb
    if config.arch == "attention":
        if L > config.max_seq_len:
            raise ValueError("sequence longer than max_seq_len")
        pos = ad.slice_(pvars["pos"], (slice(0, L),))
        e = emb + ad.reshape(pos, (1, L, d))
        x1 = _layernorm(e, pvars["ln_g"], pvars["ln_b"])
        q = _mm3(x1, pvars["wq"])
        k = _mm3(x1, pvars["wk"])
        v = _mm3(x1, pvars["wv"])
        scores = ad.bmm(q, ad.transpose(k, (0, 2, 1))) * ad.const(1.0 / np.sqrt(d))
        causal = np.triu(np.full((L, L), -1e9), k=1)[None, :, :]
        att = ad.softmax(scores + ad.const(causal), axis=-1)
        ctx = ad.bmm(att, v)
        return e + _mm3(ctx, pvars["wo"])
    # recurrent gate
    h = ad.const(np.zeros((b, d)))
    cols = []
    for t in range(L):
        xt = ad.reshape(ad.slice_(emb, (slice(None), slice(t, t + 1), slice(None))), (b, d))
        z = ad.sigmoid(ad.matmul(xt, pvars["wz"]) + ad.matmul(h, pvars["uz"]) + pvars["bz"])
        cand = ad.tanh(ad.matmul(xt, pvars["wh"]) + ad.matmul(h, pvars["uh"]) + pvars["bh"])
        h = ad.mul(ad.const(1.0) - z, h) + ad.mul(z, cand)
        cols.append(ad.pad_slice(ad.reshape(h, (b, 1, d)),
                                 (slice(None), slice(t, t + 1), slice(None)),
                                 (b, L, d)))
    out = cols[0]
    for c in cols[1:]:
        out = out + c
    return out


def _logits_from_emb(pvars, emb, config, dropout_rng=None):
    h = _hidden(pvars, emb, config)
    h = ad.slice_(h, (slice(None), slice(0, emb.shape[1] - 1), slice(None)))
    if dropout_rng is not None and config.dropout > 0.0:
        keep = (dropout_rng.random(h.shape) >= config.dropout) / (1.0 - config.dropout)
        h = ad.mul(h, ad.const(keep))
    return _mm3(h, pvars["out"])


def hard_logits(pvars, batch: HardBatch, config: ModelConfig, dropout_rng=None):
    V = config.vocab_size
    if batch.tokens.min() < 0 or batch.tokens.max() >= V:
        raise ValueError("token id out of range [0, %d)" % V)
    emb = ad.reshape(ad.gather_rows(pvars["embed"], batch.tokens.reshape(-1)),
                     batch.tokens.shape + (config.embed_dim,))
    return _logits_from_emb(pvars, emb, config, dropout_rng)


def soft_logits(pvars, x, config: ModelConfig):
    """x: Var of probs (b, L, V); embeddings are distribution-weighted."""
    b, L, V = x.shape
    emb = ad.reshape(ad.matmul(ad.reshape(x, (b * L, V)), pvars["embed"]), (b, L, -1))
    return _logits_from_emb(pvars, emb, config)


def _pair_mask(mask):
    return (mask[:, 1:] * mask[:, :-1]).astype(np.float64)


def hard_nll_graph(pvars, batch: HardBatch, config: ModelConfig, dropout_rng=None):
    logits = hard_logits(pvars, batch, config, dropout_rng)
    logp = ad.log_softmax(logits, axis=-1)
    b, Lm1, V = logp.shape
    targets = batch.tokens[:, 1:]
    flat_idx = np.arange(b * Lm1) * V + targets.reshape(-1)
    tlp = ad.reshape(ad.take_flat(logp, flat_idx), (b, Lm1))
    pm = _pair_mask(batch.mask)
    n = pm.sum()
    if n == 0:
        raise ValueError("batch has no valid prediction positions")
    return ad.div(ad.vsum(ad.mul(tlp, ad.const(-pm))), ad.const(float(n)))


def soft_nll_graph(pvars, x, mask, config: ModelConfig):
    """Mean cross-entropy against the next-position soft target distribution."""
    logits = soft_logits(pvars, x, config)
    logp = ad.log_softmax(logits, axis=-1)
    targets = ad.slice_(x, (slice(None), slice(1, None), slice(None)))
    ce = ad.vsum(ad.mul(targets, logp), axis=-1)
    pm = _pair_mask(mask)
    n = pm.sum()
    if n == 0:
        raise ValueError("batch has no valid prediction positions")
    return ad.div(ad.vsum(ad.mul(ce, ad.const(-pm))), ad.const(float(n)))


# ---------------------------------------------------------------------------
# plain-value entry points
# ---------------------------------------------------------------------------

def make_hard_loss(batch: HardBatch, config: ModelConfig, dropout_rng=None):
    def loss_fn(pvars, _batch=None):
        return hard_nll_graph(pvars, batch, config, dropout_rng)
    return loss_fn


def make_soft_loss(mask, config: ModelConfig):
    """Inner-loop loss: loss_fn(pvars, x_var) over a soft batch Var."""
    def loss_fn(pvars, x):
        if not isinstance(x, Var):
            x = ad.leaf(x)
        return soft_nll_graph(pvars, x, mask, config)
    return loss_fn


def hard_nll(params: ParamVector, batch: HardBatch, config: ModelConfig) -> float:
    pvars = {n: ad.leaf(a) for n, a in params.items()}
    return float(hard_nll_graph(pvars, batch, config).val)


def soft_nll(params: ParamVector, batch: SoftBatch, config: ModelConfig) -> float:
    pvars = {n: ad.leaf(a) for n, a in params.items()}
    return float(soft_nll_graph(pvars, ad.leaf(batch.probs), batch.mask, config).val)


def soft_forward(params: ParamVector, batch: SoftBatch, config: ModelConfig) -> np.ndarray:
    pvars = {n: ad.leaf(a) for n, a in params.items()}
    return soft_logits(pvars, ad.leaf(batch.probs), config).val


def hard_forward(params: ParamVector, batch: HardBatch, config: ModelConfig) -> np.ndarray:
    pvars = {n: ad.leaf(a) for n, a in params.items()}
    return hard_logits(pvars, batch, config).val


def next_token_logits(params: ParamVector, tokens, config: ModelConfig) -> np.ndarray:
    """Logits for the token following a full context (one sequence)."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    # append a dummy position so the context's own prediction is emitted
    padded = np.concatenate([tokens, np.zeros((1, 1), dtype=np.int64)], axis=1)
    batch = HardBatch(padded, np.ones_like(padded, dtype=np.float64))
    logits = hard_forward(params, batch, config)
    return logits[0, -1]
