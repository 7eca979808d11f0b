"""Teacher pretraining trajectories and their on-disk store.

A trajectory is a sequence of parameter snapshots taken while training a
model on the real corpus with Adam. Stores are written as: an 8-byte
magic, a little-endian u32 format version, a u32 header length, a JSON
header describing every array block, then the blocks themselves as
little-endian float64.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError, ParamVector
from .corpus import TokenCorpus, batch_iter
from .models import ModelConfig, hard_nll_graph, init_params
from .optim import AdamHyper, AdamState, adam_step
from . import autodiff as ad

MAGIC = b"FARZITRJ"
FORMAT_VERSION = 1


class StoreFormatError(ValueError):
    pass


@dataclass
class Trajectory:
    config: ModelConfig
    steps: list                 # snapshot step indices, ascending, starts at 0
    flats: np.ndarray           # (n_snapshots, n_params) float64
    losses: list                # training loss recorded at each snapshot

    def __len__(self):
        return len(self.steps)

    def params_at(self, i) -> ParamVector:
        return init_params(self.config).unflatten(self.flats[i])

    def final_params(self) -> ParamVector:
        return self.params_at(len(self.steps) - 1)


@dataclass
class TrajectoryStore:
    trajectories: list
    vocab_size: int
    corpus_fingerprint: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def sample_init(self, rng) -> ParamVector:
        """Uniform draw over all (trajectory, snapshot) pairs."""
        if not self.trajectories:
            raise ValueError("empty trajectory store")
        sizes = [len(t) for t in self.trajectories]
        flat = int(rng.integers(sum(sizes)))
        for t, n in zip(self.trajectories, sizes):
            if flat < n:
                return t.params_at(flat)
            flat -= n
        raise AssertionError("unreachable")


def _hard_loss_value_and_grad(params, batch, config):
    pvars = {n: ad.leaf(a) for n, a in params.items()}
    out = hard_nll_graph(pvars, batch, config)
    loss = float(out.val)
    if not np.isfinite(loss):
        raise NumericError("non-finite pretraining loss")
    gvars = ad.grad(out, [pvars[n] for n in params.names])
    return loss, ParamVector([(n, g.val.copy()) for n, g in zip(params.names, gvars)])


def pretrain_trajectories(corpus: TokenCorpus, config: ModelConfig,
                          n_trajectories: int, steps: int, checkpoint_every: int,
                          hyper: AdamHyper = None, batch_size: int = 32,
                          seed: int = 0, split: str = "train") -> TrajectoryStore:
    """Train `n_trajectories` independently-seeded teachers on the corpus.

    Snapshots are taken at step 0 and every `checkpoint_every` steps
    thereafter (the final step is always included). Deterministic given
    (corpus, config, seed).
    """
    if corpus.vocab_size != config.vocab_size:
        raise ValueError("corpus vocab %d != model vocab %d"
                         % (corpus.vocab_size, config.vocab_size))
    if steps < 1 or checkpoint_every < 1:
        raise ValueError("steps and checkpoint_every must be >= 1")
    hyper = hyper or AdamHyper()
    trajectories = []
    for k in range(n_trajectories):
        mc = ModelConfig(**{**config.to_dict(), "seed": config.seed + k})
        params = init_params(mc)
        batches = batch_iter(corpus, split, batch_size, config.max_seq_len,
                             seed=seed * 100003 + k)
        state = AdamState.fresh(params)
        snap_steps, snaps, losses = [], [], []

        def snapshot(t, loss):
            snap_steps.append(t)
            snaps.append(state.w.flatten())
            losses.append(loss)

        loss, _ = _hard_loss_value_and_grad(state.w, next(batches), mc)
        snapshot(0, loss)
        for t in range(1, steps + 1):
            batch = next(batches)
            try:
                loss, g = _hard_loss_value_and_grad(state.w, batch, mc)
            except NumericError as e:
                raise NumericError(
                    "pretraining run %d diverged at step %d (last finite loss "
                    "%.4f): %s" % (k, t, losses[-1], e))
            state = adam_step(state, g, hyper)
            if t % checkpoint_every == 0 or t == steps:
                snapshot(t, loss)
        trajectories.append(Trajectory(mc, snap_steps, np.stack(snaps), losses))
    return TrajectoryStore(
        trajectories, corpus.vocab_size, corpus.fingerprint(),
        meta={"steps": steps, "checkpoint_every": checkpoint_every,
              "batch_size": batch_size, "seed": seed,
              "hyper": vars(hyper)})


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _write_blocks(fh, magic, header, arrays):
    payload = json.dumps(header, sort_keys=True).encode("ascii")
    fh.write(magic)
    fh.write(np.uint32(FORMAT_VERSION).tobytes())
    fh.write(np.uint32(len(payload)).tobytes())
    fh.write(payload)
    for a in arrays:
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_blocks(fh, magic, path):
    got = fh.read(len(magic))
    if got != magic:
        raise StoreFormatError(
            "%s: bad magic at offset 0: expected %r, got %r" % (path, magic, got))
    version = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise StoreFormatError("%s: unsupported format version %d" % (path, version))
    hlen = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
    try:
        header = json.loads(fh.read(hlen).decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise StoreFormatError("%s: corrupt JSON header" % path)
    return header


def save_store(store: TrajectoryStore, path):
    header = {
        "vocab_size": store.vocab_size,
        "corpus_fingerprint": "%016x" % store.corpus_fingerprint,
        "meta": {k: v for k, v in store.meta.items()},
        "trajectories": [
            {"config": t.config.to_dict(), "steps": t.steps,
             "losses": t.losses, "shape": list(t.flats.shape)}
            for t in store.trajectories],
    }
    with open(path, "wb") as fh:
        _write_blocks(fh, MAGIC, header, [t.flats for t in store.trajectories])


def load_store(path, expect_fingerprint=None) -> TrajectoryStore:
    with open(path, "rb") as fh:
        header = _read_blocks(fh, MAGIC, path)
        trajectories = []
        for spec in header["trajectories"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape))
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise StoreFormatError("%s: truncated parameter block" % path)
            flats = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
            config = ModelConfig.from_dict(spec["config"])
            if flats.shape[1] != init_params(config).total_len:
                raise StoreFormatError(
                    "%s: parameter block does not match model config %r"
                    % (path, spec["config"]))
            trajectories.append(Trajectory(config, list(spec["steps"]),
                                           flats, list(spec["losses"])))
    fp = int(header["corpus_fingerprint"], 16)
    if expect_fingerprint is not None and fp != expect_fingerprint:
        warnings.warn(
            "%s: trajectory store was built from a different corpus "
            "(fingerprint %016x != %016x)" % (path, fp, expect_fingerprint))
    return TrajectoryStore(trajectories, int(header["vocab_size"]), fp,
                           meta=header.get("meta", {}))
