"""Data distillation: learn a small latent-factorized synthetic corpus.

The synthetic dataset is never stored as an explicit (rows x positions x
vocab) tensor of free parameters; instead a latent tensor ``D`` (mu, xi, d)
and a decoder ``M`` (d, V) produce row distributions

    probs = softmax(D @ M / tau)

so every vocabulary slice has rank at most d. The outer loop trains
(D, M) by differentiating a meta-objective through T inner optimizer
steps with the constant-memory reverse pass from :mod:`farzi.optim`.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, ParamVector, value_and_grad
from .corpus import TokenCorpus, batch_iter
from .models import (ModelConfig, SoftBatch, hard_nll_graph, init_params,
                     soft_nll_graph)
from .optim import (AdamHyper, AdamState, BatchSchedule, CheckpointPolicy,
                    SgdHyper, adam_reverse, adam_step, adam_unroll,
                    sgd_reverse, sgd_unroll)
from .trajectories import TrajectoryStore, _read_blocks, _write_blocks

SYN_MAGIC = b"FARZISYN"

OBJECTIVES = ("farzi_mm", "mm", "dc", "mtt")


@dataclass
class DistillConfig:
    n_rows: int                    # mu: synthetic sequences
    seq_len: int                   # xi: positions per sequence
    latent_dim: int                # d
    tau: float = 1.0
    objective: str = "farzi_mm"
    inner_optimizer: str = "adam"
    inner_steps: int = 50
    inner_batch: int = 8
    inner_hyper: AdamHyper = field(default_factory=AdamHyper)
    sgd_hyper: SgdHyper = field(default_factory=lambda: SgdHyper(lr=0.01, momentum=0.9))
    meta_batch: int = 32
    outer_steps: int = 100
    outer_lr: float = 0.01
    weight_decay: float = 0.0
    checkpoint_interval: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError("unknown objective %r (choose from %s)"
                             % (self.objective, OBJECTIVES))
        if self.inner_optimizer not in ("adam", "sgd"):
            raise ValueError("inner_optimizer must be 'adam' or 'sgd'")
        if self.n_rows < 1 or self.seq_len < 2 or self.latent_dim < 1:
            raise ValueError("need n_rows >= 1, seq_len >= 2, latent_dim >= 1")
        if self.inner_batch > self.n_rows:
            raise ValueError("inner_batch %d exceeds n_rows %d"
                             % (self.inner_batch, self.n_rows))
        if self.tau <= 0:
            raise ValueError("tau must be positive")


class SyntheticDataset:
    """Latent factors D (mu, xi, d) and decoder M (d, V) at temperature tau."""

    def __init__(self, D, M, tau):
        self.D = np.asarray(D, dtype=np.float64)
        self.M = np.asarray(M, dtype=np.float64)
        self.tau = float(tau)
        if self.D.ndim != 3 or self.M.ndim != 2 or self.D.shape[2] != self.M.shape[0]:
            raise ValueError("D must be (mu, xi, d) and M (d, V) with matching d")

    @property
    def shape(self):
        mu, xi, d = self.D.shape
        return mu, xi, d, self.M.shape[1]

    @classmethod
    def init(cls, config: DistillConfig, vocab_size, store: TrajectoryStore = None):
        """D ~ N(0,1); M from a teacher's embedding table when available."""
        rng = np.random.default_rng(config.seed)
        D = rng.normal(size=(config.n_rows, config.seq_len, config.latent_dim))
        d = config.latent_dim
        if store is not None and len(store) > 0:
            embed = store.trajectories[0].final_params()["embed"]  # (V, d_model)
            if embed.shape[1] == d and embed.shape[0] == vocab_size:
                M = embed.T.copy()
            else:
                M = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, vocab_size))
        else:
            M = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, vocab_size))
        if d >= min(config.n_rows * config.seq_len, vocab_size):
            warnings.warn("latent_dim %d is not a bottleneck for a %dx%d x %d "
                          "dataset" % (d, config.n_rows, config.seq_len, vocab_size))
        return cls(D, M, config.tau)

    def logits(self) -> np.ndarray:
        mu, xi, d = self.D.shape
        return (self.D.reshape(mu * xi, d) @ self.M) / self.tau

    def materialize(self) -> SoftBatch:
        z = self.logits()
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        mu, xi, _ = self.D.shape
        probs = (e / e.sum(axis=-1, keepdims=True)).reshape(mu, xi, -1)
        return SoftBatch(probs, np.ones((mu, xi)))

    def backprop(self, dx):
        """Chain a cotangent on the materialized probs back to (dD, dM)."""
        mu, xi, d = self.D.shape
        dv, mv = ad.leaf(self.D), ad.leaf(self.M)
        z = ad.matmul(ad.reshape(dv, (mu * xi, d)), mv) * ad.const(1.0 / self.tau)
        probs = ad.softmax(z, axis=-1)
        gd, gm = ad.grad(probs, [dv, mv], seed=np.asarray(dx).reshape(mu * xi, -1))
        return gd.val.copy(), gm.val.copy()

    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.logits()))


# ---------------------------------------------------------------------------
# serialization (same block layout as the trajectory store)
# ---------------------------------------------------------------------------

def save_synthetic(syn: SyntheticDataset, path, meta=None):
    header = {"tau": syn.tau, "d_shape": list(syn.D.shape),
              "m_shape": list(syn.M.shape), "meta": meta or {}}
    with open(path, "wb") as fh:
        _write_blocks(fh, SYN_MAGIC, header, [syn.D, syn.M])


def load_synthetic(path):
    with open(path, "rb") as fh:
        header = _read_blocks(fh, SYN_MAGIC, path)
        nd = int(np.prod(header["d_shape"]))
        nm = int(np.prod(header["m_shape"]))
        D = np.frombuffer(fh.read(8 * nd), dtype="<f8").reshape(header["d_shape"])
        M = np.frombuffer(fh.read(8 * nm), dtype="<f8").reshape(header["m_shape"])
    return SyntheticDataset(D.astype(np.float64), M.astype(np.float64),
                            header["tau"]), header.get("meta", {})


# ---------------------------------------------------------------------------
# meta-objectives: each returns (meta_loss, dD, dM, extras)
# ---------------------------------------------------------------------------

def _soft_inner_loss(config: ModelConfig):
    def loss_fn(pvars, x, mask_rows):
        if not isinstance(x, ad.Var):
            x = ad.leaf(x)
        return soft_nll_graph(pvars, x, mask_rows, config)
    return loss_fn


def _real_meta_fn(batch, config: ModelConfig):
    def vg(params):
        pvars = {n: ad.leaf(a) for n, a in params.items()}
        out = hard_nll_graph(pvars, batch, config)
        gs = ad.grad(out, [pvars[n] for n in params.names])
        return float(out.val), ParamVector(
            [(n, g.val.copy()) for n, g in zip(params.names, gs)])
    return vg


def _sample_theta0(store, model_config, rng, fresh=False):
    """theta0 policy: uniform over stored (trajectory, snapshot) pairs when a
    store is given; a fixed seeded random init without one; `fresh` draws a
    new random init every call (plain meta-matching)."""
    if store is not None and len(store) > 0:
        return store.sample_init(rng)
    if fresh:
        cfg = ModelConfig(**{**model_config.to_dict(),
                             "seed": int(rng.integers(2 ** 31))})
        return init_params(cfg)
    return init_params(model_config)


def farzi_meta_step(syn: SyntheticDataset, store, corpus, real_batch,
                    dconfig: DistillConfig, model_config: ModelConfig,
                    rng, use_sgd=False):
    """One bilevel meta-gradient: inner-train on synthetic data, score on
    a real batch, reverse through the inner optimizer."""
    theta0 = _sample_theta0(store, model_config, rng,
                            fresh=dconfig.objective == "mm")
    data = syn.materialize()
    T = dconfig.inner_steps
    schedule = BatchSchedule(int(rng.integers(2 ** 31)), dconfig.n_rows,
                             dconfig.inner_batch, T)
    loss_fn = _soft_inner_loss(model_config)
    ckpt = CheckpointPolicy(dconfig.checkpoint_interval)
    if use_sgd:
        final, ckpts = sgd_unroll(theta0, loss_fn, data, T,
                                  dconfig.sgd_hyper, ckpt, schedule)
    else:
        final, ckpts = adam_unroll(theta0, loss_fn, data, T,
                                   dconfig.inner_hyper, ckpt, schedule)
    meta_loss, dwT = _real_meta_fn(real_batch, model_config)(final.w)
    if use_sgd:
        res = sgd_reverse(final, dwT, loss_fn, data, T,
                          dconfig.sgd_hyper, ckpts, schedule)
    else:
        res = adam_reverse(final, dwT, loss_fn, data, T,
                           dconfig.inner_hyper, ckpts, schedule)
    dD, dM = syn.backprop(res.dx)
    inner_final = soft_batch_loss(final.w, data, model_config)
    return meta_loss, dD, dM, {"inner_final_loss": inner_final,
                               "drift_log": res.drift_log}


def soft_batch_loss(params, data, config: ModelConfig) -> float:
    pvars = {n: ad.leaf(a) for n, a in params.items()}
    return float(soft_nll_graph(pvars, ad.leaf(data.probs), data.mask,
                                config).val)


def dc_meta_step(syn: SyntheticDataset, store, corpus, real_batch,
                 dconfig: DistillConfig, model_config: ModelConfig, rng):
    """Layerwise gradient matching: sum over segments of 1 - cosine between
    the synthetic-data and real-data gradients at a sampled (frozen) theta."""
    theta = _sample_theta0(store, model_config, rng)
    data = syn.materialize()
    loss_fn = _soft_inner_loss(model_config)

    def bl(pvars, x):
        return loss_fn(pvars, x, data.mask)

    _, g_real = _real_meta_fn(real_batch, model_config)(theta)
    _, g_syn = value_and_grad(bl, theta, data.probs)

    meta_loss = 0.0
    direction_segs = []
    for name in theta.names:
        a = g_syn[name].reshape(-1)
        b = g_real[name].reshape(-1)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na < 1e-12 or nb < 1e-12:
            direction_segs.append((name, np.zeros_like(g_syn[name])))
            continue
        cos = float(a @ b) / (na * nb)
        meta_loss += 1.0 - cos
        dda = -(b / (na * nb) - cos * a / na ** 2)
        direction_segs.append((name, dda.reshape(g_syn[name].shape)))
    v = ParamVector(direction_segs)
    dx = ad.hvp_data(bl, theta, data.probs, v)
    dD, dM = syn.backprop(dx)
    return float(meta_loss), dD, dM, {"inner_final_loss": float("nan")}


def mtt_meta_step(syn: SyntheticDataset, store: TrajectoryStore, corpus,
                  real_batch, dconfig: DistillConfig,
                  model_config: ModelConfig, rng):
    """Trajectory matching: start at a teacher snapshot, train on synthetic
    data, and pull the result toward the teacher's next snapshot."""
    if store is None or len(store) == 0:
        raise ValueError("mtt requires a trajectory store")
    traj = store.trajectories[int(rng.integers(len(store)))]
    if len(traj) < 2:
        raise ValueError("mtt requires trajectories with >= 2 snapshots")
    i = int(rng.integers(len(traj) - 1))
    theta0, theta_star = traj.params_at(i), traj.params_at(i + 1)
    seg = theta_star.flatten() - theta0.flatten()
    denom = float(seg @ seg)
    if denom < 1e-12:
        raise ValueError(
            "degenerate teacher segment (snapshots %d and %d coincide)"
            % (traj.steps[i], traj.steps[i + 1]))
    data = syn.materialize()
    T = dconfig.inner_steps
    schedule = BatchSchedule(int(rng.integers(2 ** 31)), dconfig.n_rows,
                             dconfig.inner_batch, T)
    loss_fn = _soft_inner_loss(model_config)
    ckpt = CheckpointPolicy(dconfig.checkpoint_interval)
    use_sgd = dconfig.inner_optimizer == "sgd"
    if use_sgd:
        final, ckpts = sgd_unroll(theta0, loss_fn, data, T,
                                  dconfig.sgd_hyper, ckpt, schedule)
    else:
        final, ckpts = adam_unroll(theta0, loss_fn, data, T,
                                   dconfig.inner_hyper, ckpt, schedule)
    diff = final.w.flatten() - theta_star.flatten()
    meta_loss = float(diff @ diff) / denom
    dwT = final.w.unflatten(2.0 * diff / denom)
    if use_sgd:
        res = sgd_reverse(final, dwT, loss_fn, data, T,
                          dconfig.sgd_hyper, ckpts, schedule)
    else:
        res = adam_reverse(final, dwT, loss_fn, data, T, dconfig.inner_hyper,
                           ckpts, schedule)
    dD, dM = syn.backprop(res.dx)
    return meta_loss, dD, dM, {
        "inner_final_loss": soft_batch_loss(final.w, data, model_config)}


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

@dataclass
class MetaStepReport:
    step: int
    objective: str
    meta_loss: float
    grad_norm_d: float
    grad_norm_m: float
    inner_final_loss: float
    wall_time: float
    extras: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"step": self.step, "objective": self.objective,
                           "meta_loss": self.meta_loss,
                           "grad_norm_d": self.grad_norm_d,
                           "grad_norm_m": self.grad_norm_m,
                           "inner_final_loss": self.inner_final_loss,
                           "wall_time": self.wall_time, **self.extras},
                          sort_keys=True)


@dataclass
class DistillResult:
    syn: SyntheticDataset
    reports: list
    completed: bool
    failure: str = ""


def distill(corpus: TokenCorpus, model_config: ModelConfig,
            dconfig: DistillConfig, store: TrajectoryStore = None,
            on_step=None) -> DistillResult:
    """Run the outer optimization; on numeric failure the partial synthetic
    dataset and step reports are still returned (``completed=False``)."""
    syn = SyntheticDataset.init(dconfig, corpus.vocab_size, store)
    rng = np.random.default_rng(dconfig.seed + 1)
    real_batches = batch_iter(corpus, "train", dconfig.meta_batch,
                              model_config.max_seq_len, seed=dconfig.seed + 2)
    outer = AdamState.fresh(ParamVector([("D", syn.D), ("M", syn.M)]))
    outer_hyper = AdamHyper(alpha=dconfig.outer_lr)
    reports = []
    for step in range(1, dconfig.outer_steps + 1):
        t0 = time.perf_counter()
        real_batch = next(real_batches)
        try:
            use_sgd = dconfig.inner_optimizer == "sgd"
            if dconfig.objective == "farzi_mm":
                out = farzi_meta_step(syn, store, corpus, real_batch,
                                      dconfig, model_config, rng,
                                      use_sgd=use_sgd)
            elif dconfig.objective == "mm":
                out = farzi_meta_step(syn, None, corpus, real_batch,
                                      dconfig, model_config, rng,
                                      use_sgd=use_sgd)
            elif dconfig.objective == "dc":
                out = dc_meta_step(syn, store, corpus, real_batch,
                                   dconfig, model_config, rng)
            else:
                out = mtt_meta_step(syn, store, corpus, real_batch,
                                    dconfig, model_config, rng)
        except NumericError as e:
            return DistillResult(syn, reports, False, str(e))
        meta_loss, dD, dM, extras = out
        grads = ParamVector([("D", dD), ("M", dM)])
        outer = adam_step(outer, grads, outer_hyper)
        if dconfig.weight_decay > 0.0:
            outer.w = outer.w.map(
                lambda a: a * (1.0 - dconfig.outer_lr * dconfig.weight_decay))
        syn = SyntheticDataset(outer.w["D"], outer.w["M"], dconfig.tau)
        rep = MetaStepReport(
            step=step, objective=dconfig.objective, meta_loss=meta_loss,
            grad_norm_d=float(np.linalg.norm(dD)),
            grad_norm_m=float(np.linalg.norm(dM)),
            inner_final_loss=extras.pop("inner_final_loss", float("nan")),
            wall_time=time.perf_counter() - t0,
            extras={k: v for k, v in extras.items() if k != "drift_log"})
        reports.append(rep)
        if on_step is not None:
            on_step(rep, syn)
    return DistillResult(syn, reports, True)


# ---------------------------------------------------------------------------
# student fitting / evaluation on a synthetic dataset
# ---------------------------------------------------------------------------

def train_student_on_synthetic(syn: SyntheticDataset, model_config: ModelConfig,
                               steps=100, batch_size=None, hyper=None, seed=0):
    """Train a fresh student on the materialized synthetic data with Adam."""
    hyper = hyper or AdamHyper()
    mu = syn.D.shape[0]
    batch_size = batch_size or min(mu, 32)
    data = syn.materialize()
    params = init_params(ModelConfig(**{**model_config.to_dict(), "seed": seed}))
    schedule = BatchSchedule(seed + 7, mu, batch_size, steps)
    loss_fn = _soft_inner_loss(model_config)
    final, _ = adam_unroll(params, loss_fn, data, steps, hyper,
                           CheckpointPolicy(0), schedule)
    return final.w


def train_student_on_real(corpus: TokenCorpus, model_config: ModelConfig,
                          steps=100, batch_size=32, hyper=None, seed=0):
    """Reference student trained on the real corpus (hard tokens)."""
    from .trajectories import _hard_loss_value_and_grad
    hyper = hyper or AdamHyper()
    params = init_params(ModelConfig(**{**model_config.to_dict(), "seed": seed}))
    state = AdamState.fresh(params)
    batches = batch_iter(corpus, "train", batch_size, model_config.max_seq_len,
                         seed=seed + 11)
    for _ in range(steps):
        _, g = _hard_loss_value_and_grad(state.w, next(batches), model_config)
        state = adam_step(state, g, hyper)
    return state.w
