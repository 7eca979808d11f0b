"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numeric failure during
optimization, 4 gradient-check failure.

Every option can also come from a JSON config file (``--config``); an
explicit command-line flag wins over the file, which wins over the
built-in default. Unknown keys in a config file are rejected.

Artifacts (corpora, trajectory stores, synthetic datasets) are written
deterministically: rerunning a command with the same inputs produces
byte-identical files. Wall-clock timestamps appear only in reports.
"""

from __future__ import annotations

import json
import sys
import time

import click
import numpy as np

from .autodiff import NumericError
from .corpus import CorpusFormatError, gen_markov_corpus, load_corpus, save_corpus
from .distill import (DistillConfig, SyntheticDataset, distill, load_synthetic,
                      save_synthetic, train_student_on_synthetic)
from .gradcheck import run_battery
from .metrics import lm_eval, next_token_instances, rank_metrics
from .models import ModelConfig
from .optim import AdamHyper, DriftError
from .trajectories import StoreFormatError, load_store, pretrain_trajectories, save_store

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_GRADCHECK = 4


def _merge_config(defaults, config_path, flags):
    """flag > config file > default; unknown config keys are an error."""
    merged = dict(defaults)
    if config_path:
        with open(config_path) as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as e:
                raise click.ClickException("bad config file: %s" % e)
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise click.ClickException(
                "unknown config keys: %s" % ", ".join(unknown))
        merged.update(file_cfg)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def _fail(code, msg):
    click.echo("error: %s" % msg, err=True)
    sys.exit(code)


@click.group()
def main():
    """Data distillation for autoregressive sequence corpora."""


# ---------------------------------------------------------------------------

@main.command("gen-corpus")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int)
@click.option("--vocab-size", type=int)
@click.option("--order", type=int)
@click.option("--n-sequences", type=int)
@click.option("--length", type=int)
@click.option("--concentration", type=float)
@click.option("--out", "out", required=True, type=click.Path())
def gen_corpus_cmd(config_path, out, **flags):
    """Sample a synthetic Markov corpus and write it as tokens-txt."""
    defaults = {"seed": 0, "vocab_size": 16, "order": 1,
                "n_sequences": 200, "length": 12, "concentration": 1.0}
    cfg = _merge_config(defaults, config_path, flags)
    try:
        corpus = gen_markov_corpus(cfg["seed"], cfg["vocab_size"], cfg["order"],
                                   cfg["n_sequences"], cfg["length"],
                                   cfg["concentration"])
    except ValueError as e:
        _fail(EXIT_CONFIG, e)
    save_corpus(corpus, out)
    click.echo(json.dumps({"sequences": len(corpus.sequences),
                           "vocab_size": corpus.vocab_size,
                           "fingerprint": "%016x" % corpus.fingerprint()}))


@main.command("pretrain")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--arch", type=str)
@click.option("--embed-dim", type=int)
@click.option("--max-seq-len", type=int)
@click.option("--n-trajectories", type=int)
@click.option("--steps", type=int)
@click.option("--checkpoint-every", type=int)
@click.option("--batch-size", type=int)
@click.option("--lr", type=float)
@click.option("--seed", type=int)
@click.option("--out", "out", required=True, type=click.Path())
def pretrain_cmd(config_path, corpus_path, out, **flags):
    """Train teacher trajectories on a corpus and store their snapshots."""
    defaults = {"arch": "embed_softmax", "embed_dim": 4, "max_seq_len": 12,
                "n_trajectories": 5, "steps": 100, "checkpoint_every": 20,
                "batch_size": 32, "lr": 0.01, "seed": 0}
    cfg = _merge_config(defaults, config_path, flags)
    try:
        corpus = load_corpus(corpus_path)
        mc = ModelConfig(corpus.vocab_size, cfg["embed_dim"], arch=cfg["arch"],
                         max_seq_len=cfg["max_seq_len"], seed=cfg["seed"])
        store = pretrain_trajectories(
            corpus, mc, cfg["n_trajectories"], cfg["steps"],
            cfg["checkpoint_every"], AdamHyper(alpha=cfg["lr"]),
            cfg["batch_size"], cfg["seed"])
    except (CorpusFormatError, ValueError) as e:
        _fail(EXIT_CONFIG, e)
    except NumericError as e:
        _fail(EXIT_NUMERIC, e)
    save_store(store, out)
    click.echo(json.dumps(
        {"trajectories": len(store),
         "final_losses": [t.losses[-1] for t in store.trajectories]}))


@main.command("distill")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--store", "store_path", type=click.Path(exists=True))
@click.option("--arch", type=str)
@click.option("--embed-dim", type=int)
@click.option("--max-seq-len", type=int)
@click.option("--objective", type=str)
@click.option("--inner-optimizer", type=str)
@click.option("--n-rows", type=int)
@click.option("--seq-len", type=int)
@click.option("--latent-dim", type=int)
@click.option("--tau", type=float)
@click.option("--inner-steps", type=int)
@click.option("--inner-batch", type=int)
@click.option("--inner-lr", type=float)
@click.option("--meta-batch", type=int)
@click.option("--outer-steps", type=int)
@click.option("--outer-lr", type=float)
@click.option("--weight-decay", type=float)
@click.option("--seed", type=int)
@click.option("--out", "out", required=True, type=click.Path())
@click.option("--report", "report_path", type=click.Path())
def distill_cmd(config_path, corpus_path, store_path, out, report_path, **flags):
    """Distill a corpus into a latent-factorized synthetic dataset."""
    defaults = {"arch": "embed_softmax", "embed_dim": 4, "max_seq_len": 12,
                "objective": "farzi_mm", "inner_optimizer": "adam",
                "n_rows": 8, "seq_len": 8,
                "latent_dim": 4, "tau": 1.0, "inner_steps": 50,
                "inner_batch": 8, "inner_lr": 0.01, "meta_batch": 32,
                "outer_steps": 100, "outer_lr": 0.01, "weight_decay": 0.0,
                "seed": 0}
    cfg = _merge_config(defaults, config_path, flags)
    try:
        corpus = load_corpus(corpus_path)
        store = None
        if store_path:
            store = load_store(store_path,
                               expect_fingerprint=corpus.fingerprint())
        mc = ModelConfig(corpus.vocab_size, cfg["embed_dim"], arch=cfg["arch"],
                         max_seq_len=cfg["max_seq_len"], seed=cfg["seed"])
        dc = DistillConfig(
            n_rows=cfg["n_rows"], seq_len=cfg["seq_len"],
            latent_dim=cfg["latent_dim"], tau=cfg["tau"],
            objective=cfg["objective"],
            inner_optimizer=cfg["inner_optimizer"],
            inner_steps=cfg["inner_steps"],
            inner_batch=min(cfg["inner_batch"], cfg["n_rows"]),
            inner_hyper=AdamHyper(alpha=cfg["inner_lr"]),
            meta_batch=cfg["meta_batch"], outer_steps=cfg["outer_steps"],
            outer_lr=cfg["outer_lr"], weight_decay=cfg["weight_decay"],
            seed=cfg["seed"])
    except (CorpusFormatError, StoreFormatError, ValueError) as e:
        _fail(EXIT_CONFIG, e)
    t0 = time.time()
    result = distill(corpus, mc, dc, store)
    save_synthetic(result.syn, out, meta={"config": cfg, "model": mc.to_dict()})
    if report_path:
        with open(report_path, "w") as fh:
            json.dump({"completed": result.completed,
                       "failure": result.failure,
                       "started_at": t0, "elapsed": time.time() - t0,
                       "synthetic_rank": result.syn.rank(),
                       "steps": [json.loads(r.to_json())
                                 for r in result.reports]}, fh, indent=1)
    if not result.completed:
        _fail(EXIT_NUMERIC, "distillation aborted (%s); partial artifacts "
              "were written" % result.failure)
    click.echo(json.dumps({"outer_steps": len(result.reports),
                           "final_meta_loss": result.reports[-1].meta_loss
                           if result.reports else None,
                           "synthetic_rank": result.syn.rank()}))


@main.command("fit-eval")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--syn", "syn_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--arch", type=str)
@click.option("--embed-dim", type=int)
@click.option("--max-seq-len", type=int)
@click.option("--steps", type=int)
@click.option("--seed", type=int)
@click.option("--report", "report_path", type=click.Path())
def fit_eval_cmd(config_path, syn_path, corpus_path, report_path, **flags):
    """Train a fresh student on a synthetic dataset; evaluate on real data."""
    defaults = {"arch": "embed_softmax", "embed_dim": 4, "max_seq_len": 12,
                "steps": 200, "seed": 0}
    cfg = _merge_config(defaults, config_path, flags)
    try:
        corpus = load_corpus(corpus_path)
        syn, _ = load_synthetic(syn_path)
        if syn.M.shape[1] != corpus.vocab_size:
            raise ValueError("synthetic vocab %d != corpus vocab %d"
                             % (syn.M.shape[1], corpus.vocab_size))
        mc = ModelConfig(corpus.vocab_size, cfg["embed_dim"], arch=cfg["arch"],
                         max_seq_len=cfg["max_seq_len"], seed=cfg["seed"])
    except (CorpusFormatError, StoreFormatError, ValueError) as e:
        _fail(EXIT_CONFIG, e)
    try:
        student = train_student_on_synthetic(syn, mc, steps=cfg["steps"],
                                             seed=cfg["seed"])
    except NumericError as e:
        _fail(EXIT_NUMERIC, e)
    lm = lm_eval(student, corpus, mc, split="test")
    ranks = rank_metrics(next_token_instances(student, corpus, mc, split="test"),
                         ks=(1, 5))
    payload = {"ppl": lm["ppl"], "top1_acc": lm["top1_acc"],
               **{k: v for k, v in ranks.values.items()}}
    if report_path:
        with open(report_path, "w") as fh:
            json.dump({"generated_at": time.time(), **payload}, fh, indent=1)
    click.echo(json.dumps(payload))


@main.command("gradcheck")
@click.option("--skip-memory", is_flag=True, default=False)
def gradcheck_cmd(skip_memory):
    """Run the meta-gradient diagnostic battery."""
    try:
        results = run_battery(include_memory=not skip_memory)
    except (NumericError, DriftError) as e:
        _fail(EXIT_NUMERIC, e)
    ok = True
    for r in results:
        status = "pass" if r.passed else "FAIL"
        click.echo("%-28s %s  %s" % (r.name, status,
                                     json.dumps(r.details, default=str)))
        ok = ok and r.passed
    if not ok:
        sys.exit(EXIT_GRADCHECK)


if __name__ == "__main__":
    main()
