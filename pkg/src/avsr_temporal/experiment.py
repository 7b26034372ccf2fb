"""Run orchestration shared by the command line and the acceptance suite."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, dump_config
from .metrics import EvalTable, aggregate, records, write_records, format_table
from .model import ToyAVSRModel
from .synth import Corpus, NoiseCondition, NoisePool, build_corpus, default_grid
from .temporal import Predictors
from .training import (LossBreakdown, evaluate_grid, finetune, predictor_accuracies, pretrain,
                       refinement_mse)

log = logging.getLogger(__name__)

HELD_OUT_CONDITION = NoiseCondition("babble", 0)


@dataclass
class Data:
    corpus: Corpus
    pool: NoisePool


def load_data(cfg: RunConfig, split: str) -> Data:
    d = cfg.data
    n = {"train": d.n_train, "valid": d.n_valid, "test": d.n_test}[split]
    return Data(build_corpus(split, n, d.T, d.V, d.C),
                NoisePool(split, d.noise_pool, d.T, d.V, d.C, d.babble_m))


def build_model(cfg: RunConfig, seed: int | None = None) -> tuple[ToyAVSRModel, Predictors]:
    seed = cfg.train.seed if seed is None else seed
    model = ToyAVSRModel(cfg.model_config(), seed)
    preds = Predictors.init(np.random.default_rng([seed, 2]), cfg.model.D,
                            cfg.model.predictor_hidden, cfg.ablation.v2v_order)
    return model, preds


def all_parameters(model: ToyAVSRModel, preds: Predictors | None) -> dict:
    return {**model.named_parameters(), **(preds.named_parameters() if preds else {})}


def train(cfg: RunConfig, train_data: Data, model: ToyAVSRModel | None = None,
          preds: Predictors | None = None, log_fh=None, skip_pretrain: bool = False):
    """Pretrain (stacks bypassed) then fine-tune with the freeze schedule.

    Pass an already pretrained ``model`` with ``skip_pretrain`` to share one
    pretraining run between several fine-tuning configurations.
    """
    if model is None:
        model, preds = build_model(cfg)
    tcfg, trcfg = cfg.temporal, cfg.train_config()
    start = time.perf_counter()
    every = max(1, cfg.train.log_every)

    def callback(phase: str, step: int, b: LossBreakdown):
        if log_fh is not None and (step % every == 0):
            rec = {"phase": phase, "step": step, **b.as_dict(),
                   "wall_time": round(time.perf_counter() - start, 3)}
            log_fh.write(json.dumps(rec) + "\n")

    history: list[LossBreakdown] = []
    if not skip_pretrain:
        history += pretrain(model, train_data.corpus, train_data.pool, trcfg, tcfg, callback)
    history += finetune(model, preds, train_data.corpus, train_data.pool, trcfg, tcfg, callback)
    return model, preds, history


def summarize(cfg: RunConfig, model: ToyAVSRModel, preds: Predictors, valid: Data,
              history: list[LossBreakdown]) -> dict:
    acc = predictor_accuracies(model, preds, valid.corpus, valid.pool, cfg.temporal,
                               HELD_OUT_CONDITION)
    refined, noisy = refinement_mse(model, valid.corpus, valid.pool, HELD_OUT_CONDITION)
    return {
        "final": history[-1].as_dict() if history else None,
        "predictor_accuracy": acc,
        "refinement_mse": {"refined": refined, "noisy": noisy, "ratio": refined / noisy},
        "parameters": {g: model.parameter_count(g) for g in ToyAVSRModel.GROUPS}
        | {"total": model.parameter_count(), "stack_fraction": model.stack_fraction()},
        "seed": cfg.train.seed,
    }


def run_train(cfg: RunConfig, out_dir: Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.ini").write_text(dump_config(cfg), encoding="utf-8")
    train_data = load_data(cfg, "train")
    with open(out_dir / "train_log.jsonl", "w", encoding="utf-8") as fh:
        model, preds, history = train(cfg, train_data, log_fh=fh)
    checkpoint.save(out_dir / "checkpoint.bin", all_parameters(model, preds))
    summary = summarize(cfg, model, preds, load_data(cfg, "valid"), history)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


def load_trained(cfg: RunConfig, path: Path) -> tuple[ToyAVSRModel, Predictors]:
    model, preds = build_model(cfg)
    arrays = checkpoint.load(path)
    checkpoint.assign(model.named_parameters(), arrays, ignore_prefixes=("pred.",))
    checkpoint.assign(preds.named_parameters(),
                      {n: a for n, a in arrays.items() if n.startswith("pred.")})
    return model, preds


def evaluate(cfg: RunConfig, model: ToyAVSRModel, test: Data, video_only: bool = False,
             workers: int | None = None) -> EvalTable:
    return evaluate_grid(model, test.corpus, test.pool, default_grid(include_clean=True),
                         cfg.eval.max_len, video_only,
                         workers if workers is not None else cfg.eval.workers,
                         cfg.eval.noise_key)


def run_eval(cfg: RunConfig, ckpt: Path, out_dir: Path, video_only: bool = False,
             workers: int | None = None) -> EvalTable:
    model, _ = load_trained(cfg, ckpt)
    table = evaluate(cfg, model, load_data(cfg, "test"), video_only, workers)
    report = aggregate(table)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"label": cfg.label, "mode": "vsr" if video_only else "avsr",
            "architecture": cfg.model.architecture}
    write_records(out_dir / "cells.jsonl", records(table, report, meta))
    (out_dir / "table.tsv").write_text(format_table(table, report, cfg.label), encoding="utf-8")
    return table
