"""Combined objective, optimizer step with the freeze schedule, and the
noise-grid evaluation."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ConfigurationError, NumericError, Tape, Value
from .metrics import EvalTable, corpus_wer
from .model import ToyAVSRModel, asr_nll, encode, greedy_decode
from .refinement import clean_reference, loss_ref
from .synth import (CATEGORIES, TRAIN_SNR_DB, Corpus, NoiseCondition, NoisePool, RawSignal,
                    mix_noise_at_snr, noisy_audio)
from .temporal import (Predictors, TemporalConfig, loss_direction, loss_order, loss_order_v2v,
                       loss_speed, loss_temp, task_accuracy)

log = logging.getLogger(__name__)

LOSS_FIELDS = ("l_asr", "l_order", "l_direction", "l_speed", "l_temp", "l_ref", "total")


@dataclass
class TrainConfig:
    lambda_temp: float = 0.05
    lambda_ref: float = 0.1
    steps: int = 1000
    freeze_fraction: float = 0.8
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 16
    seed: int = 0
    use_order: bool = True
    use_direction: bool = True
    use_speed: bool = True
    use_ref: bool = True
    use_temp: bool = True
    v2v_order: bool = False
    modality_dropout: float = 0.0
    train_snr_db: float = TRAIN_SNR_DB
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-3
    pretrain_clean_fraction: float = 0.25

    def __post_init__(self):
        if self.lambda_temp < 0 or self.lambda_ref < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if not 0.0 <= self.freeze_fraction <= 1.0:
            raise ConfigurationError("freeze_fraction must lie in [0, 1]")
        if not 0.0 <= self.modality_dropout <= 1.0:
            raise ConfigurationError("modality_dropout must lie in [0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0 or self.pretrain_steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps and batch size must be non-negative / positive")

    @property
    def temporal_enabled(self) -> bool:
        return self.use_temp and (self.use_order or self.use_direction or self.use_speed
                                  or self.v2v_order)


@dataclass
class LossBreakdown:
    l_asr: float = 0.0
    l_order: float = 0.0
    l_direction: float = 0.0
    l_speed: float = 0.0
    l_temp: float = 0.0
    l_ref: float = 0.0
    total: float = 0.0
    l_order_v2v: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    video: np.ndarray  # B x T x C
    audio: np.ndarray  # B x T x C, noisy
    clean_audio: np.ndarray | None
    scripts: list
    pair_seeds: np.ndarray
    audio_keep: np.ndarray | None = None


class ComponentError(RuntimeError):
    """A loss component failed; ``component`` names which one."""

    def __init__(self, component: str, cause: Exception):
        super().__init__(f"{component}: {cause}")
        self.component = component


class NumericComponentError(ComponentError, NumericError):
    pass


def _component(name, fn, *args):
    try:
        return fn(*args)
    except NumericError as exc:
        raise NumericComponentError(name, exc) from exc
    except Exception as exc:
        raise ComponentError(name, exc) from exc


def total_loss(model: ToyAVSRModel, predictors: Predictors | None, batch: Batch,
               cfg: TrainConfig, tcfg: TemporalConfig, use_stacks: bool = True):
    """Assemble L = L_ASR + lambda_temp * L_temp + lambda_ref * L_ref.

    Disabled components are skipped and report exactly 0. Returns the
    breakdown and the differentiable total.
    """
    f_v, f_a = model.features(batch.video, batch.audio)
    pair = model.enhance(f_v, f_a, use_stacks)
    memory = encode(pair, model, batch.audio_keep)
    l_asr = _component("asr", asr_nll, memory, batch.scripts, model)
    out = LossBreakdown(l_asr=l_asr.item())
    total = l_asr

    if use_stacks and cfg.temporal_enabled and predictors is not None:
        parts: dict[str, Value] = {}
        if cfg.use_order:
            parts["order"] = _component("order", loss_order, pair.video, pair.audio,
                                        predictors.order, tcfg, batch.pair_seeds)
        if cfg.use_direction:
            parts["direction"] = _component("direction", loss_direction, pair.video,
                                            predictors.direction, tcfg)
        if cfg.use_speed:
            parts["speed"] = _component("speed", loss_speed, pair.video, predictors.speed, tcfg)
        if cfg.v2v_order:
            parts["order_v2v"] = _component("order_v2v", loss_order_v2v, pair.video,
                                            predictors.order_v2v, tcfg, batch.pair_seeds + 1)
        if parts:
            l_temp = loss_temp(parts)
            for key, v in parts.items():
                setattr(out, f"l_{key}", v.item())
            out.l_temp = l_temp.item()
            if cfg.lambda_temp:
                total = total + l_temp * cfg.lambda_temp

    if use_stacks and cfg.use_ref and batch.clean_audio is not None:
        ref = clean_reference(batch.clean_audio, model.front_a)
        l_ref = _component("ref", loss_ref, pair.audio, ref)
        out.l_ref = l_ref.item()
        if cfg.lambda_ref:
            total = total + l_ref * cfg.lambda_ref

    out.total = total.item()
    return out, total


# ---------------------------------------------------------------- optimizers


class Optimizer:
    def __init__(self, kind: str = "adam", lr: float = 1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.kind, self.lr, self.betas, self.eps = kind, lr, betas, eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, params: dict[str, Value], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in params.items():
            if p._grad is None:
                continue
            g = p._grad
            if self.kind == "sgd":
                p.data = p.data - lr * g
                continue
            m, v, t = self.state.get(name, (np.zeros_like(g), np.zeros_like(g), 0))
            t += 1
            m = self.betas[0] * m + (1 - self.betas[0]) * g
            v = self.betas[1] * v + (1 - self.betas[1]) * g * g
            self.state[name] = (m, v, t)
            mhat = m / (1 - self.betas[0] ** t)
            vhat = v / (1 - self.betas[1] ** t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


def trainable_parameters(model: ToyAVSRModel, predictors: Predictors | None,
                         frozen_phase: bool) -> dict[str, Value]:
    groups = model.groups()
    names = ("decoder", "stacks") if frozen_phase else ToyAVSRModel.GROUPS
    out: dict[str, Value] = {}
    for g in names:
        out.update(groups[g])
    if predictors is not None:
        out.update(predictors.named_parameters())
    return out


def in_frozen_phase(step: int, cfg: TrainConfig) -> bool:
    return step < cfg.freeze_fraction * cfg.steps


def train_step(batch: Batch, model: ToyAVSRModel, predictors: Predictors | None,
               opt: Optimizer, cfg: TrainConfig, tcfg: TemporalConfig, step: int,
               use_stacks: bool = True, params: dict[str, Value] | None = None) -> LossBreakdown:
    """One forward/backward/update. During the frozen phase only the decoder,
    the attention stacks and the predictors move."""
    everything = {**model.named_parameters(),
                  **(predictors.named_parameters() if predictors else {})}
    for p in everything.values():
        p.zero_grad()
    try:
        with Tape() as tape:
            breakdown, total = total_loss(model, predictors, batch, cfg, tcfg, use_stacks)
    except NumericError as exc:
        exc.args = (f"step {step}: {exc}",)
        raise
    if not np.isfinite(breakdown.total):
        raise NumericError(f"step {step}: non-finite loss {breakdown.as_dict()}")
    tape.backward(total)
    if params is None:
        params = trainable_parameters(model, predictors, in_frozen_phase(step, cfg))
    opt.step(params)
    return breakdown


# ---------------------------------------------------------------- batching


def sample_batch(corpus: Corpus, pool: NoisePool, rng: np.random.Generator, size: int,
                 snr_db: float | None, clean_fraction: float = 0.0,
                 modality_dropout: float = 0.0) -> Batch:
    """Random training batch: every utterance gets noise of a random category
    mixed at ``snr_db`` (or stays clean with probability ``clean_fraction``)."""
    idx = rng.choice(len(corpus), size=size, replace=False)
    audio = np.empty((size,) + corpus.audio.shape[1:])
    for row, i in enumerate(idx):
        clean = corpus.audio[i]
        if snr_db is None or rng.random() < clean_fraction:
            audio[row] = clean
            continue
        cat = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        noise = pool.sample(cat, rng)
        audio[row] = mix_noise_at_snr(RawSignal(clean, "audio"), noise, snr_db).samples
    keep = None
    if modality_dropout > 0:
        keep = (rng.random(size) >= modality_dropout).astype(np.float64)
    seeds = rng.integers(0, 2**31 - 1, size=size)
    return Batch(corpus.video[idx], audio, corpus.audio[idx], [corpus.scripts[i] for i in idx],
                 seeds, keep)


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)


def pretrain(model: ToyAVSRModel, corpus: Corpus, pool: NoisePool, cfg: TrainConfig,
             tcfg: TemporalConfig, callback=None) -> list[LossBreakdown]:
    """ASR-only training of front-ends and backbone with the stacks bypassed;
    stands in for loading a noise-augmented pretrained checkpoint."""
    opt = Optimizer(cfg.optimizer, cfg.pretrain_lr)
    groups = model.groups()
    params = {**groups["frontend"], **groups["encoder"], **groups["decoder"]}
    asr_only = TrainConfig(**{**asdict(cfg), "use_temp": False, "use_ref": False})
    history = []
    for step in range(cfg.pretrain_steps):
        rng = np.random.default_rng([cfg.seed, 7, step])
        batch = sample_batch(corpus, pool, rng, cfg.batch_size, cfg.train_snr_db,
                             cfg.pretrain_clean_fraction, cfg.modality_dropout)
        history.append(train_step(batch, model, None, opt, asr_only, tcfg, step,
                                  use_stacks=False, params=params))
        if callback:
            callback("pretrain", step, history[-1])
    return history


def finetune(model: ToyAVSRModel, predictors: Predictors, corpus: Corpus, pool: NoisePool,
             cfg: TrainConfig, tcfg: TemporalConfig, callback=None) -> list[LossBreakdown]:
    opt = Optimizer(cfg.optimizer, cfg.lr)
    history = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, 11, step])
        batch = sample_batch(corpus, pool, rng, cfg.batch_size, cfg.train_snr_db,
                             0.0, cfg.modality_dropout)
        history.append(train_step(batch, model, predictors, opt, cfg, tcfg, step))
        if callback:
            callback("finetune", step, history[-1])
    return history


# ---------------------------------------------------------------- evaluation


def transcribe(model: ToyAVSRModel, video: np.ndarray, audio: np.ndarray, max_len: int,
               video_only: bool = False, batch_size: int = 64) -> list[list[int]]:
    """Inference graph: front-ends, stacks, encoder, greedy decoder. No
    predictors and no auxiliary losses take part."""
    hyps: list[list[int]] = []
    for s in range(0, len(video), batch_size):
        v, a = video[s:s + batch_size], audio[s:s + batch_size]
        f_v, f_a = model.features(v, a)
        keep = None
        if video_only:
            f_a = Value(np.zeros(f_a.shape))
            keep = np.zeros(len(v))
        pair = model.enhance(f_v, f_a)
        hyps += greedy_decode(encode(pair, model, keep), model, max_len)
    return hyps


def evaluate_condition(model: ToyAVSRModel, corpus: Corpus, pool: NoisePool,
                       condition: NoiseCondition, max_len: int, video_only: bool = False,
                       noise_key: int = 0) -> float:
    idx = np.arange(len(corpus))
    audio = noisy_audio(corpus, idx, condition, pool, noise_key)
    hyps = transcribe(model, corpus.video, audio, max_len, video_only)
    return corpus_wer([list(s.tokens) for s in corpus.scripts], hyps)


def evaluate_grid(model: ToyAVSRModel, corpus: Corpus, pool: NoisePool,
                  conditions: Sequence[NoiseCondition], max_len: int,
                  video_only: bool = False, workers: int = 1, noise_key: int = 0) -> EvalTable:
    """WER per noise condition; the clean condition mixes nothing."""
    for c in conditions:
        if not isinstance(c, NoiseCondition):
            raise ConfigurationError(f"not a noise condition: {c!r}")

    def run(c):
        return evaluate_condition(model, corpus, pool, c, max_len, video_only, noise_key)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, conditions))
    else:
        results = [run(c) for c in conditions]
    table = EvalTable()
    for c, w in zip(conditions, results):
        if c.is_clean:
            table.clean = w
        else:
            table.cells[(c.category, c.snr_db)] = w
    return table


def predictor_accuracies(model: ToyAVSRModel, predictors: Predictors, corpus: Corpus,
                         pool: NoisePool, tcfg: TemporalConfig,
                         condition: NoiseCondition | None = None, seed: int = 0) -> dict:
    """Held-out binary accuracy of each temporal predictor on its task."""
    idx = np.arange(len(corpus))
    audio = corpus.audio if condition is None else noisy_audio(corpus, idx, condition, pool, seed)
    f_v, f_a = model.features(corpus.video, audio)
    pair = model.enhance(f_v, f_a)
    seeds = np.random.default_rng([seed, 3]).integers(0, 2**31 - 1, size=len(corpus))
    return {task: task_accuracy(task, pair.video, pair.audio, getattr(predictors, task), tcfg,
                                seeds)
            for task in ("order", "direction", "speed")}


def train_predictor(task: str, model: ToyAVSRModel, predictors: Predictors, corpus: Corpus,
                    pool: NoisePool, tcfg: TemporalConfig, steps: int, lr: float = 3e-3,
                    batch_size: int = 16, snr_db: float = TRAIN_SNR_DB, seed: int = 0) -> list[float]:
    """Train one temporal predictor (with the front-ends and stacks beneath
    it) on its own loss alone. Returns the loss per step."""
    g = getattr(predictors, task)
    losses = {"order": lambda p, b: loss_order(p.video, p.audio, g, tcfg, b.pair_seeds),
              "direction": lambda p, b: loss_direction(p.video, g, tcfg),
              "speed": lambda p, b: loss_speed(p.video, g, tcfg)}
    if task not in losses:
        raise ConfigurationError(f"unknown temporal task {task!r}")
    groups = model.groups()
    params = {**g.named_parameters(), **groups["stacks"], **groups["frontend"]}
    opt = Optimizer("adam", lr)
    history = []
    for step in range(steps):
        batch = sample_batch(corpus, pool, np.random.default_rng([seed, 5, step]), batch_size,
                             snr_db)
        for p in params.values():
            p.zero_grad()
        with Tape() as tape:
            pair = model.enhance(*model.features(batch.video, batch.audio))
            loss = losses[task](pair, batch)
        tape.backward(loss)
        opt.step(params)
        history.append(loss.item())
    return history


def refinement_mse(model: ToyAVSRModel, corpus: Corpus, pool: NoisePool,
                   condition: NoiseCondition, noise_key: int = 0) -> tuple[float, float]:
    """(mse of refined audio features, mse of raw noisy front-end features),
    both measured against the clean front-end features."""
    audio = noisy_audio(corpus, np.arange(len(corpus)), condition, pool, noise_key)
    f_v, f_a = model.features(corpus.video, audio)
    clean = model.features(corpus.video, corpus.audio)[1].data
    refined = model.enhance(f_v, f_a).audio.data
    return float(np.mean((refined - clean) ** 2)), float(np.mean((f_a.data - clean) ** 2))
