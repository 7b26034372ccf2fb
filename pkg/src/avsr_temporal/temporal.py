"""Video temporal-dynamics losses: cross-modal context order, playback
direction and playback speed, each scored by its own binary predictor."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import (ConfigurationError, DimensionError, Value, bce_with_logits,
                       concat_channels, conv1d_temporal, gather_rows, matmul, mean_all,
                       mean_time, parameter, reshape, stop_gradient, take_rows)

LN2 = float(np.log(2.0))


class NoPairsError(ValueError):
    pass


class NoWindowsError(ValueError):
    pass


@dataclass(frozen=True)
class TemporalConfig:
    t: int = 3
    k: int = 2
    n_order_pairs: int | None = None  # None: 4 * T
    stride: int = 1

    def __post_init__(self):
        if self.t < 2:
            raise ConfigurationError(f"window length t must be >= 2, got {self.t}")
        if self.k < 2:
            raise ConfigurationError(f"speed skip k must be >= 2, got {self.k}")
        if self.stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {self.stride}")
        if self.n_order_pairs is not None and self.n_order_pairs < 1:
            raise ConfigurationError("n_order_pairs must be positive")

    def pairs_for(self, T: int) -> int:
        return self.n_order_pairs if self.n_order_pairs is not None else 4 * T


@dataclass
class TemporalPredictor:
    """1D temporal conv (width 3), mean-pool over time, affine to one logit."""

    kernel: Value  # w x D_in x D_h
    conv_bias: Value  # 1 x D_h
    fc_w: Value  # D_h x 1
    fc_b: Value  # 1 x 1

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_hidden: int, prefix: str,
             width: int = 3) -> "TemporalPredictor":
        if width % 2 == 0:
            raise ConfigurationError(f"conv kernel width must be odd, got {width}")
        return cls(
            parameter(rng.standard_normal((width, d_in, d_hidden)) / np.sqrt(width * d_in),
                      f"{prefix}.conv"),
            parameter(np.zeros((1, d_hidden)), f"{prefix}.conv_b"),
            parameter(rng.standard_normal((d_hidden, 1)) / np.sqrt(d_hidden), f"{prefix}.fc_w"),
            parameter(np.zeros((1, 1)), f"{prefix}.fc_b"),
        )

    @classmethod
    def zeros(cls, d_in: int, d_hidden: int, prefix: str = "pred") -> "TemporalPredictor":
        return cls(parameter(np.zeros((3, d_in, d_hidden)), f"{prefix}.conv"),
                   parameter(np.zeros((1, d_hidden)), f"{prefix}.conv_b"),
                   parameter(np.zeros((d_hidden, 1)), f"{prefix}.fc_w"),
                   parameter(np.zeros((1, 1)), f"{prefix}.fc_b"))

    @property
    def d_in(self) -> int:
        return self.kernel.shape[1]

    def named_parameters(self) -> dict[str, Value]:
        return {v.name: v for v in (self.kernel, self.conv_bias, self.fc_w, self.fc_b)}


def predictor_logit(g: TemporalPredictor, frames: Value) -> Value:
    """frames (..., t, D_in) -> logits (..., 1, 1)."""
    if frames.shape[-1] != g.d_in:
        raise DimensionError(f"predictor expects width {g.d_in}, got {frames.shape[-1]}")
    h = conv1d_temporal(frames, g.kernel) + g.conv_bias
    return matmul(mean_time(h), g.fc_w) + g.fc_b


def sample_order_pairs(T: int, n: int, seed) -> np.ndarray:
    """n distinct (i, j) pairs with i != j, half with i < j (one extra either
    way when n is odd). Returns an (n, 2) integer array."""
    return _order_pairs(int(T), int(n), int(seed)).copy()


@lru_cache(maxsize=65536)
def _order_pairs(T: int, n: int, seed: int) -> np.ndarray:
    if T < 2:
        raise NoPairsError(f"need at least 2 frames for order pairs, got {T}")
    if n < 1:
        raise ConfigurationError("n must be positive")
    rng = np.random.default_rng(seed)
    upper_i, upper_j = np.triu_indices(T, 1)
    m = upper_i.size
    n = min(n, 2 * m)
    n_fwd = n // 2 + (int(rng.integers(2)) if n % 2 else 0)
    n_fwd = min(n_fwd, m)
    n_bwd = min(n - n_fwd, m)
    n_fwd = n - n_bwd
    fwd = rng.choice(m, size=n_fwd, replace=False)
    bwd = rng.choice(m, size=n_bwd, replace=False)
    pairs = np.concatenate([np.stack([upper_i[fwd], upper_j[fwd]], axis=1),
                            np.stack([upper_j[bwd], upper_i[bwd]], axis=1)])
    return pairs[rng.permutation(n)]


def order_logits(f_v: Value, f_a: Value, g: TemporalPredictor, pairs: np.ndarray) -> Value:
    """pairs is (B, n, 2); returns (B, n, 1, 1). The audio side is detached."""
    if f_v.shape != f_a.shape:
        raise DimensionError(f"order loss needs paired shapes: {f_v.shape} vs {f_a.shape}")
    v = gather_rows(f_v, pairs[..., 0])
    a = gather_rows(stop_gradient(f_a), pairs[..., 1])
    b, n, d2 = v.shape[0], v.shape[1], 2 * v.shape[2]
    return predictor_logit(g, reshape(concat_channels([v, a]), (b, n, 1, d2)))


def loss_order(f_v: Value, f_a: Value, g: TemporalPredictor, cfg: TemporalConfig,
               seeds) -> Value:
    """Mean BCE over sampled (video frame i, audio frame j) pairs, y = [i < j].

    ``seeds`` holds one pair-sampling seed per sequence in the batch.
    """
    B, T = f_v.shape[0], f_v.shape[-2]
    if T < 2:
        raise NoPairsError(f"need at least 2 frames for order pairs, got {T}")
    pairs = np.stack([sample_order_pairs(T, cfg.pairs_for(T), s) for s in seeds[:B]])
    labels = (pairs[..., 0] < pairs[..., 1]).astype(np.float64)[..., None, None]
    return mean_all(bce_with_logits(order_logits(f_v, f_a, g, pairs), labels))


def loss_order_v2v(f_v: Value, g: TemporalPredictor, cfg: TemporalConfig, seeds) -> Value:
    """Video-to-video variant of the order loss (ablation only)."""
    B, T = f_v.shape[0], f_v.shape[-2]
    pairs = np.stack([sample_order_pairs(T, cfg.pairs_for(T), s) for s in seeds[:B]])
    labels = (pairs[..., 0] < pairs[..., 1]).astype(np.float64)[..., None, None]
    v_i = gather_rows(f_v, pairs[..., 0])
    v_j = gather_rows(f_v, pairs[..., 1])
    n, d2 = v_i.shape[1], 2 * v_i.shape[2]
    logits = predictor_logit(g, reshape(concat_channels([v_i, v_j]), (B, n, 1, d2)))
    return mean_all(bce_with_logits(logits, labels))


def direction_windows(T: int, cfg: TemporalConfig) -> tuple[np.ndarray, np.ndarray]:
    if T < cfg.t:
        raise NoWindowsError(f"sequence of {T} frames has no window of length {cfg.t}")
    starts = np.arange(0, T - cfg.t + 1, cfg.stride)
    fwd = starts[:, None] + np.arange(cfg.t)[None, :]
    return fwd, fwd[:, ::-1].copy()


def speed_windows(T: int, cfg: TemporalConfig) -> tuple[np.ndarray, np.ndarray]:
    span = (cfg.t - 1) * cfg.k
    if T < span + 1:
        raise NoWindowsError(f"sequence of {T} frames has no speed-{cfg.k} window of length {cfg.t}")
    starts = np.arange(0, T - span, cfg.stride)
    regular = starts[:, None] + np.arange(cfg.t)[None, :]
    skipped = starts[:, None] + cfg.k * np.arange(cfg.t)[None, :]
    return regular, skipped


def _paired_window_loss(f_v: Value, g: TemporalPredictor, pos: np.ndarray,
                        neg: np.ndarray) -> Value:
    """Per window BCE(g(pos), 1) + BCE(g(neg), 0), averaged over windows."""
    idx = np.concatenate([pos, neg])  # (2W, t)
    logits = predictor_logit(g, take_rows(f_v, idx))  # (..., 2W, 1, 1)
    w = pos.shape[0]
    labels = np.concatenate([np.ones(w), np.zeros(w)])[:, None, None]
    return mean_all(bce_with_logits(logits, labels)) * 2.0


def loss_direction(f_v: Value, g: TemporalPredictor, cfg: TemporalConfig) -> Value:
    fwd, rev = direction_windows(f_v.shape[-2], cfg)
    return _paired_window_loss(f_v, g, fwd, rev)


def loss_speed(f_v: Value, g: TemporalPredictor, cfg: TemporalConfig) -> Value:
    regular, skipped = speed_windows(f_v.shape[-2], cfg)
    return _paired_window_loss(f_v, g, regular, skipped)


def loss_temp(components: dict[str, Value]) -> Value:
    """Unweighted sum of the enabled components."""
    if not components:
        raise ValueError("no temporal loss components enabled")
    parts = list(components.values())
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


@dataclass
class Predictors:
    """Independent predictor per task; never shared, never used at inference."""

    order: TemporalPredictor
    direction: TemporalPredictor
    speed: TemporalPredictor
    order_v2v: TemporalPredictor | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, D: int, hidden: int,
             with_v2v: bool = False) -> "Predictors":
        return cls(
            TemporalPredictor.init(rng, 2 * D, hidden, "pred.order"),
            TemporalPredictor.init(rng, D, hidden, "pred.direction"),
            TemporalPredictor.init(rng, D, hidden, "pred.speed"),
            TemporalPredictor.init(rng, 2 * D, hidden, "pred.order_v2v") if with_v2v else None,
        )

    def named_parameters(self) -> dict[str, Value]:
        out: dict[str, Value] = {}
        for g in (self.order, self.direction, self.speed, self.order_v2v):
            if g is not None:
                out.update(g.named_parameters())
        return out


def binary_accuracy(logits: Value, labels: np.ndarray) -> float:
    pred = logits.data.reshape(-1) > 0
    return float(np.mean(pred == (np.asarray(labels).reshape(-1) > 0.5)))


def task_accuracy(task: str, f_v: Value, f_a: Value, g: TemporalPredictor,
                  cfg: TemporalConfig, seeds) -> float:
    """Held-out binary accuracy of one predictor on its own task."""
    T = f_v.shape[-2]
    if task == "order":
        pairs = np.stack([sample_order_pairs(T, cfg.pairs_for(T), s) for s in seeds[:f_v.shape[0]]])
        labels = pairs[..., 0] < pairs[..., 1]
        return binary_accuracy(order_logits(f_v, f_a, g, pairs), labels)
    pos, neg = direction_windows(T, cfg) if task == "direction" else speed_windows(T, cfg)
    logits = predictor_logit(g, take_rows(f_v, np.concatenate([pos, neg])))
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    labels = np.broadcast_to(labels[:, None, None], logits.shape)
    return binary_accuracy(logits, labels)
