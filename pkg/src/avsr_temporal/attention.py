"""Stacked self/cross-modal attention for the video and audio streamlines.

Audio is refined first (video as key/value), then video is enhanced with the
refined audio as key/value. Each streamline consumes the other modality only
through ``stop_gradient``, so a loss on one side never trains the other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (ConfigurationError, DimensionError, Value, matmul, merge_heads,
                       parameter, softmax_rows, split_heads, stop_gradient, transpose, scale)

ARCHITECTURES = ("sa+ca", "ca-only", "sa-only", "sa+sa")
# output projection index per (streamline, first/second block)
_FC_INDEX = {("video", 0): 1, ("video", 1): 2, ("audio", 0): 3, ("audio", 1): 4}


class PairingError(DimensionError):
    pass


@dataclass
class AttentionParams:
    wq: Value
    wk: Value
    wv: Value
    heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        if self.heads < 1 or d % self.heads:
            raise ConfigurationError(f"width {d} is not divisible by {self.heads} heads")

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, D: int, heads: int, prefix: str) -> "AttentionParams":
        def w(tag):
            return parameter(rng.standard_normal((D, D)) / np.sqrt(D), f"{prefix}.{tag}")

        return cls(w("Wq"), w("Wk"), w("Wv"), heads)

    def named(self, prefix: str) -> dict[str, Value]:
        return {f"{prefix}.Wq": self.wq, f"{prefix}.Wk": self.wk, f"{prefix}.Wv": self.wv}


def attention_weights(q_seq: Value, kv_seq: Value, params: AttentionParams, mask=None) -> Value:
    """Per-head row-stochastic weights, shape (..., heads, T_q, T_k)."""
    d = params.width
    if q_seq.shape[-1] != d or kv_seq.shape[-1] != d:
        raise DimensionError(f"attention width {d} vs inputs {q_seq.shape}, {kv_seq.shape}")
    q = split_heads(matmul(q_seq, params.wq), params.heads)
    k = split_heads(matmul(kv_seq, params.wk), params.heads)
    scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(d // params.heads))
    if mask is not None:
        scores = scores + Value(mask)
    return softmax_rows(scores)


def multi_head_attention(q_seq: Value, kv_seq: Value, params: AttentionParams,
                         mask=None) -> Value:
    """Scaled dot-product attention per head, heads concatenated. ``mask`` is
    an optional additive array broadcast onto the scores."""
    weights = attention_weights(q_seq, kv_seq, params, mask)
    v = split_heads(matmul(kv_seq, params.wv), params.heads)
    return merge_heads(matmul(weights, v))


@dataclass
class StreamlineStack:
    """One streamline's attention blocks and their output projections.

    ``first``/``first_fc`` is the self-attention block (absent for ca-only);
    ``second``/``second_fc`` is the cross-modal block for sa+ca and ca-only,
    a second self-attention for sa+sa, and absent for sa-only.
    """

    modality: str
    architecture: str
    first: AttentionParams | None
    first_fc: Value | None
    second: AttentionParams | None
    second_fc: Value | None

    @classmethod
    def init(cls, rng: np.random.Generator, modality: str, D: int, heads: int,
             architecture: str = "sa+ca", fc_scale: float = 1.0) -> "StreamlineStack":
        if architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown attention architecture {architecture!r}")
        if modality not in ("video", "audio"):
            raise ConfigurationError(f"unknown modality {modality!r}")
        names = _block_names(modality, architecture)

        def fc(block, idx):
            w = rng.standard_normal((D, D)) / np.sqrt(D)
            return parameter(w * (fc_scale if block == 1 else 1.0), f"{names[block]}.Wfc{idx}")

        first = first_fc = second = second_fc = None
        if names[0]:
            first = AttentionParams.init(rng, D, heads, names[0])
            first_fc = fc(0, _FC_INDEX[(modality, 0)])
        if names[1]:
            second = AttentionParams.init(rng, D, heads, names[1])
            second_fc = fc(1, _FC_INDEX[(modality, 1)])
        return cls(modality, architecture, first, first_fc, second, second_fc)

    @property
    def cross_modal(self) -> bool:
        return self.architecture in ("sa+ca", "ca-only")

    def named_parameters(self) -> dict[str, Value]:
        names = _block_names(self.modality, self.architecture)
        out: dict[str, Value] = {}
        if self.first is not None:
            out.update(self.first.named(names[0]))
            out[self.first_fc.name] = self.first_fc
        if self.second is not None:
            out.update(self.second.named(names[1]))
            out[self.second_fc.name] = self.second_fc
        return out


def _block_names(modality: str, architecture: str) -> tuple[str | None, str | None]:
    return {
        "sa+ca": (f"{modality}.sa", f"{modality}.ca"),
        "ca-only": (None, f"{modality}.ca"),
        "sa-only": (f"{modality}.sa", None),
        "sa+sa": (f"{modality}.sa", f"{modality}.sa2"),
    }[architecture]


def sa_block(f: Value, params: AttentionParams, w_fc: Value) -> Value:
    """f' = SA(f) W_fc, with no residual."""
    return matmul(multi_head_attention(f, f, params), w_fc)


def _streamline(f: Value, other: Value, stack: StreamlineStack) -> Value:
    arch = stack.architecture
    if arch == "sa-only":
        return f + sa_block(f, stack.first, stack.first_fc)
    query = f if arch == "ca-only" else sa_block(f, stack.first, stack.first_fc)
    if arch == "sa+sa":
        out = multi_head_attention(query, query, stack.second)
    else:
        out = multi_head_attention(query, stop_gradient(other), stack.second)
    return f + matmul(out, stack.second_fc)


def _check_pair(a: Value, b: Value) -> None:
    if a.shape[-2] != b.shape[-2]:
        raise PairingError(f"modalities disagree on length: {a.shape[-2]} vs {b.shape[-2]}")
    if a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
        raise PairingError(f"modalities disagree on shape: {a.shape} vs {b.shape}")


def v2a_refine(f_a: Value, f_v: Value, stack_a: StreamlineStack) -> Value:
    """f~_a = f_a + CA(SA(f_a) W_fc3; f_v) W_fc4, video detached."""
    _check_pair(f_a, f_v)
    return _streamline(f_a, f_v, stack_a)


def a2v_enhance(f_v: Value, f_a_refined: Value, stack_v: StreamlineStack) -> Value:
    """f~_v = f_v + CA(SA(f_v) W_fc1; f~_a) W_fc2, refined audio detached."""
    _check_pair(f_v, f_a_refined)
    return _streamline(f_v, f_a_refined, stack_v)


@dataclass
class EnhancedPair:
    video: Value
    audio: Value


def stacked_forward(f_v: Value, f_a: Value, stack_v: StreamlineStack,
                    stack_a: StreamlineStack) -> EnhancedPair:
    """Audio refinement runs first; video enhancement consumes its output."""
    f_a_ref = v2a_refine(f_a, f_v, stack_a)
    f_v_enh = a2v_enhance(f_v, f_a_ref, stack_v)
    return EnhancedPair(f_v_enh, f_a_ref)
