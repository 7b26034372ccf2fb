"""Desk-scale audio-visual recognizer wrapped around the attention stacks.

Front-ends -> stacked SA/CA streamlines -> fusion (concat + affine) ->
transformer encoder -> teacher-forced transformer decoder over the token
script. The encoder and decoder are a small stand-in for a pretrained
backbone; they carry sinusoidal positions and pre-LN residual blocks.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import (ARCHITECTURES, AttentionParams, EnhancedPair, StreamlineStack, multi_head_attention,
                        stacked_forward)
from .autodiff import (ConfigurationError, DomainError, Value, concat_channels, layer_norm,
                       log_softmax_rows, matmul, mul, parameter, relu, scale, select_entries,
                       sum_all, take_rows)
from .synth import FrontEndParams, LatentScript, front_end

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    C: int = 24
    D: int = 32
    V: int = 16
    heads: int = 4
    d_model: int = 128
    backbone_heads: int = 4
    n_enc: int = 2
    n_dec: int = 1
    max_positions: int = 64
    architecture: str = "sa+ca"
    residual_init: float = 0.1  # scale of the cross-block output projection at init

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}; "
                                     f"expected one of {ARCHITECTURES}")
        if self.n_enc < 1 or self.n_dec < 1:
            raise ConfigurationError("encoder and decoder need at least one block each")
        if self.D % self.heads:
            raise ConfigurationError(f"D={self.D} not divisible by {self.heads} heads")
        if self.d_model % self.backbone_heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by "
                                     f"{self.backbone_heads} heads")

    @property
    def vocab(self) -> int:
        return self.V + 2

    @property
    def bos(self) -> int:
        return self.V

    @property
    def eos(self) -> int:
        return self.V + 1


def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class _Block:
    """Pre-LN transformer block: self-attention, optional cross-attention, FFN."""

    prefix: str
    params: dict[str, Value]
    attn: AttentionParams
    cross: AttentionParams | None

    @classmethod
    def init(cls, rng, prefix: str, M: int, heads: int, cross: bool) -> "_Block":
        p: dict[str, Value] = {}

        def w(name, shape, fan_in):
            p[f"{prefix}.{name}"] = parameter(rng.standard_normal(shape) / np.sqrt(fan_in),
                                              f"{prefix}.{name}")

        def ln(name):
            p[f"{prefix}.{name}.g"] = parameter(np.ones((1, M)), f"{prefix}.{name}.g")
            p[f"{prefix}.{name}.b"] = parameter(np.zeros((1, M)), f"{prefix}.{name}.b")

        ln("ln1")
        attn = AttentionParams.init(rng, M, heads, f"{prefix}.attn")
        p.update(attn.named(f"{prefix}.attn"))
        w("attn.Wo", (M, M), M)
        xattn = None
        if cross:
            ln("ln_x")
            xattn = AttentionParams.init(rng, M, heads, f"{prefix}.xattn")
            p.update(xattn.named(f"{prefix}.xattn"))
            w("xattn.Wo", (M, M), M)
        ln("ln2")
        w("ffn.W1", (M, 2 * M), M)
        p[f"{prefix}.ffn.b1"] = parameter(np.zeros((1, 2 * M)), f"{prefix}.ffn.b1")
        w("ffn.W2", (2 * M, M), 2 * M)
        p[f"{prefix}.ffn.b2"] = parameter(np.zeros((1, M)), f"{prefix}.ffn.b2")
        return cls(prefix, p, attn, xattn)

    def __call__(self, x: Value, memory: Value | None = None, mask=None) -> Value:
        p, pre = self.params, self.prefix
        h = layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        x = x + matmul(multi_head_attention(h, h, self.attn, mask), p[f"{pre}.attn.Wo"])
        if self.cross is not None:
            h = layer_norm(x, p[f"{pre}.ln_x.g"], p[f"{pre}.ln_x.b"])
            x = x + matmul(multi_head_attention(h, memory, self.cross), p[f"{pre}.xattn.Wo"])
        h = layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        h = relu(matmul(h, p[f"{pre}.ffn.W1"]) + p[f"{pre}.ffn.b1"])
        return x + matmul(h, p[f"{pre}.ffn.W2"]) + p[f"{pre}.ffn.b2"]


class ToyAVSRModel:
    """All inference-time parameters, grouped for the freeze schedule."""

    GROUPS = ("frontend", "stacks", "encoder", "decoder")

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 1])
        C, D, M = cfg.C, cfg.D, cfg.d_model
        self.front_v = FrontEndParams.init(rng, C, D, "front.video")
        self.front_a = FrontEndParams.init(rng, C, D, "front.audio")
        self.stack_v = StreamlineStack.init(rng, "video", D, cfg.heads, cfg.architecture,
                                            cfg.residual_init)
        self.stack_a = StreamlineStack.init(rng, "audio", D, cfg.heads, cfg.architecture,
                                            cfg.residual_init)
        self.fuse_w = parameter(rng.standard_normal((2 * D, M)) / np.sqrt(2 * D), "fusion.W")
        self.fuse_b = parameter(np.zeros((1, M)), "fusion.b")
        self.enc_blocks = [_Block.init(rng, f"encoder.{i}", M, cfg.backbone_heads, cross=False)
                           for i in range(cfg.n_enc)]
        self.enc_ln = (parameter(np.ones((1, M)), "encoder.ln_f.g"),
                       parameter(np.zeros((1, M)), "encoder.ln_f.b"))
        self.embed = parameter(rng.standard_normal((cfg.vocab, M)) * 0.1, "decoder.embed")
        self.dec_blocks = [_Block.init(rng, f"decoder.{i}", M, cfg.backbone_heads, cross=True)
                           for i in range(cfg.n_dec)]
        self.dec_ln = (parameter(np.ones((1, M)), "decoder.ln_f.g"),
                       parameter(np.zeros((1, M)), "decoder.ln_f.b"))
        self.out_w = parameter(rng.standard_normal((M, cfg.vocab)) / np.sqrt(M), "decoder.out.W")
        self.out_b = parameter(np.zeros((1, cfg.vocab)), "decoder.out.b")
        self.positions = sinusoid_table(cfg.max_positions, M)

    # ------------------------------------------------------------ parameters

    def groups(self) -> dict[str, dict[str, Value]]:
        front = {v.name: v for v in (self.front_v.weight, self.front_v.bias,
                                     self.front_a.weight, self.front_a.bias)}
        stacks = {**self.stack_v.named_parameters(), **self.stack_a.named_parameters()}
        enc = {"fusion.W": self.fuse_w, "fusion.b": self.fuse_b}
        for b in self.enc_blocks:
            enc.update(b.params)
        enc.update({v.name: v for v in self.enc_ln})
        dec = {"decoder.embed": self.embed}
        for b in self.dec_blocks:
            dec.update(b.params)
        dec.update({v.name: v for v in self.dec_ln})
        dec.update({"decoder.out.W": self.out_w, "decoder.out.b": self.out_b})
        return {"frontend": front, "stacks": stacks, "encoder": enc, "decoder": dec}

    def named_parameters(self) -> dict[str, Value]:
        out: dict[str, Value] = {}
        for g in self.groups().values():
            out.update(g)
        return out

    def parameter_count(self, group: str | None = None) -> int:
        params = self.groups()[group] if group else self.named_parameters()
        return int(sum(v.data.size for v in params.values()))

    def stack_fraction(self) -> float:
        return self.parameter_count("stacks") / self.parameter_count()

    # ------------------------------------------------------------ forward

    def features(self, video, audio) -> tuple[Value, Value]:
        return front_end(video, self.front_v), front_end(audio, self.front_a)

    def enhance(self, f_v: Value, f_a: Value, use_stacks: bool = True) -> EnhancedPair:
        if not use_stacks:
            return EnhancedPair(f_v, f_a)
        return stacked_forward(f_v, f_a, self.stack_v, self.stack_a)

    def decoder_logits(self, memory: Value, tokens_in: np.ndarray) -> Value:
        L = tokens_in.shape[-1]
        x = take_rows(self.embed, tokens_in) + Value(self.positions[:L])
        causal = np.triu(np.full((L, L), NEG_INF), 1)
        for block in self.dec_blocks:
            x = block(x, memory, causal)
        x = layer_norm(x, *self.dec_ln)
        return matmul(x, self.out_w) + self.out_b


def encode(pair: EnhancedPair, model: ToyAVSRModel, audio_keep=None) -> Value:
    """Fuse the enhanced streams and run the encoder. ``audio_keep`` is an
    optional per-utterance 0/1 array that zeroes the audio stream before
    fusion (modality dropout / video-only inference)."""
    audio = pair.audio
    if audio_keep is not None:
        keep = np.asarray(audio_keep, dtype=np.float64).reshape(-1, 1, 1)
        audio = mul(audio, Value(keep))
    x = matmul(concat_channels([pair.video, audio]), model.fuse_w) + model.fuse_b
    x = x + Value(model.positions[:x.shape[-2]])
    for block in model.enc_blocks:
        x = block(x)
    return layer_norm(x, *model.enc_ln)


def script_arrays(scripts: list[LatentScript], cfg: ModelConfig):
    """Teacher-forcing inputs, targets and position weights for a batch."""
    for s in scripts:
        if any(t < 0 or t >= cfg.V for t in s.tokens):
            raise DomainError(f"token outside vocabulary of size {cfg.V}")
    L = max(len(s.tokens) for s in scripts) + 1
    tokens_in = np.full((len(scripts), L), cfg.eos, dtype=np.int64)
    targets = np.full((len(scripts), L), cfg.eos, dtype=np.int64)
    weights = np.zeros((len(scripts), L))
    for b, s in enumerate(scripts):
        n = len(s.tokens)
        tokens_in[b, 0] = cfg.bos
        tokens_in[b, 1:n + 1] = s.tokens
        targets[b, :n] = s.tokens
        weights[b, :n + 1] = 1.0
    return tokens_in, targets, weights


def nll_from_logits(logits: Value, targets: np.ndarray, weights: np.ndarray) -> Value:
    """Mean negative log-likelihood of the gold tokens over weighted positions."""
    logp = select_entries(log_softmax_rows(logits), targets)
    total = sum_all(mul(logp, Value(weights[..., None])))
    return scale(total, -1.0 / weights.sum())


def asr_nll(memory: Value, scripts: list[LatentScript], model: ToyAVSRModel) -> Value:
    tokens_in, targets, weights = script_arrays(scripts, model.cfg)
    return nll_from_logits(model.decoder_logits(memory, tokens_in), targets, weights)


def greedy_decode(memory: Value, model: ToyAVSRModel, max_len: int) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or ``max_len`` tokens."""
    cfg = model.cfg
    B = memory.shape[0]
    seqs = np.full((B, 1), cfg.bos, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    hyps: list[list[int]] = [[] for _ in range(B)]
    for _ in range(max_len):
        logits = model.decoder_logits(memory, seqs).data[:, -1, :]
        nxt = logits.argmax(axis=-1)
        for b in range(B):
            if done[b]:
                continue
            if nxt[b] == cfg.eos:
                done[b] = True
            elif nxt[b] != cfg.bos:
                hyps[b].append(int(nxt[b]))
        if done.all():
            break
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return hyps


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)

