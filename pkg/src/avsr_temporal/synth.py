"""Synthetic paired video/audio corpus, noise synthesis and SNR mixing.

Each utterance is a random token script with per-token durations. Both
modalities render the script through a fixed per-modality codebook, so a
model can recover the tokens from either stream. Video is smoothed over
time and audio is not. Two extra channels carry a slow per-utterance clock
ramp that both modalities of a pair share. It is the stand-in for the
temporal context that makes order, direction and speed observable.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ConfigurationError, DimensionError, Value, matmul, parameter

CATEGORIES = ("babble", "speech", "music", "natural")
SNR_GRID = (-10, -5, 0, 5, 10)
TRAIN_SNR_DB = 0

CODEBOOK_SEED = 20240
CLOCK_CHANNELS = 2
CLOCK_SPAN = 3.0
JITTER = 0.05
DURATIONS = (2, 3, 4)

SPLITS = ("train", "valid", "test")
_SPLIT_STRIDE = 10_000_000


class DegenerateSignalError(ValueError):
    pass


class PairingError(ValueError):
    pass


def utterance_seed(split: str, index: int) -> int:
    return _SPLIT_STRIDE * (2 * SPLITS.index(split)) + index


def noise_seed(split: str, index: int) -> int:
    """Noise seeds live in their own block per split, so train and test noise
    pools never share a clip."""
    return _SPLIT_STRIDE * (2 * SPLITS.index(split) + 1) + index


@dataclass(frozen=True)
class LatentScript:
    tokens: tuple[int, ...]
    durations: tuple[int, ...]

    @property
    def n_frames(self) -> int:
        return sum(self.durations)

    def frame_tokens(self) -> np.ndarray:
        return np.repeat(np.array(self.tokens, dtype=np.int64), self.durations)


@dataclass
class RawSignal:
    samples: np.ndarray
    modality: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.modality not in ("video", "audio"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.samples.ndim != 2:
            raise DimensionError(f"raw signal must be T x C, got {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise DegenerateSignalError("raw signal has non-finite samples")

    @property
    def T(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class NoiseCondition:
    category: str
    snr_db: int | None  # None means clean

    def __post_init__(self):
        if self.snr_db is None:
            if self.category != "clean":
                raise ConfigurationError("only the 'clean' condition may omit an SNR")
            return
        if self.category not in CATEGORIES:
            raise ConfigurationError(f"unknown noise category {self.category!r}")
        if self.snr_db not in SNR_GRID:
            raise ConfigurationError(f"SNR {self.snr_db} dB is not on the grid {SNR_GRID}")

    @property
    def is_clean(self) -> bool:
        return self.snr_db is None

    @property
    def label(self) -> str:
        return "clean" if self.is_clean else f"{self.category}@{self.snr_db}"


CLEAN = NoiseCondition("clean", None)


def default_grid(include_clean: bool = True) -> list[NoiseCondition]:
    grid = [NoiseCondition(c, s) for c in CATEGORIES for s in SNR_GRID]
    return grid + [CLEAN] if include_clean else grid


@lru_cache(maxsize=16)
def codebooks(V: int, C: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed (video, audio) token codebooks, V x (C - clock channels)."""
    rng = np.random.default_rng([CODEBOOK_SEED, V, C])
    width = C - CLOCK_CHANNELS
    return rng.standard_normal((V, width)), rng.standard_normal((V, width))


def sample_script(rng: np.random.Generator, T: int, V: int) -> LatentScript:
    tokens, durations = [], []
    total = 0
    while total < T:
        d = int(rng.choice(DURATIONS))
        tok = int(rng.integers(V)) if not tokens else int((tokens[-1] + rng.integers(1, V)) % V)
        tokens.append(tok)
        durations.append(min(d, T - total))
        total += durations[-1]
    return LatentScript(tuple(tokens), tuple(durations))


def _moving_average3(x: np.ndarray) -> np.ndarray:
    xp = np.concatenate([x[:1], x, x[-1:]], axis=0)
    return (xp[:-2] + xp[1:-1] + xp[2:]) / 3.0


def synth_pair(seed: int, T: int, V: int, C: int = 24) -> tuple[RawSignal, RawSignal, LatentScript]:
    """Render one paired utterance. Pure function of its arguments."""
    if T < 4:
        raise ConfigurationError(f"T must be >= 4 so temporal windows fit, got {T}")
    if V < 2:
        raise ConfigurationError(f"vocabulary must have at least 2 tokens, got {V}")
    if C <= CLOCK_CHANNELS:
        raise ConfigurationError(f"need more than {CLOCK_CHANNELS} raw channels, got {C}")
    rng = np.random.default_rng(seed)
    script = sample_script(rng, T, V)
    frames = script.frame_tokens()
    cb_v, cb_a = codebooks(V, C)
    offset = rng.uniform(-0.5, 0.5)
    clock = CLOCK_SPAN * (np.arange(T) / (T - 1) - 0.5) + offset
    clock = np.repeat(clock[:, None], CLOCK_CHANNELS, axis=1)

    video = _moving_average3(np.concatenate([cb_v[frames], clock], axis=1))
    video = video + JITTER * rng.standard_normal(video.shape)
    audio = np.concatenate([cb_a[frames], clock], axis=1)
    audio = audio + JITTER * rng.standard_normal(audio.shape)
    return RawSignal(video, "video"), RawSignal(audio, "audio"), script


# ---------------------------------------------------------------- noise


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def fit_length(x: np.ndarray, T: int) -> np.ndarray:
    """Tile or crop along time to exactly T frames."""
    if x.shape[0] >= T:
        return x[:T]
    reps = -(-T // x.shape[0])
    return np.tile(x, (reps, 1))[:T]


def mix_noise_at_snr(clean: RawSignal, noise: RawSignal, snr_db: float) -> RawSignal:
    """clean + alpha * noise with alpha chosen so the mixture has exactly
    ``snr_db`` dB SNR (powers are mean squares over all samples)."""
    n = fit_length(noise.samples, clean.T)
    if n.shape[1] != clean.samples.shape[1]:
        raise DimensionError(f"noise width {n.shape[1]} != clean width {clean.samples.shape[1]}")
    p_clean, p_noise = power(clean.samples), power(n)
    if p_clean <= 0.0 or p_noise <= 0.0:
        raise DegenerateSignalError("cannot mix at an SNR with a zero-power signal")
    alpha = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return RawSignal(clean.samples + alpha * n, clean.modality)


def measured_snr_db(clean: np.ndarray, mixture: np.ndarray) -> float:
    return 10.0 * np.log10(power(clean) / power(mixture - clean))


def synth_babble(clips: Sequence[RawSignal], m: int, rng: np.random.Generator) -> RawSignal:
    """Element-wise mean of m distinct randomly chosen clips."""
    if m < 2:
        raise ConfigurationError(f"babble needs m >= 2 clips, got {m}")
    if len(clips) < m:
        raise ConfigurationError(f"babble needs {m} clips, pool has {len(clips)}")
    pick = rng.choice(len(clips), size=m, replace=False)
    T = clips[int(pick[0])].T
    stack = np.stack([fit_length(clips[int(i)].samples, T) for i in pick])
    return RawSignal(stack.mean(axis=0), "audio")


def music_noise(rng: np.random.Generator, T: int, C: int) -> np.ndarray:
    t = np.arange(T)[:, None]
    out = np.zeros((T, C))
    for _ in range(3):
        freq = rng.uniform(0.05, 0.45)
        phase = rng.uniform(0.0, 2 * np.pi, size=C)
        amp = rng.standard_normal(C)
        out += amp * np.sin(2 * np.pi * freq * t + phase)
    return out


def natural_noise(rng: np.random.Generator, T: int, C: int) -> np.ndarray:
    """White noise shaped to a 1/f power spectrum along time."""
    white = rng.standard_normal((T, C))
    spec = np.fft.rfft(white, axis=0)
    f = np.fft.rfftfreq(T)
    f[0] = f[1] if T > 1 else 1.0
    return np.fft.irfft(spec / np.sqrt(f)[:, None], n=T, axis=0)


class NoisePool:
    """Competing-speaker clips for one split, drawn from its noise seeds."""

    def __init__(self, split: str, size: int, T: int, V: int, C: int, babble_m: int = 30):
        self.split, self.T, self.C = split, T, C
        self.clips = [synth_pair(noise_seed(split, i), T, V, C)[1] for i in range(size)]
        self.babble_m = babble_m if size >= babble_m else min(8, size)

    def sample(self, category: str, rng: np.random.Generator) -> RawSignal:
        if category == "babble":
            return synth_babble(self.clips, self.babble_m, rng)
        if category == "speech":
            return self.clips[int(rng.integers(len(self.clips)))]
        if category == "music":
            return RawSignal(music_noise(rng, self.T, self.C), "audio")
        if category == "natural":
            return RawSignal(natural_noise(rng, self.T, self.C), "audio")
        raise ConfigurationError(f"unknown noise category {category!r}")


@dataclass
class Corpus:
    """Pre-rendered utterances of one split, stacked for batching."""

    split: str
    seeds: np.ndarray
    video: np.ndarray  # N x T x C
    audio: np.ndarray  # N x T x C, clean
    scripts: list[LatentScript]

    def __len__(self) -> int:
        return len(self.scripts)


def build_corpus(split: str, n: int, T: int, V: int, C: int, start: int = 0) -> Corpus:
    seeds = np.array([utterance_seed(split, start + i) for i in range(n)], dtype=np.int64)
    vids, auds, scripts = [], [], []
    for s in seeds:
        v, a, sc = synth_pair(int(s), T, V, C)
        vids.append(v.samples)
        auds.append(a.samples)
        scripts.append(sc)
    return Corpus(split, seeds, np.stack(vids), np.stack(auds), scripts)


def noisy_audio(corpus: Corpus, idx: Sequence[int], condition: NoiseCondition,
                pool: NoisePool, rng_key: int) -> np.ndarray:
    """Mix noise into the clean audio of the selected utterances.

    Each utterance draws its noise from a generator keyed on (rng_key,
    utterance seed, category), so a condition re-evaluated later sees the same
    noise and SNR levels of one category share the noise clip.
    """
    out = np.empty((len(idx),) + corpus.audio.shape[1:])
    for row, i in enumerate(idx):
        clean = corpus.audio[i]
        if condition.is_clean:
            out[row] = clean
            continue
        key = [rng_key, int(corpus.seeds[i]), CATEGORIES.index(condition.category)]
        noise = pool.sample(condition.category, np.random.default_rng(key))
        out[row] = mix_noise_at_snr(RawSignal(clean, "audio"), noise, condition.snr_db).samples
    return out


# ---------------------------------------------------------------- front-end


@dataclass
class FrontEndParams:
    weight: Value  # C x D
    bias: Value  # 1 x D

    @classmethod
    def init(cls, rng: np.random.Generator, C: int, D: int, prefix: str) -> "FrontEndParams":
        return cls(parameter(rng.standard_normal((C, D)) / np.sqrt(C), f"{prefix}.W"),
                   parameter(np.zeros((1, D)), f"{prefix}.b"))


def front_end(signal, params: FrontEndParams) -> Value:
    """Per-frame affine projection C -> D."""
    x = signal.samples if isinstance(signal, RawSignal) else signal
    x = x if isinstance(x, Value) else Value(x)
    if x.shape[-1] != params.weight.shape[0]:
        raise DimensionError(f"signal has {x.shape[-1]} channels, front-end expects "
                             f"{params.weight.shape[0]}")
    return matmul(x, params.weight) + params.bias


# ---------------------------------------------------------------- dataset files

_MAGIC = b"AVSF"
_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def dump_matrices(path: Path, matrices: Sequence[np.ndarray]) -> None:
    """Write same-shape T x D matrices after a 16-byte header."""
    if not matrices:
        raise ValueError("nothing to write")
    T, D = matrices[0].shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, T, D))
        for m in matrices:
            if m.shape != (T, D):
                raise DimensionError(f"matrix shape {m.shape} != {(T, D)}")
            fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def load_matrices(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, version, T, D = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a dataset file (magic={magic!r}, version={version})")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size % (T * D):
        raise ValueError(f"{path}: truncated payload")
    return body.reshape(-1, T, D).astype(np.float64)


def dump_split(directory: Path, split: str, corpus: Corpus, conditions: Sequence[NoiseCondition],
               pool: NoisePool, rng_key: int = 0) -> None:
    """One binary file per split (video, clean audio, noisy audio per line of
    the manifest) plus a UTF-8 manifest of (seed, category, snr_db)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mats, lines = [], []
    for i in range(len(corpus)):
        cond = conditions[i % len(conditions)]
        noisy = noisy_audio(corpus, [i], cond, pool, rng_key)[0]
        mats += [corpus.video[i], corpus.audio[i], noisy]
        snr = "clean" if cond.is_clean else str(cond.snr_db)
        lines.append(f"{int(corpus.seeds[i])}\t{cond.category}\t{snr}\n")
    dump_matrices(directory / f"{split}.bin", mats)
    (directory / f"{split}.manifest").write_text("".join(lines), encoding="utf-8")


def load_split(directory: Path, split: str):
    """Returns (manifest rows, video, clean audio, noisy audio)."""
    directory = Path(directory)
    mats = load_matrices(directory / f"{split}.bin")
    rows = []
    for line in (directory / f"{split}.manifest").read_text(encoding="utf-8").splitlines():
        seed, cat, snr = line.split("\t")
        rows.append((int(seed), cat, None if snr == "clean" else int(snr)))
    if len(mats) != 3 * len(rows):
        raise ValueError(f"{split}: {len(mats)} matrices for {len(rows)} manifest rows")
    return rows, mats[0::3], mats[1::3], mats[2::3]
