"""Central-difference gradient checks against the reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tape, Value, freeze_detached


def _replaying(f, detached):
    def g():
        with freeze_detached(detached, replay=True):
            return f()
    return g


def finite_diff_check(f: Callable[[], Value], params: Sequence[Value], eps: float = 1e-6,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` rebuilds the scalar computation from the current parameter values
    each time it is called. Values passed through ``stop_gradient`` stay at
    their unperturbed values during the probes. ``max_coords`` optionally subsamples coordinates
    per parameter.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.zero_grad()
    detached: list = []
    with freeze_detached(detached, replay=False), Tape() as tape:
        out = f()
    tape.backward(out)
    f = _replaying(f, detached)
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("parameter data must be contiguous")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite objective at perturbed point of {p.name}")
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(ga.reshape(-1)[i] - num) / max(1.0, abs(num)))
    return worst


# ---------------------------------------------------------------- suite

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    passed: bool
    kind: str = "fd"  # "fd": finite differences, "zero": exact-zero gradient


def _readout(out: Value, rng: np.random.Generator) -> Callable[[Value], Value]:
    r = Value(rng.standard_normal(out.shape))
    return lambda v: ad.sum_all(ad.mul(v, r))


def _probe(build: Callable[[], Value], rng: np.random.Generator) -> Callable[[], Value]:
    """Turn a tensor-valued builder into a scalar one via a fixed random readout."""
    read = _readout(build(), rng)
    return lambda: read(build())


def _tiny_setup(seed: int):
    from .model import ModelConfig, ToyAVSRModel
    from .synth import synth_pair
    from .temporal import Predictors, TemporalConfig

    T, C, V = 4, 3, 3
    mcfg = ModelConfig(C=C, D=4, V=V, heads=2, d_model=8, backbone_heads=2, n_enc=1, n_dec=1,
                       max_positions=8, residual_init=1.0)
    model = ToyAVSRModel(mcfg, seed)
    rng = np.random.default_rng([seed, 99])
    preds = Predictors.init(rng, mcfg.D, 4)
    # t=2 so that the speed task (span (t-1)k) still has windows at T=4
    tcfg = TemporalConfig(t=2, k=2)
    pairs = [synth_pair(1000 + i, T, V, C) for i in range(2)]
    video = np.stack([p[0].samples for p in pairs])
    clean = np.stack([p[1].samples for p in pairs])
    noisy = clean + 0.5 * rng.standard_normal(clean.shape)
    scripts = [p[2] for p in pairs]
    return model, preds, tcfg, video, clean, noisy, scripts, rng


def run_suite(seed: int = 0, eps: float = 1e-6) -> list[CheckResult]:
    """Finite-difference checks over the primitives, both attention
    streamlines, every auxiliary loss and the combined objective, plus the
    exact-zero checks for the detached paths."""
    from .attention import a2v_enhance, stacked_forward, v2a_refine
    from .refinement import clean_reference, loss_ref
    from .temporal import loss_direction, loss_order, loss_speed
    from .training import Batch, TrainConfig, total_loss

    rng = np.random.default_rng([seed, 17])
    results: list[CheckResult] = []

    def fd(name, build, params, scalar=False):
        f = build if scalar else _probe(build, rng)
        err = finite_diff_check(f, params, eps)
        results.append(CheckResult(name, err, err < TOLERANCE))

    def P(*shape, lo=None):
        x = rng.standard_normal(shape)
        if lo is not None:
            x = np.where(np.abs(x) < lo, np.sign(x + 1e-12) * lo, x)
        return ad.parameter(x)

    a, b, c = P(2, 3, 4), P(4, 5), P(2, 3, 4)
    fd("add", lambda: a + c, [a, c])
    bias = P(1, 4)
    fd("add_broadcast", lambda: a + bias, [a, bias])
    fd("sub", lambda: a - c, [a, c])
    fd("mul", lambda: ad.mul(a, c), [a, c])
    fd("scale", lambda: ad.scale(a, -1.7), [a])
    r = P(2, 3, 4, lo=0.05)
    fd("relu", lambda: ad.relu(r), [r])
    m = P(3, 4)
    fd("matmul_2d", lambda: ad.matmul(m, b), [m, b])
    fd("matmul_batched", lambda: ad.matmul(a, b), [a, b])
    bb = P(2, 4, 5)
    fd("matmul_batch_both", lambda: ad.matmul(a, bb), [a, bb])
    fd("transpose", lambda: ad.transpose(a), [a])
    fd("reshape", lambda: ad.reshape(a, (2, 12)), [a])
    fd("softmax_rows", lambda: ad.softmax_rows(a), [a])
    fd("log_softmax_rows", lambda: ad.log_softmax_rows(a), [a])
    fd("concat_channels", lambda: ad.concat_channels([a, c]), [a, c])
    fd("split_merge_heads", lambda: ad.merge_heads(ad.mul(ad.split_heads(a, 2), ad.split_heads(c, 2))), [a, c])
    fd("take_rows", lambda: ad.take_rows(a, np.array([[0, 2], [2, 1], [0, 0]])), [a])
    fd("gather_rows", lambda: ad.gather_rows(a, np.array([[0, 2, 2], [1, 0, 1]])), [a])
    fd("select_entries", lambda: ad.select_entries(a, np.array([[0, 3, 1], [2, 2, 0]])), [a])
    k = P(3, 4, 2)
    fd("conv1d_temporal", lambda: ad.conv1d_temporal(a, k), [a, k])
    g, beta = P(1, 4), P(1, 4)
    fd("layer_norm", lambda: ad.layer_norm(a, g, beta), [a, g, beta])
    fd("mean_time", lambda: ad.mean_time(a), [a])
    fd("sum_all", lambda: ad.sum_all(ad.mul(a, a)), [a], scalar=True)
    fd("mean_all", lambda: ad.mean_all(ad.mul(a, c)), [a, c], scalar=True)
    labels = (rng.random((2, 3, 4)) > 0.5).astype(float)
    fd("bce_with_logits", lambda: ad.bce_with_logits(a, labels), [a])
    fd("mse", lambda: ad.mse(a, c), [a, c], scalar=True)

    model, preds, tcfg, video, clean, noisy, scripts, _ = _tiny_setup(seed)
    sv, sa = model.stack_v, model.stack_a
    f_v = ad.parameter(rng.standard_normal((2, 4, 4)))
    f_a = ad.parameter(rng.standard_normal((2, 4, 4)))
    fd("stack.audio(v2a)", lambda: v2a_refine(f_a, f_v, sa),
       [f_a, *sa.named_parameters().values()])
    fd("stack.video(a2v)", lambda: a2v_enhance(f_v, f_a, sv),
       [f_v, *sv.named_parameters().values()])
    fd("stacked_forward", lambda: ad.concat_channels(list(vars(stacked_forward(f_v, f_a, sv, sa)).values())),
       [f_v, f_a, *sv.named_parameters().values(), *sa.named_parameters().values()])

    seeds = np.array([5, 6])
    stacks = [*sv.named_parameters().values(), *sa.named_parameters().values()]

    def enhanced():
        return stacked_forward(f_v, f_a, sv, sa)

    fd("L_order", lambda: loss_order(enhanced().video, enhanced().audio, preds.order, tcfg, seeds),
       [f_v, f_a, *stacks, *preds.order.named_parameters().values()], scalar=True)
    fd("L_direction", lambda: loss_direction(enhanced().video, preds.direction, tcfg),
       [f_v, f_a, *stacks, *preds.direction.named_parameters().values()], scalar=True)
    fd("L_speed", lambda: loss_speed(enhanced().video, preds.speed, tcfg),
       [f_v, f_a, *stacks, *preds.speed.named_parameters().values()], scalar=True)
    ref_target = ad.Value(rng.standard_normal((2, 4, 4)))
    fd("L_ref", lambda: ad.mse(enhanced().audio, ref_target), [f_v, f_a, *stacks], scalar=True)
    fd("L_ref(clean front-end)",
       lambda: loss_ref(model.enhance(*model.features(video, noisy)).audio,
                        clean_reference(clean, model.front_a)),
       [*model.groups()["frontend"].values(), *stacks], scalar=True)

    cfg = TrainConfig()
    batch = Batch(video, noisy, clean, scripts, seeds)
    everything = [*model.named_parameters().values(), *preds.named_parameters().values()]
    fd("total_objective", lambda: total_loss(model, preds, batch, cfg, tcfg)[1], everything,
       scalar=True)

    # exact zeros through the detached paths
    def zero_check(name, loss_fn, watched):
        for p in everything:
            p.zero_grad()
        with Tape() as tape:
            out = loss_fn()
        tape.backward(out)
        worst = max(float(np.max(np.abs(p.grad))) for p in watched)
        results.append(CheckResult(name, worst, worst == 0.0, "zero"))

    audio_stack = list(sa.named_parameters().values())
    video_stack = list(sv.named_parameters().values())

    def l_temp_only():
        pair = model.enhance(*model.features(video, noisy))
        return (loss_order(pair.video, pair.audio, preds.order, tcfg, seeds)
                + loss_direction(pair.video, preds.direction, tcfg)
                + loss_speed(pair.video, preds.speed, tcfg))

    zero_check("sg: L_temp -> audio stack", l_temp_only, audio_stack)
    zero_check("sg: L_ref -> video stack",
               lambda: loss_ref(model.enhance(*model.features(video, noisy)).audio,
                                clean_reference(clean, model.front_a)), video_stack)
    return results
