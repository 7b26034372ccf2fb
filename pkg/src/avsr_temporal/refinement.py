"""Audio refinement objective: pull refined noisy-audio features toward the
front-end features of the clean audio."""
from __future__ import annotations

from dataclasses import dataclass

from .autodiff import Value, mse, stop_gradient
from .synth import FrontEndParams, PairingError, front_end


@dataclass
class CleanReference:
    features: Value  # detached; never enters the attention stack


def clean_reference(clean_signal, fe: FrontEndParams) -> CleanReference:
    """Front-end projection of the un-mixed audio, detached from the graph so
    the target cannot move toward the prediction."""
    if clean_signal is None:
        raise PairingError("no clean counterpart for this training pair")
    return CleanReference(stop_gradient(front_end(clean_signal, fe)))


def loss_ref(f_a_refined: Value, ref: CleanReference) -> Value:
    """Mean squared error over all T*D entries."""
    return mse(f_a_refined, ref.features)
