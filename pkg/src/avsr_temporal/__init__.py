"""Audio-visual recognition toy with cross-modal attention stacks and
video temporal-dynamics auxiliary losses, on a small reverse-mode autodiff."""

from .autodiff import Tape, Value, stop_gradient
from .metrics import nwer, nwer_noise_dominant, wer

__version__ = "0.1.0"

__all__ = ["Tape", "Value", "stop_gradient", "wer", "nwer", "nwer_noise_dominant", "__version__"]
