"""Training-free image composition with exceptional-prompt inversion and
composite self-attention, on a deterministic toy diffusion backbone."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, InputError, NumericalError, StepError, TficonError
from .pipeline import CompositionConfig, CompositionJob, compose, compose_latents
from .toy import init_toy, load_weights, save_weights

__all__ = [
    "CompositionConfig", "CompositionJob", "ConfigError", "ContractError", "InputError",
    "NumericalError", "StepError", "TficonError", "compose", "compose_latents", "init_toy",
    "load_weights", "save_weights",
]
