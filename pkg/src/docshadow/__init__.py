"""Lightweight high-resolution document shadow removal in numpy."""
from .errors import CheckpointError, ConfigError, DataError, DocShadowError, NumericError, ShapeError
from .estimators import LPShadowRemover
from .models import DEFAULT_CONFIG, ModelConfig, desk_config, init_params, ioanet_forward, lp_ioanet_forward

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "DocShadowError", "NumericError", "ShapeError",
    "LPShadowRemover", "DEFAULT_CONFIG", "ModelConfig", "desk_config", "init_params", "ioanet_forward",
    "lp_ioanet_forward", "__version__",
]
