from .config import ExperimentConfig, load_config, validate_config
from .runner import run

__all__ = ["ExperimentConfig", "load_config", "validate_config", "run"]
