"""grebe: partitioned multi-relation graph embedding training and evaluation."""

__version__ = "0.1.0"

from .config import Config, load_config  # noqa: F401
