"""Learn smaller kernels and fewer channels for CNNs, then export a dense pruned model."""

from .architectures import build_architecture
from .config import load_config
from .surgery import export
from .train import run_training

__version__ = "0.1.0"
__all__ = ["build_architecture", "export", "load_config", "run_training", "__version__"]
