"""Hypernetwork that generates diverse weight vectors for a small MNIST convnet."""

from .autodiff import Tensor, backward, precision
from .config import TrainConfig, parse_config
from .hypernet import DEFAULT_HYPERNET, HypernetArch, generate_weights, init_hypernet
from .target_net import DEFAULT_ARCH, TargetArch, target_accuracy, target_forward

__version__ = "0.1.0"
