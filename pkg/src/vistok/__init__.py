"""Token-space framework for visual task outputs: VQ-VAE tokenizers, sequence codecs, and a small autoregressive task solver."""

from . import tensor
from .tensor import Tensor, no_grad
from .optim import Parameter, TrainConfig, adam_step
