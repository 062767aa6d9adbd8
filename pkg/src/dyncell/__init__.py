"""Search engine for dynamic cells linking per-frame segmentation features."""

__version__ = "0.1.0"

from .autograd import Parameter, Tensor  # noqa: F401
from .genotype import Genotype, Step, decode, encode  # noqa: F401
