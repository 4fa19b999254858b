"""Joint discrete masked-diffusion policy over unified vision-action token sequences.

A small numpy transformer with hybrid attention is trained to denoise
mask-corrupted future-image and action tokens in one shared trajectory,
then decoded in parallel with confidence-guided commits. A synthetic
grid world provides episodes whose ground truth is exactly recoverable,
so the whole train -> decode loop is checkable by oracle.
"""

from jointdiff.errors import (
    ConfigError,
    ContractError,
    DecodeFailure,
    FormatError,
    InputError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DecodeFailure",
    "FormatError",
    "InputError",
    "__version__",
]
