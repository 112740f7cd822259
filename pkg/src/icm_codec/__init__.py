"""Learned image coding for machines with PatchGAN decoder finetuning."""

from .codec_core import (
    Codec,
    CodecConfig,
    ParameterSet,
    ProbabilityModel,
    build_codec,
    decode_forward,
    encode_forward,
    latent_likelihood,
    pad_to_stride,
    partition_parameters,
    quantize,
)
from .errors import (
    BitstreamError,
    ChecksumError,
    ConfigurationError,
    ModelMismatchError,
    TrainingDivergedError,
    TruncatedStreamError,
)

__version__ = "0.1.0"

__all__ = [
    "BitstreamError",
    "ChecksumError",
    "Codec",
    "CodecConfig",
    "ConfigurationError",
    "ModelMismatchError",
    "ParameterSet",
    "ProbabilityModel",
    "TrainingDivergedError",
    "TruncatedStreamError",
    "build_codec",
    "decode_forward",
    "encode_forward",
    "latent_likelihood",
    "pad_to_stride",
    "partition_parameters",
    "quantize",
]
