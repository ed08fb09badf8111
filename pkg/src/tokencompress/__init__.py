"""Instruction-guided visual token compression with a global query pathway
and a windowed local pathway."""

from .accounting import CostModel, compressor_flops, pipeline_flops, token_report
from .conditioning import InstructionEmbedding
from .errors import (
    CertificationError,
    CompressorError,
    ContractError,
    FormatError,
    ShapeError,
    VersionError,
)
from .kernels import BACKEND
from .pipeline import (
    VARIANTS,
    CompressedOutput,
    CompressionConfig,
    CompressorParams,
    compress,
    init_params,
    load_params,
    parameter_count,
    save_params,
    token_count,
)
from .src import FeatureGrid

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "VARIANTS",
    "CertificationError",
    "CompressedOutput",
    "CompressionConfig",
    "CompressorError",
    "CompressorParams",
    "ContractError",
    "CostModel",
    "FeatureGrid",
    "FormatError",
    "InstructionEmbedding",
    "ShapeError",
    "VersionError",
    "compress",
    "compressor_flops",
    "init_params",
    "load_params",
    "parameter_count",
    "pipeline_flops",
    "save_params",
    "token_count",
    "token_report",
]
