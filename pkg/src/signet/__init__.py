"""Automated signature extraction, cleaning, embedding and clustering for scanned documents."""
from .config import PipelineConfig, load_config, validate_config
from .core import (CandidateRegion, ClusterAssignment, Embedding, ImageState, PageImage, PairExample,
                   Provenance, SignatureImage, normalize_to_canvas)
from .errors import (ConfigError, CorruptIndexError, DataError, DecodeError, DegenerateEmbedding, FormatError,
                     InvalidInput, SignetError, SourceError, StartupError, StoreError)

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig", "load_config", "validate_config",
    "CandidateRegion", "ClusterAssignment", "Embedding", "ImageState", "PageImage", "PairExample",
    "Provenance", "SignatureImage", "normalize_to_canvas",
    "ConfigError", "CorruptIndexError", "DataError", "DecodeError", "DegenerateEmbedding", "FormatError",
    "InvalidInput", "SignetError", "SourceError", "StartupError", "StoreError",
]
