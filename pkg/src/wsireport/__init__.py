"""Report generation from whole-slide-image patch features.

A local-global hierarchical encoder turns a bag of patch features into region
representations, a learnable context memory links the visual and textual
pathways, and a transformer decoder writes the report.
"""

from .config import RunConfig, load_config
from .data import PatchFeatureBag, ReportRecord
from .model import ReportGenerator
from .tokenizer import Vocabulary, build_vocab, decode, encode

__all__ = [
    "PatchFeatureBag",
    "ReportGenerator",
    "ReportRecord",
    "RunConfig",
    "Vocabulary",
    "build_vocab",
    "decode",
    "encode",
    "load_config",
]
__version__ = "0.1.0"
