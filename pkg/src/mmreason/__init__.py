"""Interleaved multimodal chain-of-thought reasoning with a visual KV memory."""

__version__ = "0.1.0"

from .grammar import (
    BoundingBox,
    Box,
    ImageIndex,
    InterleavedSequence,
    TextSpan,
    VisionSpan,
    Vocabulary,
    normalize_box,
    denormalize_box,
    parse_sequence,
    serialize_sequence,
)
from .decoder import ModelConfig, ToyDecoder, attend, compute_loss
from .memory import MemoryBank, MemoryConfig, refine_queries, select_layer_group
from .generation import REASONING_PROMPT, build_session, generate

__all__ = [
    "BoundingBox", "Box", "ImageIndex", "InterleavedSequence", "TextSpan",
    "VisionSpan", "Vocabulary", "normalize_box", "denormalize_box",
    "parse_sequence", "serialize_sequence", "ModelConfig", "ToyDecoder",
    "attend", "compute_loss", "MemoryBank", "MemoryConfig", "refine_queries",
    "select_layer_group", "REASONING_PROMPT", "build_session", "generate",
]
