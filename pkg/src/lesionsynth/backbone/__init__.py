"""Model surgery, low-rank adapters and backbone bundles."""

from .bundle import (
    BackboneBundle,
    TrainableSet,
    build_tiny_backbone,
    inflate_bundle,
    inject_lora,
    trainable_parameters,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .lora import LoraAdapterSet, LoraLinear, merge_lora, merged_linear
from .surgery import ConvWeights, InflatedConv2d, inflate_input_conv, inflate_output_conv
from .tiny import HashTextEmbedder, TinyConfig

__all__ = [
    "BackboneBundle",
    "CheckpointError",
    "ConvWeights",
    "HashTextEmbedder",
    "InflatedConv2d",
    "LoraAdapterSet",
    "LoraLinear",
    "TinyConfig",
    "TrainableSet",
    "build_tiny_backbone",
    "inflate_bundle",
    "inflate_input_conv",
    "inflate_output_conv",
    "inject_lora",
    "load_checkpoint",
    "merge_lora",
    "merged_linear",
    "save_checkpoint",
    "trainable_parameters",
]
