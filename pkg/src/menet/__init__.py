"""Bimodal segmentation toolkit: modality-exchange encoder, cross-attention
fusion, U-shaped decoder, segmentation metrics and a synthetic phantom
dataset, all on a minimal reverse-mode tensor engine."""

from .tensor import Tensor, ParamStore, backward

__all__ = ["Tensor", "ParamStore", "backward"]
__version__ = "0.1.0"
