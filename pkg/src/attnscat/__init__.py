"""Attention-based wavelet scattering networks for multi-channel imagery."""
from .tensor import Tensor, backward, grad_check
from .filterbank import FilterBank, build_morlet_bank, littlewood_paley
from .scattering import ScatteringCoeffs, path_index, path_table, scatter2d
from .attention import AttentionModule, channel_attention, fuse, normalize_coeffs, spatial_attention
from .model import ConvBaseline, ModelConfig, ScatteringNet, build_model, conv_baseline, param_count

__all__ = [
    "Tensor", "backward", "grad_check",
    "FilterBank", "build_morlet_bank", "littlewood_paley",
    "ScatteringCoeffs", "path_index", "path_table", "scatter2d",
    "AttentionModule", "channel_attention", "fuse", "normalize_coeffs", "spatial_attention",
    "ConvBaseline", "ModelConfig", "ScatteringNet", "build_model", "conv_baseline", "param_count",
]
__version__ = "0.1.0"
