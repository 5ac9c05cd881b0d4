"""Receptive-field analysis and regularization for convolutional architectures."""

__version__ = "0.1.0"

from .damping import DampingMatrix, bake, damp_weights, damping_matrix
from .engine import backward_input, forward, grad_check, init_weights
from .erf import ErfStats, GradientMap, erf_stats, export_heatmap, gradient_map, mass_fraction
from .families import FamilyConfig, MAX_RF_TABLE, cp_densenet, cp_resnet, kernel_schedule, rho_table
from .graph import ArchGraph, Dim2, NodeSpec, parse_arch, serialize_arch, topo_order, validate
from .rf import RFReport, count_params, effective_kernel, max_rf, rf_window

__all__ = [
    "ArchGraph", "DampingMatrix", "Dim2", "ErfStats", "FamilyConfig", "GradientMap", "NodeSpec",
    "RFReport", "MAX_RF_TABLE", "backward_input", "bake", "count_params", "cp_densenet", "cp_resnet",
    "damp_weights", "damping_matrix", "effective_kernel", "erf_stats", "export_heatmap", "forward",
    "grad_check", "gradient_map", "init_weights", "kernel_schedule", "mass_fraction", "max_rf",
    "parse_arch", "rf_window", "rho_table", "serialize_arch", "topo_order", "validate",
]
