"""Streaming weak-form equation discovery with thresholded proximal gradient steps."""

from .analysis import e2, reach_and_hold, tpr
from .grid import Field, MultiIndex, RingBuffer, SpatialGrid
from .harness import ExperimentConfig, load_config, offline_phase, online_step, run_experiment, run_trial
from .sims import SimConfig, preset, simulate, true_weights
from .sparse import ThresholdPolicy, hard_threshold, mstls, mstls_grid_search, online_update
from .weakform import FeatureLibrary, KernelCache, assemble_system, build_library, spatial_features

__all__ = [
    "e2", "reach_and_hold", "tpr",
    "Field", "MultiIndex", "RingBuffer", "SpatialGrid",
    "ExperimentConfig", "load_config", "offline_phase", "online_step", "run_experiment", "run_trial",
    "SimConfig", "preset", "simulate", "true_weights",
    "ThresholdPolicy", "hard_threshold", "mstls", "mstls_grid_search", "online_update",
    "FeatureLibrary", "KernelCache", "assemble_system", "build_library", "spatial_features",
]
