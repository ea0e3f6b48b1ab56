"""Spatially sparse 3D convolution engine with weight pruning and
CSR-backed weight-sparse inference on CPU."""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateLayerError,
    DuplicateCoordinateError,
    PruneDivergenceError,
    ShapeError,
    StrideMismatchError,
    TrainingError,
    ValidationError,
    VoxsetFormatError,
    Ws3Error,
)
from .sparse_tensor import (
    CoordinateIndex,
    SparseTensor,
    VoxelizationConfig,
    batch_concat,
    build_index,
    hash_coords,
    load_voxset,
    save_voxset,
    stride_coords,
    voxelize,
)
from .kernel_map import (
    CoordinateManager,
    KernelMap,
    build_kernel_map,
    kernel_offsets,
)
from .network import (
    Network,
    NetworkSpec,
    build_network,
    count_params,
    param_breakdown,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .pruning import (
    PruneCriterion,
    PruneSchedule,
    iterative_prune,
    kernel_density_rows,
    prunable_layers,
    prune_step,
    structural_axis_prune,
)
from .training import (
    SyntheticDataset,
    TrainConfig,
    Trainer,
    VoxsetDataset,
    confusion_matrix,
    generate_scene,
    loss_offset,
    loss_semseg,
    miou_macc,
)
from .ws3 import Ws3Kernel, bench_layer, bench_network
from .config import RunConfig, load_config, make_datasets, parse_config

__all__ = [
    "CheckpointError",
    "ConfigError",
    "CoordinateIndex",
    "CoordinateManager",
    "DegenerateLayerError",
    "DuplicateCoordinateError",
    "KernelMap",
    "Network",
    "NetworkSpec",
    "PruneCriterion",
    "PruneDivergenceError",
    "PruneSchedule",
    "RunConfig",
    "ShapeError",
    "SparseTensor",
    "StrideMismatchError",
    "SyntheticDataset",
    "TrainConfig",
    "Trainer",
    "TrainingError",
    "ValidationError",
    "VoxelizationConfig",
    "VoxsetDataset",
    "VoxsetFormatError",
    "Ws3Error",
    "Ws3Kernel",
    "batch_concat",
    "bench_layer",
    "bench_network",
    "build_index",
    "build_kernel_map",
    "build_network",
    "confusion_matrix",
    "count_params",
    "generate_scene",
    "hash_coords",
    "iterative_prune",
    "kernel_density_rows",
    "kernel_offsets",
    "load_checkpoint",
    "load_config",
    "load_voxset",
    "make_datasets",
    "miou_macc",
    "param_breakdown",
    "parse_config",
    "prunable_layers",
    "prune_step",
    "save_checkpoint",
    "save_voxset",
    "stride_coords",
    "structural_axis_prune",
    "voxelize",
]
