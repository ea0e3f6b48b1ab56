"""Run configuration: strict nested YAML parsing for the command line.

Every section rejects unknown keys so typos fail loudly before any work
starts, and file paths referenced by the config are checked up front.
"""

import dataclasses
import os
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError, ValidationError
from .network import NetworkSpec
from .training import SyntheticDataset, TrainConfig, VoxsetDataset

TASKS = ("semseg", "insseg")
DATASET_KINDS = ("synthetic", "voxset")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    num_batches: int = 16
    scenes_per_batch: int = 4
    extent: int = 16
    num_classes: int = 6
    max_boxes: int = 5
    noise: float = 0.1
    seed: int = 1
    eval_batches: int = 4
    eval_seed: int = 999
    files: tuple = ()        # voxset kind: training batches
    eval_files: tuple = ()   # voxset kind: held-out batches

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(
                f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}"
            )
        self.files = tuple(str(f) for f in self.files)
        self.eval_files = tuple(str(f) for f in self.eval_files)
        if self.kind == "voxset" and not self.files:
            raise ConfigError("dataset.kind voxset requires dataset.files")


@dataclass
class PruneConfig:
    criterion: str = "L1G"
    steps: int = 10
    per_step: float | None = None
    target_rate: float | None = None
    finetune_iterations: int = 100
    structural_layers: tuple = ()
    structural_axis: str = "z"

    def __post_init__(self):
        self.structural_layers = tuple(self.structural_layers)
        if self.per_step is not None and self.target_rate is not None:
            raise ConfigError("give prune.per_step or prune.target_rate, not both")


@dataclass
class RunConfig:
    network: NetworkSpec
    trainer: TrainConfig
    dataset: DatasetConfig
    prune: PruneConfig
    task: str = "insseg"
    output_dir: str = "runs/out"


def _strict_section(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return cls(**data)
    except (ValidationError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from e


def parse_config(raw: dict, base_dir: str = ".") -> RunConfig:
    """Validate a nested config mapping into a RunConfig."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    known = {"network", "trainer", "dataset", "prune", "task", "output_dir"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown top-level key {key!r}")

    task = raw.get("task", "insseg")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")

    dataset = _strict_section(DatasetConfig, dict(raw.get("dataset", {})),
                              "dataset")
    net_raw = dict(raw.get("network", {}))
    # the dataset is the source of truth for the label space
    net_raw.setdefault("num_classes", dataset.num_classes)
    if net_raw["num_classes"] != dataset.num_classes:
        raise ConfigError(
            f"network.num_classes {net_raw['num_classes']} does not match "
            f"dataset.num_classes {dataset.num_classes}"
        )
    net_raw.setdefault("offset_head", task == "insseg")
    if task == "semseg" and net_raw["offset_head"]:
        raise ConfigError("task semseg does not use an offset head")
    try:
        network = NetworkSpec.from_dict(net_raw)
    except (ValidationError, ConfigError) as e:
        raise ConfigError(f"network: {e}") from e

    trainer = _strict_section(TrainConfig, dict(raw.get("trainer", {})),
                              "trainer")
    prune = _strict_section(PruneConfig, dict(raw.get("prune", {})), "prune")

    output_dir = raw.get("output_dir", "runs/out")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir must be a non-empty string")
    if os.path.isfile(output_dir):
        raise ConfigError(f"output_dir {output_dir!r} is an existing file")

    if dataset.kind == "voxset":
        resolved = []
        for f in dataset.files + dataset.eval_files:
            path = f if os.path.isabs(f) else os.path.join(base_dir, f)
            if not os.path.isfile(path):
                raise ConfigError(f"dataset file not found: {path}")
            resolved.append(path)
        n = len(dataset.files)
        dataset.files = tuple(resolved[:n])
        dataset.eval_files = tuple(resolved[n:])

    return RunConfig(network=network, trainer=trainer, dataset=dataset,
                     prune=prune, task=task, output_dir=output_dir)


def load_config(path) -> RunConfig:
    """Parse a YAML config file; relative data paths resolve beside it."""
    path = str(path)
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from e
    if raw is None:
        raw = {}
    return parse_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def make_datasets(cfg: RunConfig):
    """(train, eval) datasets; eval is None when nothing is held out."""
    d = cfg.dataset
    if d.kind == "synthetic":
        train = SyntheticDataset(d.num_batches, d.scenes_per_batch, d.extent,
                                 d.num_classes, d.max_boxes, d.noise, d.seed)
        ev = None
        if d.eval_batches > 0:
            ev = SyntheticDataset(d.eval_batches, d.scenes_per_batch, d.extent,
                                  d.num_classes, d.max_boxes, d.noise,
                                  d.eval_seed)
        return train, ev
    train = VoxsetDataset(d.files, d.num_classes)
    ev = VoxsetDataset(d.eval_files, d.num_classes) if d.eval_files else None
    return train, ev
