"""Losses, SGD, synthetic scenes, metrics, and the training loop.

Everything here is plain numpy over the explicit forward/backward passes
of the network module. The optimizer re-applies pruning masks after every
update, so a pruned network can be fine-tuned without ever reviving a
masked weight.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TrainingError, ValidationError
from .kernel_map import CoordinateManager
from .network import Network
from .sparse_tensor import SparseTensor, batch_concat

_NORM_EPS = 1e-8


# ----- losses -----


def loss_semseg(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross entropy; labels < 0 are ignored.

    Returns (loss, grad) with grad already divided by the number of
    counted rows, so it feeds the backward pass directly.
    """
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"logits {logits.shape} and labels {labels.shape} do not align"
        )
    n, c = logits.shape
    valid = labels >= 0
    count = int(valid.sum())
    if count == 0:
        raise ValidationError("all labels are ignored; nothing to train on")
    if labels[valid].max() >= c:
        raise ValidationError(f"label out of range for {c} classes")

    shifted = logits - logits.max(axis=1, keepdims=True)
    expo = np.exp(shifted)
    prob = expo / expo.sum(axis=1, keepdims=True)
    rows = np.nonzero(valid)[0]
    picked = shifted[rows, labels[rows]] - np.log(expo[rows].sum(axis=1))
    loss = -float(picked.sum()) / count

    grad = np.zeros_like(logits)
    grad[rows] = prob[rows]
    grad[rows, labels[rows]] -= 1.0
    grad /= count
    return loss, grad


def loss_offset(pred: np.ndarray, target: np.ndarray, fg: np.ndarray):
    """Centroid-offset regression over foreground rows.

    Per row: L1 distance minus cosine similarity between predicted and
    target offset vectors, averaged over foreground. Norms are clamped
    at 1e-8 so zero vectors stay finite. Returns (loss, grad).
    """
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ShapeError(f"offset arrays must be (N, 3), got {pred.shape}")
    if fg.shape != (pred.shape[0],):
        raise ShapeError("foreground mask does not match offset rows")
    grad = np.zeros_like(pred)
    n_fg = int(np.count_nonzero(fg))
    if n_fg == 0:
        return 0.0, grad

    p = pred[fg]
    t = target[fg]
    diff = p - t
    l1 = np.abs(diff).sum(axis=1)

    norm_p = np.linalg.norm(p, axis=1)
    na = np.maximum(norm_p, _NORM_EPS)
    nb = np.maximum(np.linalg.norm(t, axis=1), _NORM_EPS)
    dot = (p * t).sum(axis=1)
    cos = dot / (na * nb)
    loss = float((l1 - cos).sum()) / n_fg

    g = np.sign(diff)
    g -= t / (na * nb)[:, None]
    # the |p| factor only varies when it is above the clamp
    live = norm_p > _NORM_EPS
    g[live] += (dot[live] / (na[live] ** 3 * nb[live]))[:, None] * p[live]
    grad[fg] = g / n_fg
    return loss, grad


# ----- optimizer -----


class SGDMomentum:
    """SGD with classical momentum over the network's parameter views.

    v <- momentum * v + grad (+ weight_decay * w); w <- w - lr * v.
    Masked conv entries are forced back to zero, and their velocity with
    them, after every step. Snapshots each conv's initial weights on
    construction so drift-based pruning scores have their reference.
    """

    def __init__(self, net: Network, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if not (0.0 <= momentum < 1.0):
            raise ValidationError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0.0:
            raise ValidationError("weight_decay must be >= 0")
        self.net = net
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}
        for view in net.param_views():
            if view.name in self.velocity:
                raise ValidationError(f"duplicate parameter name {view.name}")
            self.velocity[view.name] = np.zeros(view.value.shape, view.value.dtype)
        for conv in net.conv_layers():
            conv.weights.snapshot_init()

    def step(self, lr: float) -> None:
        for view in self.net.param_views():
            g = view.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in {view.name}")
            if self.weight_decay:
                g = g + self.weight_decay * view.value
            v = self.velocity[view.name]
            v *= self.momentum
            v += g
            view.value -= lr * v
            if view.mask is not None:
                dead = view.mask == 0
                view.value[dead] = 0.0
                v[dead] = 0.0


def poly_lr(base_lr: float, iteration: int, max_iterations: int,
            power: float = 0.9) -> float:
    """Polynomial decay from base_lr to 0, clamped past max_iterations."""
    if max_iterations < 1:
        raise ValidationError("max_iterations must be >= 1")
    frac = min(max(iteration, 0), max_iterations) / max_iterations
    return base_lr * (1.0 - frac) ** power


def cosine_lr(base_lr: float, iteration: int, max_iterations: int) -> float:
    """Half-cosine decay from base_lr to 0, clamped past max_iterations."""
    if max_iterations < 1:
        raise ValidationError("max_iterations must be >= 1")
    frac = min(max(iteration, 0), max_iterations) / max_iterations
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


# ----- synthetic scenes -----

FLOOR_CLASS = 0
WALL_CLASS = 1
FIRST_OBJECT_CLASS = 2


@dataclass
class Scene:
    """One generated room at stride 1, batch id 0."""

    coords: np.ndarray    # (N, 4) int64
    features: np.ndarray  # (N, 3) float64
    labels: np.ndarray    # (N,) int64
    offsets: np.ndarray   # (N, 3) float64, instance centroid - voxel
    fg: np.ndarray        # (N,) bool, True on object voxels


def generate_scene(rng, extent: int = 16, num_classes: int = 6,
                   max_boxes: int = 5, noise: float = 0.1) -> Scene:
    """Random room: floor plane, two walls, and 1..max_boxes solid boxes.

    Classes 0/1 are floor/wall; boxes draw from the remaining classes.
    Two feature channels carry the class value under independent Gaussian
    noise, so per-voxel evidence is ambiguous at class boundaries and
    spatial aggregation pays off; the third channel is normalized height.
    Horizontal position is deliberately not a feature, otherwise the
    network just memorizes where the training boxes sit. Offset targets
    point from each object voxel to its box centroid.
    """
    if extent < 8 or extent > 32:
        raise ValidationError(f"extent must be in [8, 32], got {extent}")
    if num_classes < 3:
        raise ValidationError("need at least floor, wall, and one object class")
    if max_boxes < 1:
        raise ValidationError("max_boxes must be >= 1")

    cells = {}  # (x, y, z) -> (label, instance id), last write wins
    for x in range(extent):
        for y in range(extent):
            cells[(x, y, 0)] = (FLOOR_CLASS, -1)
    wall_h = extent // 2
    for z in range(1, wall_h):
        for y in range(extent):
            cells[(0, y, z)] = (WALL_CLASS, -1)
        for x in range(1, extent):
            cells[(x, 0, z)] = (WALL_CLASS, -1)

    n_boxes = int(rng.integers(1, max_boxes + 1))
    placed = []  # (x0, y0, z0, dx, dy, dz), kept one voxel apart
    inst = 0
    for _ in range(n_boxes):
        for _attempt in range(50):
            dx, dy, dz = (int(rng.integers(2, 5)) for _ in range(3))
            x0 = int(rng.integers(1, extent - dx))
            y0 = int(rng.integers(1, extent - dy))
            z0 = int(rng.integers(1, extent - dz))
            clear = all(
                x0 + dx < px or px + pdx < x0
                or y0 + dy < py or py + pdy < y0
                or z0 + dz < pz or pz + pdz < z0
                for px, py, pz, pdx, pdy, pdz in placed
            )
            if clear:
                break
        else:
            continue  # room too crowded, settle for fewer boxes
        placed.append((x0, y0, z0, dx, dy, dz))
        label = FIRST_OBJECT_CLASS + int(rng.integers(num_classes - 2))
        for x in range(x0, x0 + dx):
            for y in range(y0, y0 + dy):
                for z in range(z0, z0 + dz):
                    cells[(x, y, z)] = (label, inst)
        inst += 1
    n_boxes = inst

    xyz = np.array(list(cells.keys()), dtype=np.int64)
    lab_inst = np.array(list(cells.values()), dtype=np.int64)
    order = np.lexsort((xyz[:, 2], xyz[:, 1], xyz[:, 0]))
    xyz, lab_inst = xyz[order], lab_inst[order]
    labels, inst = lab_inst[:, 0], lab_inst[:, 1]

    n = xyz.shape[0]
    coords = np.zeros((n, 4), dtype=np.int64)
    coords[:, 1:] = xyz

    offsets = np.zeros((n, 3))
    fg = inst >= 0
    for i in range(n_boxes):
        rows = inst == i
        if rows.any():  # a later box may fully overwrite an earlier one
            centroid = xyz[rows].mean(axis=0)
            offsets[rows] = centroid - xyz[rows]

    features = np.empty((n, 3))
    features[:, 0] = xyz[:, 2] / extent
    level = labels / (num_classes - 1)
    features[:, 1] = level + noise * rng.normal(size=n)
    features[:, 2] = level + noise * rng.normal(size=n)
    return Scene(coords, features, labels, offsets, fg)


@dataclass
class Batch:
    """Batched scenes plus a coordinate manager reused across epochs."""

    tensor: SparseTensor
    labels: np.ndarray
    offsets: np.ndarray
    fg: np.ndarray
    manager: CoordinateManager


class SyntheticDataset:
    """Fixed batches of generated rooms.

    Batch composition never changes between epochs, which keeps kernel
    maps cacheable (one CoordinateManager per batch) and training runs
    reproducible for a given seed.
    """

    def __init__(self, num_batches: int = 8, scenes_per_batch: int = 4,
                 extent: int = 16, num_classes: int = 6, max_boxes: int = 5,
                 noise: float = 0.1, seed: int = 0):
        if num_batches < 1 or scenes_per_batch < 1:
            raise ValidationError("dataset needs at least one batch and scene")
        self.num_classes = num_classes
        self.extent = extent
        rng = np.random.default_rng(seed)
        self.batches = []
        for _ in range(num_batches):
            scenes = [
                generate_scene(rng, extent, num_classes, max_boxes, noise)
                for _ in range(scenes_per_batch)
            ]
            tensor = batch_concat(
                [SparseTensor(s.coords, s.features) for s in scenes]
            )
            self.batches.append(Batch(
                tensor=tensor,
                labels=np.concatenate([s.labels for s in scenes]),
                offsets=np.concatenate([s.offsets for s in scenes]),
                fg=np.concatenate([s.fg for s in scenes]),
                manager=CoordinateManager(tensor),
            ))

    def __len__(self) -> int:
        return len(self.batches)


class VoxsetDataset:
    """Batches read from voxset files, one file per batch.

    Files must carry labels. When centroid-offset columns are present the
    foreground mask follows the scene convention: classes 0 and 1 are
    background, everything else is an object.
    """

    def __init__(self, files, num_classes: int):
        from .sparse_tensor import load_voxset

        files = [str(f) for f in files]
        if not files:
            raise ValidationError("voxset dataset needs at least one file")
        if num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        self.num_classes = num_classes
        self.batches = []
        for path in files:
            tensor, labels, offsets = load_voxset(path)
            if labels is None:
                raise ValidationError(f"{path}: voxset has no labels")
            if labels.min() < 0 or labels.max() >= num_classes:
                raise ValidationError(
                    f"{path}: labels outside [0, {num_classes})"
                )
            if offsets is None:
                offsets = np.zeros((tensor.n, 3))
                fg = np.zeros(tensor.n, dtype=bool)
            else:
                fg = labels >= FIRST_OBJECT_CLASS
            self.batches.append(Batch(
                tensor=tensor,
                labels=labels,
                offsets=offsets,
                fg=fg,
                manager=CoordinateManager(tensor),
            ))

    def __len__(self) -> int:
        return len(self.batches)


# ----- metrics -----


def confusion_matrix(pred: np.ndarray, truth: np.ndarray,
                     num_classes: int) -> np.ndarray:
    """(C, C) counts, rows = truth, cols = prediction."""
    if pred.shape != truth.shape:
        raise ShapeError("prediction and truth must align")
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes
                      or truth.min() < 0 or truth.max() >= num_classes):
        raise ValidationError("class id out of range")
    flat = truth.astype(np.int64) * num_classes + pred
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def miou_macc(confusion: np.ndarray) -> dict:
    """Mean IoU over classes present anywhere; mean accuracy over classes
    present in the truth. Absent classes do not drag the averages."""
    tp = np.diag(confusion).astype(float)
    truth_count = confusion.sum(axis=1).astype(float)
    pred_count = confusion.sum(axis=0).astype(float)
    union = truth_count + pred_count - tp
    present = union > 0
    if not present.any():
        raise ValidationError("confusion matrix is empty")
    iou = np.zeros(confusion.shape[0])
    iou[present] = tp[present] / union[present]
    has_truth = truth_count > 0
    acc = tp[has_truth] / truth_count[has_truth]
    return {
        "miou": float(iou[present].mean()),
        "macc": float(acc.mean()),
        "iou_per_class": iou,
    }


# ----- trainer -----


_SCHEDULES = ("poly", "cosine", "constant")


@dataclass
class TrainConfig:
    iterations: int = 2000
    base_lr: float = 0.1
    momentum: float = 0.9
    schedule: str = "poly"
    lr_power: float = 0.9
    weight_decay: float = 0.0
    offset_weight: float = 1.0
    finetune_lr: float = 0.01
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.base_lr <= 0 or self.finetune_lr <= 0:
            raise ValidationError("learning rates must be positive")
        if self.schedule not in _SCHEDULES:
            raise ValidationError(
                f"schedule must be one of {_SCHEDULES}, got {self.schedule!r}"
            )
        if self.log_every < 1:
            raise ValidationError("log_every must be >= 1")

    def lr_at(self, iteration: int) -> float:
        if self.schedule == "poly":
            return poly_lr(self.base_lr, iteration, self.iterations,
                           self.lr_power)
        if self.schedule == "cosine":
            return cosine_lr(self.base_lr, iteration, self.iterations)
        return self.base_lr


class Trainer:
    """Drives training, fine-tuning, evaluation, and gradient calibration."""

    def __init__(self, net: Network, dataset: "SyntheticDataset | VoxsetDataset",
                 config: TrainConfig | None = None):
        self.net = net
        self.dataset = dataset
        self.config = config or TrainConfig()
        if dataset.num_classes != net.spec.num_classes:
            raise ValidationError(
                f"dataset has {dataset.num_classes} classes, "
                f"network expects {net.spec.num_classes}"
            )
        self.optimizer = SGDMomentum(net, self.config.momentum,
                                     self.config.weight_decay)
        self.iteration = 0

    def _next_batch(self) -> Batch:
        return self.dataset.batches[self.iteration % len(self.dataset)]

    def _losses(self, batch: Batch, train: bool):
        """Forward + losses; returns (total, sem, off, grads, logits)."""
        logits, offsets = self.net.forward(batch.tensor, train=train,
                                           mgr=batch.manager)
        sem, grad_logits = loss_semseg(logits.features, batch.labels)
        off, grad_offsets = 0.0, None
        if offsets is not None:
            off, grad_offsets = loss_offset(offsets.features, batch.offsets,
                                            batch.fg)
            if self.config.offset_weight != 1.0:
                off *= self.config.offset_weight
                grad_offsets = grad_offsets * self.config.offset_weight
        return sem + off, sem, off, grad_logits, grad_offsets, logits

    def train_step(self, lr: float) -> tuple:
        batch = self._next_batch()
        self.net.zero_grad()
        total, sem, off, g_logits, g_offsets, _ = self._losses(batch, True)
        self.net.backward(g_logits, g_offsets)
        self.optimizer.step(lr)
        self.iteration += 1
        return total, sem, off

    def run(self, iterations: int | None = None) -> list:
        """Train with the polynomial schedule; returns periodic log rows."""
        n = self.config.iterations if iterations is None else iterations
        rows = []
        for i in range(n):
            lr = self.config.lr_at(self.iteration)
            total, sem, off = self.train_step(lr)
            if (i + 1) % self.config.log_every == 0 or i == n - 1:
                rows.append({
                    "iteration": self.iteration,
                    "lr": lr,
                    "loss": total,
                    "loss_sem": sem,
                    "loss_off": off,
                })
        return rows

    def fine_tune(self, iterations: int, lr: float | None = None) -> float:
        """Masked training at a constant low rate; returns the last loss."""
        rate = self.config.finetune_lr if lr is None else lr
        last = float("nan")
        for _ in range(iterations):
            last, _, _ = self.train_step(rate)
        return last

    def evaluate(self, dataset=None, weight_mode: str = "dense") -> dict:
        """Eval-mode metrics over a dataset (defaults to the training set)."""
        ds = dataset or self.dataset
        cm = np.zeros((ds.num_classes, ds.num_classes), dtype=np.int64)
        loss_sum, rows = 0.0, 0
        for batch in ds.batches:
            logits, _ = self.net.forward(batch.tensor, train=False,
                                         mgr=batch.manager,
                                         weight_mode=weight_mode)
            sem, _ = loss_semseg(logits.features, batch.labels)
            n = batch.labels.shape[0]
            loss_sum += sem * n
            rows += n
            pred = logits.features.argmax(axis=1)
            cm += confusion_matrix(pred, batch.labels, ds.num_classes)
        out = miou_macc(cm)
        out["loss"] = loss_sum / rows
        return out

    def average_gradients(self, num_batches: int | None = None) -> dict:
        """Mean conv-weight gradient over calibration batches.

        Feeds gradient-magnitude pruning scores. Runs training-mode
        forwards, so batch-norm running statistics drift slightly; the
        same batches are about to be fine-tuned on, so this is harmless.
        """
        n = len(self.dataset) if num_batches is None else num_batches
        if n < 1:
            raise ValidationError("need at least one calibration batch")
        self.net.zero_grad()
        for i in range(n):
            batch = self.dataset.batches[i % len(self.dataset)]
            _, _, _, g_logits, g_offsets, _ = self._losses(batch, True)
            self.net.backward(g_logits, g_offsets)
        grads = {c.name: c.grad_w / n for c in self.net.conv_layers()}
        self.net.zero_grad()
        return grads
