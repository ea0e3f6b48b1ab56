"""Magnitude pruning: scoring criteria, scopes, schedules, reports.

A prune step removes floor(p * remaining) of the still-unmasked weights
with the lowest scores, either from one global pool or per layer. Ties
at the threshold are broken deterministically by (layer order, flat
index within the layer), ascending. Masks only ever flip 1 -> 0, and a
newly pruned weight is zeroed immediately.

Scores: "l1" is |w|; "fg" is |w * g| with g the gradient averaged over
calibration batches; "l1s" is |w - w_init|, the drift from the stored
initialization snapshot.

Structural axis pruning keeps only kernel offsets on the chosen
coordinate axis (for "z": offsets with x = y = 0, 3 of 27 at K = 3) and
masks the other offsets' weights entirely.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateLayerError,
    PruneDivergenceError,
    ValidationError,
)
from .kernel_map import kernel_offsets
from .network import Network

CRITERIA = ("l1", "fg", "l1s")
SCOPES = ("global", "local")

_TAG_KINDS = {"L1": "l1", "FG": "fg", "L1S": "l1s"}
_TAG_SCOPES = {"G": "global", "L": "local"}


@dataclass(frozen=True)
class PruneCriterion:
    """Scoring kind plus scope, e.g. PruneCriterion("l1", "global")."""

    kind: str
    scope: str

    def __post_init__(self):
        if self.kind not in CRITERIA:
            raise ValidationError(f"unknown criterion kind {self.kind!r}")
        if self.scope not in SCOPES:
            raise ValidationError(f"unknown criterion scope {self.scope!r}")

    @classmethod
    def from_tag(cls, tag: str) -> "PruneCriterion":
        """Parse compact tags like L1G, FGL, L1SG."""
        t = tag.strip().upper()
        for tk, kind in sorted(_TAG_KINDS.items(), key=lambda kv: -len(kv[0])):
            if t.startswith(tk) and t[len(tk):] in _TAG_SCOPES:
                return cls(kind, _TAG_SCOPES[t[len(tk):]])
        raise ValidationError(f"unparseable criterion tag {tag!r}")

    @property
    def tag(self) -> str:
        kind_tag = {v: k for k, v in _TAG_KINDS.items()}[self.kind]
        scope_tag = {v: k for k, v in _TAG_SCOPES.items()}[self.scope]
        return kind_tag + scope_tag


@dataclass
class PruneSchedule:
    """Per-step rate, step count, and fine-tune budget between steps."""

    per_step: float
    steps: int
    finetune_iterations: int = 0

    def __post_init__(self):
        if not (0.0 < self.per_step < 1.0):
            raise ValidationError(f"per_step must be in (0, 1), got {self.per_step}")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.finetune_iterations < 0:
            raise ValidationError("finetune_iterations must be >= 0")

    @property
    def target_rate(self) -> float:
        """Compound pruned fraction after all steps: 1 - (1 - p)^steps."""
        return 1.0 - (1.0 - self.per_step) ** self.steps

    @classmethod
    def from_target(cls, target_rate: float, steps: int,
                    finetune_iterations: int = 0) -> "PruneSchedule":
        """Solve the per-step rate that compounds to target_rate."""
        if not (0.0 < target_rate < 1.0):
            raise ValidationError(f"target_rate must be in (0, 1), got {target_rate}")
        p = 1.0 - (1.0 - target_rate) ** (1.0 / steps)
        return cls(p, steps, finetune_iterations)


def prunable_layers(net: Network):
    return [c for c in net.conv_layers() if c.prunable]


def score_layer(conv, kind: str, avg_grads: dict | None = None) -> np.ndarray:
    if kind == "l1":
        return np.abs(conv.weights.w)
    if kind == "l1s":
        return np.abs(conv.weights.w - conv.weights.w_init)
    if kind == "fg":
        if avg_grads is None or conv.name not in avg_grads:
            raise ValidationError(
                f"fg scoring needs averaged calibration gradients for {conv.name}"
            )
        g = avg_grads[conv.name]
        if g.shape != conv.weights.w.shape:
            raise ValidationError(f"gradient shape mismatch for {conv.name}")
        return np.abs(conv.weights.w * g)
    raise ValidationError(f"unknown criterion kind {kind!r}")


@dataclass
class PruneStepResult:
    pruned: int
    remaining: int
    per_layer: dict


def _select_lowest(scores, masks, k: int):
    """Boolean pick arrays marking the k lowest-scored unmasked entries.

    scores/masks are parallel per-layer lists in canonical order. The
    threshold value comes from one partition over the pooled unmasked
    scores; strictly-lower entries are taken outright and threshold ties
    are resolved ascending by (layer, flat index).
    """
    picks = [np.zeros(s.shape, dtype=bool) for s in scores]
    if k <= 0:
        return picks
    pool = np.concatenate([s[m == 1].ravel() for s, m in zip(scores, masks)])
    if np.isnan(pool).any():
        raise ValidationError("pruning scores contain NaN")
    if k > pool.shape[0]:
        raise ValidationError(f"cannot prune {k} of {pool.shape[0]} weights")
    kth = np.partition(pool, k - 1)[k - 1]
    del pool
    taken = 0
    for s, m, p in zip(scores, masks, picks):
        strict = (m == 1) & (s < kth)
        p[strict] = True
        taken += int(strict.sum())
    need = k - taken
    for li, (s, m, p) in enumerate(zip(scores, masks, picks)):
        if need <= 0:
            break
        tie_flat = np.nonzero(((m == 1) & (s == kth)).ravel())[0]
        if tie_flat.shape[0] == 0:
            continue
        grab = tie_flat[:need]
        p.ravel()[grab] = True
        need -= grab.shape[0]
    assert need == 0
    return picks


def prune_step(net: Network, criterion: PruneCriterion, fraction: float,
               avg_grads: dict | None = None) -> PruneStepResult:
    """Mask out floor(fraction * remaining) weights by the criterion.

    Global scope pools every prunable layer; local applies the fraction
    to each layer separately. A local step over a layer with nothing
    left to prune raises DegenerateLayerError.
    """
    if not (0.0 < fraction < 1.0):
        raise ValidationError(f"fraction must be in (0, 1), got {fraction}")
    layers = prunable_layers(net)
    if not layers:
        raise ValidationError("network has no prunable layers")
    masks = [c.weights.mask for c in layers]
    scores = [score_layer(c, criterion.kind, avg_grads) for c in layers]

    if criterion.scope == "global":
        remaining = int(sum(m.sum() for m in masks))
        k = int(np.floor(fraction * remaining))
        picks = _select_lowest(scores, masks, k)
    else:
        picks = []
        for c, s, m in zip(layers, scores, masks):
            rem = int(m.sum())
            if rem == 0:
                raise DegenerateLayerError(
                    f"layer {c.name} has no remaining weights to prune"
                )
            k_l = int(np.floor(fraction * rem))
            picks.append(_select_lowest([s], [m], k_l)[0])

    per_layer = {}
    pruned = 0
    for c, p in zip(layers, picks):
        n = int(p.sum())
        if n:
            c.weights.snapshot_init()
            c.weights.mask[p] = 0
            c.weights.w[p] = 0.0
            c.ws3_kernel = None  # stale CSR structure
        per_layer[c.name] = n
        pruned += n
    remaining = int(sum(c.weights.nnz() for c in layers))
    return PruneStepResult(pruned=pruned, remaining=remaining, per_layer=per_layer)


def iterative_prune(
    net: Network,
    schedule: PruneSchedule,
    criterion: PruneCriterion,
    finetune_fn=None,
    grad_source=None,
    eval_fn=None,
):
    """Alternate prune steps with fine-tuning; returns one log row per step.

    finetune_fn(iterations) runs training with masks held fixed and
    returns the final loss (or None). grad_source() supplies averaged
    calibration gradients, required for the fg criterion. eval_fn()
    returns a metrics dict merged into the row.
    """
    if criterion.kind == "fg" and grad_source is None:
        raise ValidationError("fg criterion requires a grad_source")
    total = int(sum(c.weights.size() for c in prunable_layers(net)))
    rows = []
    for step in range(1, schedule.steps + 1):
        avg_grads = grad_source() if criterion.kind == "fg" else None
        res = prune_step(net, criterion, schedule.per_step, avg_grads)
        loss = None
        if finetune_fn is not None and schedule.finetune_iterations > 0:
            loss = finetune_fn(schedule.finetune_iterations)
            if loss is not None and not np.isfinite(loss):
                raise PruneDivergenceError(step, f"fine-tune loss is {loss}")
        row = {
            "step": step,
            "criterion": criterion.tag,
            "per_step_rate": schedule.per_step,
            "pruned": res.pruned,
            "remaining": res.remaining,
            "density": res.remaining / total,
            "finetune_loss": loss,
        }
        if eval_fn is not None:
            row.update(eval_fn())
        rows.append(row)
    return rows


def structural_axis_prune(net: Network, layer_names, axis: str = "z") -> list:
    """Keep only kernel offsets on the given axis for the named layers.

    For axis "z" the surviving offsets have x = y = 0. Layers must have
    a spatial kernel (size > 1). Returns per-layer summary rows.
    """
    axes = {"x": (1, 2), "y": (0, 2), "z": (0, 1)}
    if axis not in axes:
        raise ValidationError(f"axis must be one of x, y, z, got {axis!r}")
    drop_components = axes[axis]
    rows = []
    for name in layer_names:
        conv = net.conv_by_name(name)
        if conv.kernel_size < 2:
            raise ValidationError(
                f"layer {name} has a pointwise kernel; nothing to prune structurally"
            )
        offs = kernel_offsets(conv.kernel_size)
        keep = np.ones(offs.shape[0], dtype=bool)
        for comp in drop_components:
            keep &= offs[:, comp] == 0
        conv.weights.snapshot_init()
        conv.weights.mask[~keep] = 0
        conv.weights.w[~keep] = 0.0
        conv.ws3_kernel = None
        rows.append({
            "layer": name,
            "kept_offsets": int(keep.sum()),
            "total_offsets": int(offs.shape[0]),
            "remaining_weights": conv.weights.nnz(),
            "total_weights": conv.weights.size(),
        })
    return rows


def kernel_density_rows(net: Network, layers=None) -> list:
    """Per-offset surviving density for each conv layer.

    Rows are dicts with keys layer, offset_x, offset_y, offset_z,
    density, ordered by layer then lexicographic offset.
    """
    convs = net.conv_layers()
    if layers is not None:
        wanted = set(layers)
        convs = [c for c in convs if c.name in wanted]
        missing = wanted - {c.name for c in convs}
        if missing:
            raise ValidationError(f"no conv layers named {sorted(missing)}")
    rows = []
    for c in convs:
        offs = kernel_offsets(c.kernel_size)
        dens = c.weights.per_offset_density()
        for o, d in zip(offs, dens):
            rows.append({
                "layer": c.name,
                "offset_x": int(o[0]),
                "offset_y": int(o[1]),
                "offset_z": int(o[2]),
                "density": float(d),
            })
    return rows


def write_csv(path, rows, columns) -> None:
    """Write dict rows with a fixed column order; floats use repr."""
    with open(path, "w", newline="", encoding="ascii") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            out = []
            for col in columns:
                v = row.get(col)
                if v is None:
                    out.append("")
                elif isinstance(v, float):
                    out.append(repr(v))
                else:
                    out.append(str(v))
            writer.writerow(out)


DENSITY_COLUMNS = ("layer", "offset_x", "offset_y", "offset_z", "density")
PRUNE_LOG_COLUMNS = ("step", "criterion", "per_step_rate", "pruned",
                     "remaining", "density", "finetune_loss")
