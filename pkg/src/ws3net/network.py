"""Residual sparse U-Net assembly and parameter accounting.

The reference layout follows the 16-level residual U-Net family: a
3x3x3 stem, four 2x2x2 stride-2 downsampling convs each followed by a
stack of residual blocks, four transposed 2x2x2 stride-2 upsampling
convs whose outputs are concatenated with the matching encoder stage,
each followed by another block stack, and a pointwise classifier. All
convolutions are bias-free; batch norm follows every conv except the
heads. The optional offset head regresses per-voxel 3-vectors from the
last decoder stage.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .kernel_map import CoordinateManager
from .layers import BatchNorm, ReLU, ResidualBlock, SparseConv
from .sparse_tensor import SparseTensor

# architecture name -> (planes, repeats); planes are the block output
# widths of the four encoder and four decoder stages
ARCH_PRESETS = {
    "res16unet14a": ((32, 64, 128, 256, 128, 128, 96, 96), (1,) * 8),
    "res16unet18a": ((32, 64, 128, 256, 128, 128, 96, 96), (2,) * 8),
    "res16unet34c": ((32, 64, 128, 256, 256, 128, 96, 96), (2, 3, 4, 6, 2, 2, 2, 2)),
}

INIT_DIM = 32


@dataclass
class NetworkSpec:
    """Everything needed to rebuild a network with identical weights.

    architecture names a preset or "custom"; custom requires explicit
    planes and repeats (8 entries each). width_multiplier scales every
    channel count as max(1, floor(c * m + 0.5)).
    """

    architecture: str = "res16unet14a"
    in_channels: int = 3
    num_classes: int = 20
    width_multiplier: float = 1.0
    offset_head: bool = False
    seed: int = 0
    dtype: str = "float64"
    bn_momentum: float = 0.1
    init_dim: int = INIT_DIM
    planes: tuple = field(default_factory=tuple)
    repeats: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.architecture in ARCH_PRESETS:
            preset_planes, preset_repeats = ARCH_PRESETS[self.architecture]
            if not self.planes:
                self.planes = preset_planes
            if not self.repeats:
                self.repeats = preset_repeats
        elif self.architecture != "custom":
            raise ConfigError(
                f"unknown architecture {self.architecture!r}; "
                f"expected one of {sorted(ARCH_PRESETS)} or 'custom'"
            )
        self.planes = tuple(int(p) for p in self.planes)
        self.repeats = tuple(int(r) for r in self.repeats)
        if len(self.planes) != 8 or len(self.repeats) != 8:
            raise ConfigError("planes and repeats must both have 8 entries")
        if min(self.planes) < 1 or min(self.repeats) < 1 or self.init_dim < 1:
            raise ConfigError("planes, repeats, and init_dim must be positive")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("need in_channels >= 1 and num_classes >= 2")
        if not (self.width_multiplier > 0):
            raise ConfigError("width_multiplier must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    def scaled(self, channels: int) -> int:
        return max(1, int(math.floor(channels * self.width_multiplier + 0.5)))

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["planes"] = tuple(d.get("planes", ()))
        d["repeats"] = tuple(d.get("repeats", ()))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown network spec fields {sorted(unknown)}")
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def spec_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("ascii")).hexdigest()


class Network:
    """A built residual sparse U-Net with explicit forward and backward.

    Module construction order (and therefore weight-init consumption and
    the canonical layer order used by pruning) is: stem, then encoder
    stage by stage, decoder stage by stage, classifier, offset head.
    """

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        dtype = spec.np_dtype()
        rng = np.random.default_rng(spec.seed)
        d0 = spec.scaled(spec.init_dim)
        p = [spec.scaled(c) for c in spec.planes]
        self.conv0 = SparseConv("conv0", spec.in_channels, d0, 3, rng=rng, dtype=dtype)
        self.bn0 = BatchNorm("bn0", d0, momentum=spec.bn_momentum, dtype=dtype)
        self.relu0 = ReLU()

        self.enc_convs = []
        self.enc_bns = []
        self.enc_relus = []
        self.enc_stages = []
        ch = d0
        for s in range(4):
            conv = SparseConv(f"conv{s + 1}", ch, ch, 2, stride=2, rng=rng, dtype=dtype)
            self.enc_convs.append(conv)
            self.enc_bns.append(
                BatchNorm(f"bn{s + 1}", ch, momentum=spec.bn_momentum, dtype=dtype)
            )
            self.enc_relus.append(ReLU())
            blocks = []
            for j in range(spec.repeats[s]):
                blocks.append(
                    ResidualBlock(f"block{s + 1}_{j}", ch, p[s], rng=rng, dtype=dtype)
                )
                ch = p[s]
            self.enc_stages.append(blocks)

        # encoder tensors available for skip concatenation, fine to coarse
        skip_ch = [d0, p[0], p[1], p[2]]

        self.dec_convs = []
        self.dec_bns = []
        self.dec_relus = []
        self.dec_stages = []
        for s in range(4):
            out_ch = p[4 + s]
            conv = SparseConv(
                f"convtr{4 + s}", ch, out_ch, 2, stride=2, transposed=True,
                rng=rng, dtype=dtype,
            )
            self.dec_convs.append(conv)
            self.dec_bns.append(
                BatchNorm(f"bntr{4 + s}", out_ch, momentum=spec.bn_momentum, dtype=dtype)
            )
            self.dec_relus.append(ReLU())
            ch = out_ch + skip_ch[3 - s]
            blocks = []
            for j in range(spec.repeats[4 + s]):
                blocks.append(
                    ResidualBlock(f"block{5 + s}_{j}", ch, out_ch, rng=rng, dtype=dtype)
                )
                ch = out_ch
            self.dec_stages.append(blocks)

        self.final = SparseConv("final", ch, spec.num_classes, 1, prunable=False,
                                rng=rng, dtype=dtype)
        if spec.offset_head:
            self.offset0 = SparseConv("offset0", ch, ch, 1, prunable=False,
                                      rng=rng, dtype=dtype)
            self.offset_bn = BatchNorm("offset_bn", ch, momentum=spec.bn_momentum,
                                       dtype=dtype)
            self.offset_relu = ReLU()
            self.offset1 = SparseConv("offset1", ch, 3, 1, prunable=False,
                                      rng=rng, dtype=dtype)
        else:
            self.offset0 = None
            self.offset_bn = None
            self.offset_relu = None
            self.offset1 = None

    # ----- module iteration -----

    def modules(self):
        mods = [self.conv0, self.bn0]
        for s in range(4):
            mods += [self.enc_convs[s], self.enc_bns[s]]
            mods += self.enc_stages[s]
        for s in range(4):
            mods += [self.dec_convs[s], self.dec_bns[s]]
            mods += self.dec_stages[s]
        mods.append(self.final)
        if self.offset0 is not None:
            mods += [self.offset0, self.offset_bn, self.offset1]
        return mods

    def conv_layers(self):
        """All SparseConv modules in canonical layer order."""
        convs = []
        for m in self.modules():
            if isinstance(m, SparseConv):
                convs.append(m)
            elif isinstance(m, ResidualBlock):
                convs.extend(x for x in m.modules() if isinstance(x, SparseConv))
        return convs

    def conv_by_name(self, name: str) -> SparseConv:
        for c in self.conv_layers():
            if c.name == name:
                return c
        raise ValidationError(f"no conv layer named {name!r}")

    def param_views(self):
        views = []
        for m in self.modules():
            views.extend(m.param_views())
        return views

    def zero_grad(self):
        for m in self.modules():
            if hasattr(m, "zero_grad"):
                m.zero_grad()

    # ----- forward / backward -----

    def forward(self, t: SparseTensor, train: bool = True,
                mgr: CoordinateManager | None = None,
                weight_mode: str = "dense"):
        """Returns (logits, offsets); offsets is None without the head."""
        if t.num_features != self.spec.in_channels:
            raise ShapeError(
                f"network expects {self.spec.in_channels} input channels, "
                f"got {t.num_features}"
            )
        if mgr is None:
            mgr = CoordinateManager(t)
        x = self.conv0.forward(t, mgr, train, weight_mode)
        x = self.bn0.forward(x, train)
        x = self.relu0.forward(x)
        skips = [x]
        for s in range(4):
            x = self.enc_convs[s].forward(x, mgr, train, weight_mode)
            x = self.enc_bns[s].forward(x, train)
            x = self.enc_relus[s].forward(x)
            for block in self.enc_stages[s]:
                x = block.forward(x, mgr, train, weight_mode)
            if s < 3:
                skips.append(x)
        for s in range(4):
            x = self.dec_convs[s].forward(x, mgr, train, weight_mode)
            x = self.dec_bns[s].forward(x, train)
            x = self.dec_relus[s].forward(x)
            x = self._cat(x, skips[3 - s])
            for block in self.dec_stages[s]:
                x = block.forward(x, mgr, train, weight_mode)
        logits = self.final.forward(x, mgr, train, weight_mode)
        offsets = None
        if self.offset0 is not None:
            h = self.offset0.forward(x, mgr, train, weight_mode)
            h = self.offset_bn.forward(h, train)
            h = self.offset_relu.forward(h)
            offsets = self.offset1.forward(h, mgr, train, weight_mode)
        return logits, offsets

    @staticmethod
    def _cat(a: SparseTensor, b: SparseTensor) -> SparseTensor:
        if a.coords is not b.coords and not np.array_equal(a.coords, b.coords):
            raise ShapeError("skip concatenation requires aligned coordinates")
        feats = np.concatenate([a.features, b.features], axis=1)
        return SparseTensor(a.coords, feats, stride=a.stride, index=a.index)

    def backward(self, grad_logits: np.ndarray,
                 grad_offsets: np.ndarray | None = None) -> np.ndarray:
        """Accumulate parameter gradients; returns grad w.r.t. input features."""
        g = self.final.backward(grad_logits)
        if self.offset0 is not None and grad_offsets is not None:
            go = self.offset1.backward(grad_offsets)
            go = self.offset_relu.backward(go)
            go = self.offset_bn.backward(go)
            go = self.offset0.backward(go)
            g = g + go
        skip_grads = [None] * 4
        for s in range(3, -1, -1):
            for block in reversed(self.dec_stages[s]):
                g = block.backward(g)
            main_ch = self.dec_convs[s].out_channels
            g_main, g_skip = g[:, :main_ch], g[:, main_ch:]
            skip_grads[3 - s] = g_skip
            g = self.dec_relus[s].backward(g_main)
            g = self.dec_bns[s].backward(g)
            g = self.dec_convs[s].backward(g)
        for s in range(3, -1, -1):
            if s < 3:
                g = g + skip_grads[s + 1]
            for block in reversed(self.enc_stages[s]):
                g = block.backward(g)
            g = self.enc_relus[s].backward(g)
            g = self.enc_bns[s].backward(g)
            g = self.enc_convs[s].backward(g)
        g = g + skip_grads[0]
        g = self.relu0.backward(g)
        g = self.bn0.backward(g)
        return self.conv0.backward(g)

    # ----- weight-sparse inference -----

    def compile_ws3(self):
        """Build CSR kernels from current masked weights for every conv."""
        from .ws3 import Ws3Kernel

        for conv in self.conv_layers():
            conv.ws3_kernel = Ws3Kernel.from_weights(conv.weights)

    def clear_ws3(self):
        for conv in self.conv_layers():
            conv.ws3_kernel = None


def build_network(spec: NetworkSpec) -> Network:
    return Network(spec)


def count_params(net: Network, only_prunable: bool = False) -> int:
    """Surviving (unmasked) parameters.

    Conv weights count mask nonzeros; batch norm contributes gamma and
    beta (running statistics are buffers, not parameters). With
    only_prunable, heads and batch norm are excluded.
    """
    total = 0
    for conv in net.conv_layers():
        if conv.prunable:
            total += conv.weights.nnz()
        elif not only_prunable:
            total += conv.weights.nnz()
    if not only_prunable:
        for m in net.modules():
            for v in (m.param_views() if hasattr(m, "param_views") else []):
                if v.kind in ("bn_gamma", "bn_beta"):
                    total += v.value.size
    return total


def param_breakdown(net: Network):
    """Per-layer rows (name, kind, surviving, total) covering all params."""
    rows = []
    for conv in net.conv_layers():
        kind = "conv" if conv.prunable else "conv_head"
        rows.append((conv.name, kind, conv.weights.nnz(), conv.weights.size()))
    for m in net.modules():
        for v in (m.param_views() if hasattr(m, "param_views") else []):
            if v.kind in ("bn_gamma", "bn_beta"):
                rows.append((v.name, "bn", v.value.size, v.value.size))
    return rows
