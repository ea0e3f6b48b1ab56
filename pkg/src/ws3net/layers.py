"""Sparse convolution, batch norm, and ReLU with explicit backward passes.

The functional layer contract: an output voxel at coordinate c receives
sum_i W_i @ f(c + off_i * in_stride) over kernel offsets i, restricted
to input voxels that exist. Per offset the kernel map pairs are unique
in both rows, so plain fancy-index accumulation is exact; offsets are
accumulated sequentially in lexicographic order, which fixes the
floating-point summation order for reproducibility.

Weights carry a binary mask (1 = active). The effective weight is
w * mask everywhere; gradients are masked by the same chain rule, so a
pruned entry never receives updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError, Ws3Error
from .kernel_map import CoordinateManager, KernelMap
from .sparse_tensor import SparseTensor


class ConvWeights:
    """Stacked per-offset kernel matrices with mask and init snapshot.

    Attributes:
        w: (K^3, C_out, C_in) float weights, mutated in place by training.
        mask: uint8 array of the same shape; 0 marks pruned entries.
        w_init: copy of w at initialization time, for drift-based scoring.
            Materialized lazily on first access or first mutation.
    """

    def __init__(self, w: np.ndarray, mask: np.ndarray | None = None,
                 w_init: np.ndarray | None = None):
        w = np.ascontiguousarray(w)
        if w.ndim != 3:
            raise ShapeError(f"weights must be (K^3, C_out, C_in), got {w.shape}")
        if w.dtype not in (np.float32, np.float64):
            raise ValidationError(f"unsupported weight dtype {w.dtype}")
        if mask is None:
            mask = np.ones(w.shape, dtype=np.uint8)
        else:
            mask = np.ascontiguousarray(mask, dtype=np.uint8)
            if mask.shape != w.shape:
                raise ShapeError("mask shape must match weights")
            if not np.isin(mask, (0, 1)).all():
                raise ValidationError("mask entries must be 0 or 1")
        if w_init is not None:
            w_init = np.ascontiguousarray(w_init, dtype=w.dtype)
            if w_init.shape != w.shape:
                raise ShapeError("w_init shape must match weights")
        self.w = w
        self.mask = mask
        self._w_init = w_init

    @classmethod
    def init_kaiming(cls, kernel_volume: int, c_out: int, c_in: int,
                     rng: np.random.Generator, dtype=np.float64) -> "ConvWeights":
        """Uniform(-b, b) with b = sqrt(6 / fan_in), fan_in = K^3 * C_in."""
        bound = float(np.sqrt(6.0 / (kernel_volume * c_in)))
        w = rng.uniform(-bound, bound, size=(kernel_volume, c_out, c_in))
        return cls(w.astype(dtype, copy=False))

    @property
    def w_init(self) -> np.ndarray:
        if self._w_init is None:
            self._w_init = self.w.copy()
        return self._w_init

    def snapshot_init(self) -> None:
        """Materialize w_init. Mutators must call this before touching w."""
        if self._w_init is None:
            self._w_init = self.w.copy()

    @property
    def kernel_volume(self) -> int:
        return self.w.shape[0]

    @property
    def c_out(self) -> int:
        return self.w.shape[1]

    @property
    def c_in(self) -> int:
        return self.w.shape[2]

    def masked(self) -> np.ndarray:
        """Effective weights w * mask (new array)."""
        return self.w * self.mask

    def apply_mask(self) -> None:
        """Zero masked entries of w in place."""
        self.w[self.mask == 0] = 0.0

    def nnz(self) -> int:
        return int(self.mask.sum())

    def size(self) -> int:
        return int(self.mask.size)

    def density(self) -> float:
        return self.nnz() / self.size()

    def per_offset_density(self) -> np.ndarray:
        """(K^3,) fraction of surviving weights per kernel offset."""
        return self.mask.reshape(self.kernel_volume, -1).mean(axis=1)


@dataclass
class ParamView:
    """Uniform handle on a trainable array for optimizers and pruning."""

    name: str
    value: np.ndarray
    grad: np.ndarray
    mask: np.ndarray | None
    kind: str  # "conv_w", "bn_gamma", "bn_beta"
    prunable: bool
    owner: object = None


def _check_conv_args(tensor, weights, km, out_coords):
    if tensor.num_features != weights.c_in:
        raise ShapeError(
            f"input has {tensor.num_features} channels, weights expect {weights.c_in}"
        )
    if weights.kernel_volume != km.volume:
        raise ShapeError(
            f"weights cover {weights.kernel_volume} offsets, map has {km.volume}"
        )
    if km.n_in != tensor.n:
        raise ShapeError(f"map built for {km.n_in} inputs, tensor has {tensor.n}")
    if km.n_out != out_coords.shape[0]:
        raise ShapeError(
            f"map built for {km.n_out} outputs, out_coords has {out_coords.shape[0]}"
        )


def dense_conv_apply(x: np.ndarray, w_eff: np.ndarray, km: KernelMap) -> np.ndarray:
    """Gather-matmul-scatter over the kernel map with dense weights."""
    out = np.zeros((km.n_out, w_eff.shape[1]), dtype=x.dtype)
    for i in range(km.volume):
        a, b = km.pairs(i)
        if a.shape[0] == 0:
            continue
        out[b] += x[a] @ w_eff[i].T
    return out


def sparse_conv_forward(
    tensor: SparseTensor,
    weights: ConvWeights,
    km: KernelMap,
    out_coords: np.ndarray,
    out_index=None,
) -> SparseTensor:
    """Dense-weight sparse convolution over a prebuilt kernel map."""
    _check_conv_args(tensor, weights, km, out_coords)
    out = dense_conv_apply(tensor.features, weights.masked(), km)
    if km.transposed:
        out_stride = tensor.stride // km.stride
    else:
        out_stride = tensor.stride * km.stride
    return SparseTensor(out_coords, out, stride=out_stride, index=out_index)


def sparse_conv_backward(
    grad_out: np.ndarray,
    in_features: np.ndarray,
    weights: ConvWeights,
    km: KernelMap,
):
    """Gradients of the conv output sum w.r.t. inputs and weights.

    Returns:
        (grad_in, grad_w): grad_w is already masked, matching the
        derivative through the effective weight w * mask.
    """
    if grad_out.shape != (km.n_out, weights.c_out):
        raise ShapeError(f"grad_out must be ({km.n_out}, {weights.c_out})")
    w_eff = weights.masked()
    grad_in = np.zeros_like(in_features)
    grad_w = np.zeros_like(weights.w)
    for i in range(km.volume):
        a, b = km.pairs(i)
        if a.shape[0] == 0:
            continue
        go = grad_out[b]
        grad_w[i] = go.T @ in_features[a]
        grad_in[a] += go @ w_eff[i]
    grad_w *= weights.mask
    return grad_in, grad_w


def relu_forward(x: np.ndarray):
    keep = x > 0
    return x * keep, keep


def relu_backward(grad_y: np.ndarray, keep: np.ndarray) -> np.ndarray:
    return grad_y * keep


def batchnorm_forward(x: np.ndarray, gamma, beta, running_mean, running_var,
                      eps: float, momentum: float, train: bool):
    """Per-channel batch norm over all rows of a sparse tensor.

    Training normalizes by the biased batch variance and updates running
    stats in place (running_var with the unbiased estimate when n > 1).
    Eval normalizes by the running statistics.

    Returns:
        (y, ctx) where ctx feeds batchnorm_backward.
    """
    n = x.shape[0]
    if train:
        if n == 0:
            raise ValidationError("batch norm needs at least one row in training")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean
        inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - mean) * inv
    y = gamma * xhat + beta
    return y, (xhat, inv, train)


def batchnorm_backward(grad_y: np.ndarray, gamma, ctx):
    """Returns (grad_x, grad_gamma, grad_beta) for the saved forward."""
    xhat, inv, train = ctx
    grad_gamma = (grad_y * xhat).sum(axis=0)
    grad_beta = grad_y.sum(axis=0)
    g = grad_y * gamma
    if train:
        n = grad_y.shape[0]
        grad_x = (inv / n) * (n * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0))
    else:
        grad_x = g * inv
    return grad_x, grad_gamma, grad_beta


class SparseConv:
    """Convolution module owning weights, gradient buffer, and stride rule.

    kernel_size 1 with stride 1 short-circuits to a plain row-wise matmul
    (no kernel map); other shapes pull maps and output coordinates from
    the CoordinateManager passed to forward.
    """

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel_size: int, stride: int = 1, transposed: bool = False,
                 prunable: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        if rng is None:
            rng = np.random.default_rng(0)
        self.name = name
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.transposed = bool(transposed)
        self.prunable = bool(prunable)
        volume = self.kernel_size ** 3
        self.weights = ConvWeights.init_kaiming(
            volume, out_channels, in_channels, rng, dtype=dtype
        )
        # np.zeros reserves lazily (calloc); zeros_like would touch every page
        self.grad_w = np.zeros(self.weights.w.shape, dtype=self.weights.w.dtype)
        self.ws3_kernel = None  # set by compile_ws3()
        self._ctx = None

    @property
    def is_pointwise(self) -> bool:
        return self.kernel_size == 1 and self.stride == 1 and not self.transposed

    def forward(self, t: SparseTensor, mgr: CoordinateManager, train: bool = True,
                weight_mode: str = "dense") -> SparseTensor:
        if weight_mode not in ("dense", "ws3"):
            raise ValidationError(f"unknown weight_mode {weight_mode!r}")
        if weight_mode == "ws3" and self.ws3_kernel is None:
            raise Ws3Error(f"layer {self.name}: no compiled CSR kernel")
        if self.is_pointwise:
            if t.num_features != self.in_channels:
                raise ShapeError(
                    f"layer {self.name}: input has {t.num_features} channels, "
                    f"expected {self.in_channels}"
                )
            if weight_mode == "ws3":
                from .ws3 import pointwise_forward

                y = pointwise_forward(t.features, self.ws3_kernel)
            else:
                w0 = self.weights.masked()[0]
                y = t.features @ w0.T
            if train:
                self._ctx = (t.features, None)
            return t.replace_features(y)

        if self.transposed:
            out_stride = t.stride // self.stride
        else:
            out_stride = t.stride * self.stride
        out_coords, out_index = mgr.coords_at(out_stride)
        km = mgr.kernel_map(t.stride, out_stride, self.kernel_size, self.transposed)
        if weight_mode == "ws3":
            from .ws3 import ws3_conv_forward

            out = ws3_conv_forward(t, self.ws3_kernel, km, out_coords, out_index)
        else:
            out = sparse_conv_forward(t, self.weights, km, out_coords, out_index)
        if train:
            self._ctx = (t.features, km)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._ctx is None:
            raise Ws3Error(f"layer {self.name}: backward before forward")
        x, km = self._ctx
        if km is None:
            w0 = self.weights.masked()[0]
            gw = grad_out.T @ x
            self.grad_w[0] += gw * self.weights.mask[0]
            return grad_out @ w0
        grad_in, gw = sparse_conv_backward(grad_out, x, self.weights, km)
        self.grad_w += gw
        return grad_in

    def zero_grad(self) -> None:
        self.grad_w[...] = 0.0

    def param_views(self):
        return [
            ParamView(
                name=f"{self.name}.w",
                value=self.weights.w,
                grad=self.grad_w,
                mask=self.weights.mask,
                kind="conv_w",
                prunable=self.prunable,
                owner=self.weights,
            )
        ]


class BatchNorm:
    """Batch norm over tensor rows, one statistic per channel."""

    def __init__(self, name: str, channels: int, eps: float = 1e-5,
                 momentum: float = 0.1, dtype=np.float64):
        self.name = name
        self.channels = int(channels)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.grad_gamma = np.zeros(channels, dtype=dtype)
        self.grad_beta = np.zeros(channels, dtype=dtype)
        self._ctx = None

    def forward(self, t: SparseTensor, train: bool = True) -> SparseTensor:
        if t.num_features != self.channels:
            raise ShapeError(
                f"layer {self.name}: input has {t.num_features} channels, "
                f"expected {self.channels}"
            )
        y, ctx = batchnorm_forward(
            t.features, self.gamma, self.beta, self.running_mean,
            self.running_var, self.eps, self.momentum, train,
        )
        self._ctx = ctx
        return t.replace_features(y)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        grad_x, gg, gb = batchnorm_backward(grad_y, self.gamma, self._ctx)
        self.grad_gamma += gg
        self.grad_beta += gb
        return grad_x

    def zero_grad(self) -> None:
        self.grad_gamma[...] = 0.0
        self.grad_beta[...] = 0.0

    def param_views(self):
        return [
            ParamView(f"{self.name}.gamma", self.gamma, self.grad_gamma,
                      None, "bn_gamma", False, self),
            ParamView(f"{self.name}.beta", self.beta, self.grad_beta,
                      None, "bn_beta", False, self),
        ]


class ReLU:
    """Rectifier with saved activation mask for backward."""

    def __init__(self):
        self._keep = None

    def forward(self, t: SparseTensor) -> SparseTensor:
        y, keep = relu_forward(t.features)
        self._keep = keep
        return t.replace_features(y)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        return relu_backward(grad_y, self._keep)


class ResidualBlock:
    """conv-bn-relu-conv-bn plus identity (or projected) shortcut, then relu.

    The projection (1x1x1 conv + bn) appears only when channel counts
    differ. All convs are 3x3x3 stride 1, so every intermediate tensor
    shares the block input's coordinates.
    """

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.name = name
        self.conv1 = SparseConv(f"{name}.conv1", in_channels, out_channels, 3,
                                rng=rng, dtype=dtype)
        self.bn1 = BatchNorm(f"{name}.bn1", out_channels, dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = SparseConv(f"{name}.conv2", out_channels, out_channels, 3,
                                rng=rng, dtype=dtype)
        self.bn2 = BatchNorm(f"{name}.bn2", out_channels, dtype=dtype)
        if in_channels != out_channels:
            self.proj = SparseConv(f"{name}.proj", in_channels, out_channels, 1,
                                   rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm(f"{name}.proj_bn", out_channels, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None
        self.relu_out = ReLU()

    def forward(self, t: SparseTensor, mgr: CoordinateManager, train: bool = True,
                weight_mode: str = "dense") -> SparseTensor:
        h = self.conv1.forward(t, mgr, train, weight_mode)
        h = self.bn1.forward(h, train)
        h = self.relu1.forward(h)
        h = self.conv2.forward(h, mgr, train, weight_mode)
        h = self.bn2.forward(h, train)
        if self.proj is not None:
            s = self.proj.forward(t, mgr, train, weight_mode)
            s = self.proj_bn.forward(s, train)
        else:
            s = t
        summed = h.replace_features(h.features + s.features)
        return self.relu_out.forward(summed)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        g = self.relu_out.backward(grad)
        gm = self.bn2.backward(g)
        gm = self.conv2.backward(gm)
        gm = self.relu1.backward(gm)
        gm = self.bn1.backward(gm)
        gm = self.conv1.backward(gm)
        if self.proj is not None:
            gs = self.proj_bn.backward(g)
            gs = self.proj.backward(gs)
        else:
            gs = g
        return gm + gs

    def modules(self):
        mods = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.proj is not None:
            mods += [self.proj, self.proj_bn]
        return mods

    def param_views(self):
        views = []
        for m in self.modules():
            views.extend(m.param_views())
        return views

    def zero_grad(self) -> None:
        for m in self.modules():
            m.zero_grad()
