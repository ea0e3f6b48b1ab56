"""CSR-backed weight-sparse convolution and the layer benchmark.

The weight-sparse path rewrites each kernel offset's dense matmul as a
sparse-matrix times dense-matrix product: gather the offset's input
rows, transpose to channel-major, multiply by the offset's CSR weight
matrix from the left, and scatter-accumulate the transposed result into
the output rows. Offsets with no pairs or no surviving weights are
skipped entirely, which is where the speedup at high sparsity comes
from.

The SpMM accumulates each output row strictly in ascending column-index
order, so results are bit-reproducible run to run. The data-movement
kernels are compiled (numba, single-threaded); a pure-BLAS formulation
spends more time transposing gathers than the matmuls save, and loses
to the dense path outright on one core.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ShapeError, ValidationError, Ws3Error
from .kernel_map import KernelMap, build_kernel_map
from .sparse_tensor import SparseTensor


@njit(cache=True)
def _gather_t(x, idx, out):
    """out[c, k] = x[idx[k], c], blocked over k for cache locality."""
    n = idx.shape[0]
    channels = x.shape[1]
    for k0 in range(0, n, 32):
        k1 = min(k0 + 32, n)
        for c in range(channels):
            for k in range(k0, k1):
                out[c, k] = x[idx[k], c]


@njit(cache=True)
def _spmm_csr(row_ptr, col_idx, values, xt, y):
    """y += csr @ xt, accumulating columns of each row in ascending order."""
    for r in range(row_ptr.shape[0] - 1):
        for j in range(row_ptr[r], row_ptr[r + 1]):
            v = values[j]
            row = col_idx[j]
            for b in range(xt.shape[1]):
                y[r, b] += v * xt[row, b]


@njit(cache=True)
def _scatter_t_add(out, idx, y):
    """out[idx[k], c] += y[c, k], blocked over k."""
    n = idx.shape[0]
    channels = y.shape[0]
    for k0 in range(0, n, 32):
        k1 = min(k0 + 32, n)
        for c in range(channels):
            for k in range(k0, k1):
                out[idx[k], c] += y[c, k]


@dataclass
class CsrMatrix:
    """Compressed sparse rows; column indices ascend within each row.

    Entries present in the structure are "stored", including explicit
    zeros: structure tracks the pruning mask, not the weight values.
    """

    nrows: int
    ncols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.col_idx.shape[0])

    def validate(self) -> None:
        rp, ci, v = self.row_ptr, self.col_idx, self.values
        if rp.shape != (self.nrows + 1,):
            raise ShapeError(f"row_ptr must have {self.nrows + 1} entries")
        if rp[0] != 0 or rp[-1] != ci.shape[0] or ci.shape != v.shape:
            raise ValidationError("row_ptr endpoints disagree with nnz")
        if (np.diff(rp) < 0).any():
            raise ValidationError("row_ptr must be non-decreasing")
        if ci.shape[0]:
            if ci.min() < 0 or ci.max() >= self.ncols:
                raise ValidationError("col_idx out of range")
        for r in range(self.nrows):
            cs = ci[rp[r]:rp[r + 1]]
            if cs.shape[0] > 1 and (np.diff(cs) <= 0).any():
                raise ValidationError(f"col_idx not strictly ascending in row {r}")

    def densify(self) -> np.ndarray:
        out = np.zeros((self.nrows, self.ncols), dtype=self.values.dtype)
        for r in range(self.nrows):
            sl = slice(self.row_ptr[r], self.row_ptr[r + 1])
            out[r, self.col_idx[sl]] = self.values[sl]
        return out


def csr_from_masked(w: np.ndarray, mask: np.ndarray) -> CsrMatrix:
    """CSR over mask-selected entries of w; zeros under the mask stay stored."""
    if w.ndim != 2 or mask.shape != w.shape:
        raise ShapeError("w and mask must be matching 2-d arrays")
    r_idx, c_idx = np.nonzero(mask)
    counts = np.bincount(r_idx, minlength=w.shape[0])
    row_ptr = np.zeros(w.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=row_ptr[1:])
    return CsrMatrix(
        nrows=w.shape[0],
        ncols=w.shape[1],
        row_ptr=row_ptr,
        col_idx=c_idx.astype(np.int64),
        values=np.ascontiguousarray(w[r_idx, c_idx]),
    )


def spmm(csr: CsrMatrix, x: np.ndarray) -> np.ndarray:
    """csr @ x with deterministic ascending-column accumulation per row."""
    if x.ndim != 2 or x.shape[0] != csr.ncols:
        raise ShapeError(f"x must be ({csr.ncols}, B), got {x.shape}")
    x = np.ascontiguousarray(x)
    y = np.zeros((csr.nrows, x.shape[1]), dtype=x.dtype)
    _spmm_csr(csr.row_ptr, csr.col_idx, csr.values.astype(x.dtype, copy=False), x, y)
    return y


@dataclass
class Ws3Kernel:
    """Per-offset CSR weight matrices for one conv layer."""

    csr: list
    kernel_volume: int
    c_out: int
    c_in: int
    dtype: np.dtype = field(default=np.dtype(np.float64))

    @classmethod
    def from_weights(cls, weights) -> "Ws3Kernel":
        """Build from any object with (K^3, C_out, C_in) .w and .mask."""
        w, mask = weights.w, weights.mask
        mats = [csr_from_masked(w[i], mask[i]) for i in range(w.shape[0])]
        return cls(mats, w.shape[0], w.shape[1], w.shape[2], w.dtype)

    def nnz(self) -> int:
        return int(sum(m.nnz for m in self.csr))

    def density(self) -> float:
        total = self.kernel_volume * self.c_out * self.c_in
        return self.nnz() / total


def ws3_conv_apply(x: np.ndarray, kernel: Ws3Kernel, km: KernelMap) -> np.ndarray:
    """Gather -> transpose -> SpMM -> scatter over all kernel offsets.

    Transposed staging buffers are allocated once at the largest pair
    count and reused across offsets.
    """
    if km.volume != kernel.kernel_volume:
        raise ShapeError(
            f"kernel covers {kernel.kernel_volume} offsets, map has {km.volume}"
        )
    if x.shape[1] != kernel.c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {kernel.c_in}")
    out = np.zeros((km.n_out, kernel.c_out), dtype=x.dtype)
    bmax = max((a.shape[0] for a in km.in_rows), default=0)
    if bmax == 0:
        return out
    xt = np.empty((kernel.c_in, bmax), dtype=x.dtype)
    y = np.empty((kernel.c_out, bmax), dtype=x.dtype)
    x = np.ascontiguousarray(x)
    for i in range(km.volume):
        a, b = km.pairs(i)
        n = a.shape[0]
        mat = kernel.csr[i]
        if n == 0 or mat.nnz == 0:
            continue
        xt_v = xt[:, :n]
        y_v = y[:, :n]
        _gather_t(x, a, xt_v)
        y_v[...] = 0.0
        _spmm_csr(mat.row_ptr, mat.col_idx,
                  mat.values.astype(x.dtype, copy=False), xt_v, y_v)
        _scatter_t_add(out, b, y_v)
    return out


def pointwise_apply(x: np.ndarray, kernel: Ws3Kernel) -> np.ndarray:
    """1x1x1 conv via a single SpMM on channel-major features."""
    if kernel.kernel_volume != 1:
        raise ShapeError("pointwise apply needs a single-offset kernel")
    yt = spmm(kernel.csr[0], np.ascontiguousarray(x.T))
    return np.ascontiguousarray(yt.T)


# name kept alongside ws3_conv_forward for the module-level fast path
pointwise_forward = pointwise_apply


def ws3_conv_forward(
    tensor: SparseTensor,
    kernel: Ws3Kernel,
    km: KernelMap,
    out_coords: np.ndarray,
    out_index=None,
) -> SparseTensor:
    """Weight-sparse convolution producing a tensor at the mapped stride."""
    if km.n_in != tensor.n:
        raise ShapeError(f"map built for {km.n_in} inputs, tensor has {tensor.n}")
    if km.n_out != out_coords.shape[0]:
        raise ShapeError(
            f"map built for {km.n_out} outputs, out_coords has {out_coords.shape[0]}"
        )
    out = ws3_conv_apply(tensor.features, kernel, km)
    if km.transposed:
        out_stride = tensor.stride // km.stride
    else:
        out_stride = tensor.stride * km.stride
    return SparseTensor(out_coords, out, stride=out_stride, index=out_index)


def conv_macs(km: KernelMap, c_in: int, c_out: int) -> int:
    """Dense-path multiply-accumulates: pairs * C_in * C_out."""
    return km.total_pairs() * int(c_in) * int(c_out)


def ws3_macs(km: KernelMap, kernel: Ws3Kernel) -> int:
    """Weight-sparse multiply-accumulates: per offset, pairs * stored nnz."""
    total = 0
    for i in range(km.volume):
        total += km.in_rows[i].shape[0] * kernel.csr[i].nnz
    return total


BENCH_COLUMNS = ("layer", "N_in", "N_out", "occupancy", "sparsity",
                 "dense_ms", "ws3_ms", "speedup", "dense_macs", "ws3_macs")


def _median_ms(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def bench_layer(
    c_in: int,
    c_out: int,
    occupancy: int,
    sparsity: float,
    kernel_size: int = 3,
    reps: int = 5,
    seed: int = 0,
    dtype=np.float64,
    verify: bool = True,
) -> dict:
    """Time one synthetic conv layer on both weight paths.

    occupancy is the voxel count; coordinates are drawn without
    replacement from a grid roughly twice that size. sparsity is the
    pruned fraction of weight entries, placed uniformly at random.
    Returns a dict keyed by BENCH_COLUMNS.
    """
    from .layers import ConvWeights, dense_conv_apply

    if not (0.0 <= sparsity <= 1.0):
        raise ValidationError(f"sparsity must be in [0, 1], got {sparsity}")
    if occupancy < 1:
        raise ValidationError("occupancy must be positive")
    rng = np.random.default_rng(seed)
    extent = int(np.ceil((2.0 * occupancy) ** (1.0 / 3.0))) + 1
    flat = rng.choice(extent ** 3, size=occupancy, replace=False)
    xyz = np.stack(np.unravel_index(flat, (extent, extent, extent)), axis=1)
    coords = np.column_stack([np.zeros(occupancy, dtype=np.int64), xyz]).astype(np.int64)
    coords = coords[np.lexsort((coords[:, 3], coords[:, 2], coords[:, 1], coords[:, 0]))]
    x = rng.normal(size=(occupancy, c_in)).astype(dtype)
    tensor = SparseTensor(coords, x)

    volume = kernel_size ** 3
    w = rng.normal(size=(volume, c_out, c_in)).astype(dtype)
    size = w.size
    pruned = int(np.floor(sparsity * size))
    mask = np.ones(size, dtype=np.uint8)
    mask[rng.choice(size, size=pruned, replace=False)] = 0
    weights = ConvWeights(w, mask=mask.reshape(w.shape))

    km = build_kernel_map(tensor, coords, kernel_size, stride=1)
    kernel = Ws3Kernel.from_weights(weights)
    w_eff = weights.masked()

    dense_out = dense_conv_apply(x, w_eff, km)
    ws3_out = ws3_conv_apply(x, kernel, km)  # also warms the jit kernels
    if verify:
        err = float(np.abs(dense_out - ws3_out).max())
        tol = 1e-8 if dtype == np.float64 else 1e-2
        if err > tol:
            raise Ws3Error(f"weight paths disagree by {err}")

    dense_ms = _median_ms(lambda: dense_conv_apply(x, w_eff, km), reps)
    ws3_ms = _median_ms(lambda: ws3_conv_apply(x, kernel, km), reps)
    return {
        "layer": "synthetic",
        "N_in": int(c_in),
        "N_out": int(c_out),
        "occupancy": int(occupancy),
        "sparsity": float(sparsity),
        "dense_ms": dense_ms,
        "ws3_ms": ws3_ms,
        "speedup": dense_ms / ws3_ms if ws3_ms > 0 else float("inf"),
        "dense_macs": conv_macs(km, c_in, c_out),
        "ws3_macs": ws3_macs(km, kernel),
    }


def bench_network(net, tensor: SparseTensor, reps: int = 3) -> list:
    """Per-layer and whole-network timings of dense vs weight-sparse paths.

    Runs one training-mode forward to record each conv's input features
    and kernel map, then times both appliers per layer. The final row
    ("TOTAL") times complete eval-mode forward passes instead, so it
    includes gather overheads exactly as inference pays them.
    """
    from .layers import dense_conv_apply

    net.compile_ws3()
    net.forward(tensor, train=True)  # populate ctx on every conv
    rows = []
    for conv in net.conv_layers():
        if conv._ctx is None:
            continue
        x, km = conv._ctx
        kernel = conv.ws3_kernel
        w_eff = conv.weights.masked()
        occ = x.shape[0]
        sparsity = 1.0 - conv.weights.density()
        if km is None:
            w0 = np.ascontiguousarray(w_eff[0])
            dense_ms = _median_ms(lambda: x @ w0.T, reps)
            ws3_ms = _median_ms(lambda: pointwise_apply(x, kernel), reps)
            dense_macs = occ * conv.in_channels * conv.out_channels
            wmacs = occ * kernel.csr[0].nnz
        else:
            dense_ms = _median_ms(lambda: dense_conv_apply(x, w_eff, km), reps)
            ws3_ms = _median_ms(lambda: ws3_conv_apply(x, kernel, km), reps)
            dense_macs = conv_macs(km, conv.in_channels, conv.out_channels)
            wmacs = ws3_macs(km, kernel)
        rows.append({
            "layer": conv.name,
            "N_in": conv.in_channels,
            "N_out": conv.out_channels,
            "occupancy": occ,
            "sparsity": sparsity,
            "dense_ms": dense_ms,
            "ws3_ms": ws3_ms,
            "speedup": dense_ms / ws3_ms if ws3_ms > 0 else float("inf"),
            "dense_macs": dense_macs,
            "ws3_macs": wmacs,
        })

    dense_total = _median_ms(
        lambda: net.forward(tensor, train=False, weight_mode="dense"), reps
    )
    ws3_total = _median_ms(
        lambda: net.forward(tensor, train=False, weight_mode="ws3"), reps
    )
    rows.append({
        "layer": "TOTAL",
        "N_in": tensor.num_features,
        "N_out": net.spec.num_classes,
        "occupancy": tensor.n,
        "sparsity": 1.0 - (count_nnz(net) / count_size(net)),
        "dense_ms": dense_total,
        "ws3_ms": ws3_total,
        "speedup": dense_total / ws3_total if ws3_total > 0 else float("inf"),
        "dense_macs": sum(r["dense_macs"] for r in rows),
        "ws3_macs": sum(r["ws3_macs"] for r in rows),
    })
    return rows


def count_nnz(net) -> int:
    return sum(c.weights.nnz() for c in net.conv_layers())


def count_size(net) -> int:
    return sum(c.weights.size() for c in net.conv_layers())
