"""Kernel offset enumeration and input/output pair maps for sparse conv.

A kernel map holds, per kernel offset, the (input_row, output_row) pairs
that offset connects. An output voxel at coordinate c (stride multiples)
receives contributions from input voxels at c + offset * in_stride; only
offsets whose input voxel exists produce a pair. Within one offset each
input row and each output row appears at most once, so scatter-adds over
a single offset never collide.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, StrideMismatchError, ValidationError
from .sparse_tensor import CoordinateIndex, SparseTensor, build_index, stride_coords


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """(K^3, 3) int64 offsets in lexicographic (x, y, z) order.

    Odd K is centered: components run -(K-1)/2 .. (K-1)/2. Even K is
    anchored at the output voxel: components run 0 .. K-1.
    """
    k = int(kernel_size)
    if k < 1:
        raise ValidationError(f"kernel_size must be >= 1, got {k}")
    if k % 2 == 1:
        r = np.arange(k, dtype=np.int64) - (k - 1) // 2
    else:
        r = np.arange(k, dtype=np.int64)
    grid = np.meshgrid(r, r, r, indexing="ij")
    return np.stack(grid, axis=-1).reshape(-1, 3)


class KernelMap:
    """Per-offset row pair lists between an input and an output tensor.

    Attributes:
        offsets: (K^3, 3) kernel offsets, lexicographic.
        in_rows, out_rows: lists of int64 arrays, one pair list per offset.
        stride: conv stride (upsampling factor when transposed).
        transposed: True for the decoder direction (coarse in, fine out).
    """

    def __init__(self, kernel_size, stride, transposed, offsets, in_rows, out_rows,
                 n_in, n_out):
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.transposed = bool(transposed)
        self.offsets = offsets
        self.in_rows = in_rows
        self.out_rows = out_rows
        self.n_in = int(n_in)
        self.n_out = int(n_out)

    @property
    def volume(self) -> int:
        return self.offsets.shape[0]

    def pairs(self, i: int):
        return self.in_rows[i], self.out_rows[i]

    def total_pairs(self) -> int:
        return int(sum(a.shape[0] for a in self.in_rows))

    def swapped(self) -> "KernelMap":
        """The same connectivity read in the opposite direction."""
        return KernelMap(
            self.kernel_size,
            self.stride,
            not self.transposed,
            self.offsets,
            [a.copy() for a in self.out_rows],
            [a.copy() for a in self.in_rows],
            self.n_out,
            self.n_in,
        )


def _build_map(
    in_coords: np.ndarray,
    in_index: CoordinateIndex,
    in_stride: int,
    out_coords: np.ndarray,
    out_index: CoordinateIndex | None,
    kernel_size: int,
    stride: int,
    transposed: bool,
) -> KernelMap:
    out_coords = np.ascontiguousarray(out_coords, dtype=np.int64)
    if out_coords.ndim != 2 or out_coords.shape[1] != 4:
        raise ShapeError(f"out_coords must be (M, 4), got {out_coords.shape}")
    stride = int(stride)
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if transposed:
        if in_stride % stride != 0:
            raise StrideMismatchError(
                f"transposed stride {stride} does not divide tensor stride {in_stride}"
            )
        out_stride = in_stride // stride
    else:
        out_stride = in_stride * stride
    if out_coords.shape[0] and (out_coords[:, 1:] % out_stride).any():
        raise StrideMismatchError(
            f"out_coords are not multiples of output stride {out_stride}"
        )

    offsets = kernel_offsets(kernel_size)
    in_rows: list[np.ndarray] = []
    out_rows: list[np.ndarray] = []

    if transposed:
        if out_index is None:
            out_index = build_index(out_coords)
        src_rows = np.arange(in_coords.shape[0], dtype=np.int64)
        query = np.empty_like(in_coords)
        query[:, 0] = in_coords[:, 0]
        for off in offsets:
            query[:, 1:] = in_coords[:, 1:] + off * out_stride
            rows = out_index.lookup(query)
            found = rows >= 0
            in_rows.append(src_rows[found])
            out_rows.append(rows[found])
    else:
        dst_rows = np.arange(out_coords.shape[0], dtype=np.int64)
        query = np.empty_like(out_coords)
        query[:, 0] = out_coords[:, 0]
        for off in offsets:
            query[:, 1:] = out_coords[:, 1:] + off * in_stride
            rows = in_index.lookup(query)
            found = rows >= 0
            in_rows.append(rows[found])
            out_rows.append(dst_rows[found])

    return KernelMap(
        kernel_size,
        stride,
        transposed,
        offsets,
        in_rows,
        out_rows,
        in_coords.shape[0],
        out_coords.shape[0],
    )


def build_kernel_map(
    in_tensor: SparseTensor,
    out_coords: np.ndarray,
    kernel_size: int,
    stride: int = 1,
    transposed: bool = False,
    out_index: CoordinateIndex | None = None,
) -> KernelMap:
    """Enumerate (input_row, output_row) pairs for every kernel offset.

    Forward (transposed=False): output coordinates live at stride
    in_tensor.stride * stride; the input voxel paired with output c via
    offset i sits at c + i * in_tensor.stride.

    Transposed (transposed=True): output coordinates live at the finer
    stride in_tensor.stride // stride and pairs satisfy
    out_xyz = in_xyz + offset * out_stride, mirroring the forward map of
    the matching downsampling conv with input and output roles swapped.
    """
    return _build_map(
        in_tensor.coords,
        in_tensor.index,
        in_tensor.stride,
        out_coords,
        out_index,
        kernel_size,
        stride,
        transposed,
    )


class CoordinateManager:
    """Caches coordinate sets per stride level and kernel maps per layer key.

    One manager serves one forward/backward pass (or many passes over the
    same base coordinates). Levels are derived from the finest tensor by
    floor-snapping, so an encoder level rebuilt by the decoder is exactly
    the cached encoder set, row for row.
    """

    def __init__(self, tensor: SparseTensor):
        self._base = tensor
        self._levels: dict[int, tuple[np.ndarray, CoordinateIndex]] = {
            tensor.stride: (tensor.coords, tensor.index)
        }
        self._maps: dict[tuple, KernelMap] = {}

    @property
    def base_stride(self) -> int:
        return self._base.stride

    def coords_at(self, stride: int):
        """(coords, index) of the cached level, building it if needed."""
        stride = int(stride)
        if stride not in self._levels:
            if stride % self._base.stride != 0:
                raise StrideMismatchError(
                    f"stride {stride} is not a multiple of base stride "
                    f"{self._base.stride}"
                )
            coords = stride_coords(self._base, stride // self._base.stride)
            self._levels[stride] = (coords, build_index(coords))
        return self._levels[stride]

    def kernel_map(
        self,
        in_stride: int,
        out_stride: int,
        kernel_size: int,
        transposed: bool = False,
    ) -> KernelMap:
        """Cached kernel map between two stride levels."""
        key = (int(in_stride), int(out_stride), int(kernel_size), bool(transposed))
        got = self._maps.get(key)
        if got is not None:
            return got
        if transposed:
            if in_stride % out_stride != 0:
                raise StrideMismatchError(
                    f"transposed map needs out_stride {out_stride} dividing "
                    f"in_stride {in_stride}"
                )
            stride = in_stride // out_stride
        else:
            if out_stride % in_stride != 0:
                raise StrideMismatchError(
                    f"forward map needs in_stride {in_stride} dividing "
                    f"out_stride {out_stride}"
                )
            stride = out_stride // in_stride
        in_coords, in_index = self.coords_at(in_stride)
        out_coords, out_index = self.coords_at(out_stride)
        km = _build_map(
            in_coords, in_index, int(in_stride), out_coords, out_index,
            kernel_size, stride, transposed,
        )
        self._maps[key] = km
        return km
