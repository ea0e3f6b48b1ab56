"""COO sparse tensors over integer voxel grids.

A sparse tensor is a pair (coords, features): an (N, 4) int64 array of
(batch, x, y, z) rows with no duplicates, and an (N, F) float array of
per-row features. Coordinates carry a stride: every spatial component is
an integer multiple of it. Row lookup goes through a seeded hash index
so membership queries are O(1) and batched queries vectorize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DuplicateCoordinateError,
    ShapeError,
    StrideMismatchError,
    ValidationError,
    VoxsetFormatError,
)

COORD_COLS = 4  # batch, x, y, z

# splitmix64 finalizer constants; the default seed is the odd golden-ratio
# increment. Any odd 64-bit seed gives an equally well mixed family.
DEFAULT_HASH_SEED = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_U64 = (1 << 64) - 1


def _finalize_u64(h: np.ndarray) -> np.ndarray:
    h ^= h >> np.uint64(30)
    h *= np.uint64(_MIX_A)
    h ^= h >> np.uint64(27)
    h *= np.uint64(_MIX_B)
    h ^= h >> np.uint64(31)
    return h


def hash_coords(coords: np.ndarray, seed: int = DEFAULT_HASH_SEED) -> np.ndarray:
    """Hash (M, 4) int64 coordinates to uint64 keys.

    Columns are absorbed one at a time into a splitmix64-style state so
    that permuting components changes the key. Negative components are
    folded in via their two's-complement bit pattern.
    """
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != COORD_COLS:
        raise ShapeError(f"coords must be (M, {COORD_COLS}), got {coords.shape}")
    with np.errstate(over="ignore"):
        h = np.full(coords.shape[0], seed, dtype=np.uint64)
        for col in range(COORD_COLS):
            h = _finalize_u64(h ^ coords[:, col].view(np.uint64))
    return h


def _hash_one(coord, seed: int = DEFAULT_HASH_SEED) -> int:
    """Scalar twin of hash_coords for single lookups. Must match exactly."""

    def fin(h: int) -> int:
        h ^= h >> 30
        h = (h * _MIX_A) & _U64
        h ^= h >> 27
        h = (h * _MIX_B) & _U64
        h ^= h >> 31
        return h

    h = seed & _U64
    for c in coord:
        h = fin(h ^ (int(c) & _U64))
    return h


class CoordinateIndex:
    """Hash map from (batch, x, y, z) rows to their row number.

    Construction rejects duplicate coordinates. Lookups verify the stored
    coordinate against the query, so hash collisions cannot alias rows;
    colliding keys fall back to a short probe list.
    """

    def __init__(self, coords: np.ndarray, seed: int = DEFAULT_HASH_SEED):
        coords = np.ascontiguousarray(coords, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != COORD_COLS:
            raise ShapeError(f"coords must be (N, {COORD_COLS}), got {coords.shape}")
        self._coords = coords
        self._seed = int(seed)
        keys = hash_coords(coords, seed)
        self._keys = keys
        n = coords.shape[0]
        if len(np.unique(keys)) == n:
            # no key collisions: C-speed dict build, duplicates impossible
            self._table = dict(zip(keys.tolist(), range(n)))
        else:
            self._table = self._build_with_probes(coords, keys)
        # lazy sorted view for vectorized bulk lookup
        self._order = None
        self._sorted_keys = None

    def _build_with_probes(self, coords, keys):
        table: dict = {}
        key_list = keys.tolist()
        rows_as_tuples = [tuple(r) for r in coords.tolist()]
        for row, key in enumerate(key_list):
            prev = table.get(key)
            if prev is None:
                table[key] = row
                continue
            bucket = prev if isinstance(prev, list) else [prev]
            for r in bucket:
                if rows_as_tuples[r] == rows_as_tuples[row]:
                    raise DuplicateCoordinateError(r, row, coords[row])
            bucket.append(row)
            table[key] = bucket
        return table

    def __len__(self) -> int:
        return self._coords.shape[0]

    @property
    def coords(self) -> np.ndarray:
        return self._coords

    @property
    def seed(self) -> int:
        return self._seed

    def get(self, coord, default: int = -1) -> int:
        """Row of a single (batch, x, y, z) tuple, or default if absent."""
        hit = self._table.get(_hash_one(coord, self._seed))
        if hit is None:
            return default
        key = (int(coord[0]), int(coord[1]), int(coord[2]), int(coord[3]))
        if isinstance(hit, list):
            for r in hit:
                if tuple(self._coords[r]) == key:
                    return r
            return default
        return hit if tuple(self._coords[hit]) == key else default

    def __contains__(self, coord) -> bool:
        return self.get(coord) >= 0

    def __getitem__(self, coord) -> int:
        row = self.get(coord)
        if row < 0:
            raise KeyError(tuple(int(c) for c in coord))
        return row

    def lookup(self, queries: np.ndarray) -> np.ndarray:
        """Rows for an (M, 4) query array; -1 marks missing coordinates."""
        q = np.ascontiguousarray(queries, dtype=np.int64)
        if q.ndim != 2 or q.shape[1] != COORD_COLS:
            raise ShapeError(f"queries must be (M, {COORD_COLS}), got {q.shape}")
        n = len(self)
        if n == 0 or q.shape[0] == 0:
            return np.full(q.shape[0], -1, dtype=np.int64)
        if self._order is None:
            self._order = np.argsort(self._keys, kind="stable")
            self._sorted_keys = self._keys[self._order]
        keys = hash_coords(q, self._seed)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos_c = np.minimum(pos, n - 1)
        cand = self._order[pos_c]
        hit = (pos < n) & (self._sorted_keys[pos_c] == keys)
        rows = np.where(hit, cand, np.int64(-1))
        # verify coordinates; mismatches are collision buckets, probe those
        hit_idx = np.nonzero(hit)[0]
        if hit_idx.size:
            ok = (self._coords[rows[hit_idx]] == q[hit_idx]).all(axis=1)
            for i in hit_idx[~ok].tolist():
                rows[i] = self.get(q[i])
        return rows


def build_index(coords: np.ndarray, seed: int = DEFAULT_HASH_SEED) -> CoordinateIndex:
    """Build a CoordinateIndex, rejecting duplicate rows."""
    return CoordinateIndex(coords, seed=seed)


class SparseTensor:
    """Immutable coordinate/feature pair at a given stride.

    Args:
        coords: (N, 4) integer rows (batch, x, y, z), no duplicates.
        features: (N, F) float features, one row per coordinate.
        stride: positive int; every x, y, z must be a multiple of it.
        index: optional prebuilt CoordinateIndex over exactly these coords.
    """

    def __init__(
        self,
        coords: np.ndarray,
        features: np.ndarray,
        stride: int = 1,
        index: CoordinateIndex | None = None,
    ):
        coords = np.ascontiguousarray(coords, dtype=np.int64)
        features = np.ascontiguousarray(features)
        if features.dtype not in (np.float32, np.float64):
            features = features.astype(np.float64)
        if coords.ndim != 2 or coords.shape[1] != COORD_COLS:
            raise ShapeError(f"coords must be (N, {COORD_COLS}), got {coords.shape}")
        if features.ndim != 2:
            raise ShapeError(f"features must be (N, F), got {features.shape}")
        if coords.shape[0] != features.shape[0]:
            raise ShapeError(
                f"row mismatch: {coords.shape[0]} coords vs {features.shape[0]} features"
            )
        stride = int(stride)
        if stride < 1:
            raise ValidationError(f"stride must be >= 1, got {stride}")
        if stride > 1 and coords.shape[0] and (coords[:, 1:] % stride).any():
            bad = np.nonzero((coords[:, 1:] % stride).any(axis=1))[0][0]
            raise StrideMismatchError(
                f"coordinate {tuple(coords[bad])} is not a multiple of stride {stride}"
            )
        if index is None:
            index = build_index(coords)
        elif index.coords.shape != coords.shape or not np.array_equal(index.coords, coords):
            raise ValidationError("index does not cover the given coordinates")
        # freeze views, not the caller's arrays: accessors reject writes
        # while the caller keeps ownership of its buffers
        coords = coords.view()
        features = features.view()
        coords.setflags(write=False)
        features.setflags(write=False)
        self._coords = coords
        self._features = features
        self._stride = stride
        self._index = index

    @property
    def coords(self) -> np.ndarray:
        return self._coords

    @property
    def features(self) -> np.ndarray:
        return self._features

    @property
    def stride(self) -> int:
        return self._stride

    @property
    def index(self) -> CoordinateIndex:
        return self._index

    @property
    def n(self) -> int:
        return self._coords.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def num_features(self) -> int:
        return self._features.shape[1]

    def replace_features(self, features: np.ndarray) -> "SparseTensor":
        """Same coordinates (index shared), new feature matrix."""
        return SparseTensor(self._coords, features, stride=self._stride, index=self._index)

    def __repr__(self) -> str:
        return (
            f"SparseTensor(n={self.n}, num_features={self.num_features}, "
            f"stride={self._stride})"
        )


def batch_concat(tensors, relabel_batch: bool = True) -> SparseTensor:
    """Stack tensors into one batched tensor.

    With relabel_batch each input is assigned batch id = its position, so
    single-scene tensors (all batch 0) merge without collisions. Inputs
    must share stride and feature width. Row order is input order, which
    stays lexicographic when each input is sorted.
    """
    tensors = list(tensors)
    if not tensors:
        raise ValidationError("batch_concat needs at least one tensor")
    stride = tensors[0].stride
    nf = tensors[0].num_features
    for t in tensors[1:]:
        if t.stride != stride:
            raise ValidationError("batch_concat inputs must share stride")
        if t.num_features != nf:
            raise ShapeError("batch_concat inputs must share feature width")
    coords = []
    for i, t in enumerate(tensors):
        c = t.coords.copy()
        if relabel_batch:
            c[:, 0] = i
        coords.append(c)
    coords = np.concatenate(coords, axis=0)
    feats = np.concatenate([t.features for t in tensors], axis=0)
    return SparseTensor(coords, feats, stride=stride)


@dataclass
class VoxelizationConfig:
    """How continuous points are snapped to the voxel grid.

    feature_reduce "mean" averages features of points sharing a voxel.
    label_reduce "majority" takes the most frequent label, breaking ties
    toward the smallest label id.
    """

    voxel_size: float = 1.0
    feature_reduce: str = "mean"
    label_reduce: str = "majority"

    def __post_init__(self):
        if not (self.voxel_size > 0):
            raise ValidationError(f"voxel_size must be > 0, got {self.voxel_size}")
        if self.feature_reduce != "mean":
            raise ValidationError(f"unknown feature_reduce {self.feature_reduce!r}")
        if self.label_reduce != "majority":
            raise ValidationError(f"unknown label_reduce {self.label_reduce!r}")


def voxelize(
    points: np.ndarray,
    features: np.ndarray,
    config: VoxelizationConfig,
    labels: np.ndarray | None = None,
    batch_index: int = 0,
):
    """Quantize points to voxel cells at stride 1.

    Cell of a point is floor(point / voxel_size) per axis. Points landing
    in the same cell have their features averaged and labels reduced by
    majority vote (ties -> smallest label id). Output rows are sorted
    lexicographically by (batch, x, y, z).

    Returns:
        (tensor, voxel_labels): voxel_labels is None when labels is None.
    """
    points = np.asarray(points, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"points must be (N, 3), got {points.shape}")
    if features.ndim != 2 or features.shape[0] != points.shape[0]:
        raise ShapeError("features must be (N, F) aligned with points")
    if points.shape[0] == 0:
        raise ValidationError("cannot voxelize an empty point set")
    if not np.isfinite(points).all() or not np.isfinite(features).all():
        raise ValidationError("points and features must be finite")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (points.shape[0],):
            raise ShapeError("labels must be (N,) aligned with points")
        if (labels < 0).any():
            raise ValidationError("labels must be non-negative")

    cells = np.floor(points / config.voxel_size).astype(np.int64)
    coords = np.column_stack(
        [np.full(cells.shape[0], int(batch_index), dtype=np.int64), cells]
    )
    uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(np.float64)

    sums = np.zeros((uniq.shape[0], features.shape[1]), dtype=np.float64)
    np.add.at(sums, inverse, features)
    mean_feats = sums / counts[:, None]

    voxel_labels = None
    if labels is not None:
        pair = np.stack([inverse, labels], axis=1)
        upair, pcount = np.unique(pair, axis=0, return_counts=True)
        # candidates ordered by (voxel asc, count desc, label asc); the
        # first row per voxel is the majority label with smallest-id ties
        order = np.lexsort((upair[:, 1], -pcount, upair[:, 0]))
        upair = upair[order]
        first = np.unique(upair[:, 0], return_index=True)[1]
        voxel_labels = upair[first, 1]

    return SparseTensor(uniq, mean_feats, stride=1), voxel_labels


def stride_coords(tensor: SparseTensor, stride: int) -> np.ndarray:
    """Downsample coordinates by an additional stride factor.

    Spatial components are floored to multiples of tensor.stride * stride
    and deduplicated. The result is sorted lexicographically by
    (batch, x, y, z) and is the coordinate set a strided convolution
    produces. Composing two calls equals one call with the product.
    """
    stride = int(stride)
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    new_stride = tensor.stride * stride
    coords = tensor.coords
    snapped = np.empty_like(coords)
    snapped[:, 0] = coords[:, 0]
    snapped[:, 1:] = (coords[:, 1:] // new_stride) * new_stride
    return np.unique(snapped, axis=0)


_VOXSET_MAGIC = "voxset"
_VOXSET_VERSION = 1


def save_voxset(
    path,
    tensor: SparseTensor,
    labels: np.ndarray | None = None,
    centroid_offsets: np.ndarray | None = None,
) -> None:
    """Write a stride-1 tensor as a versioned whitespace text file.

    Line 1: "voxset 1 N num_features has_labels has_centroids". Then one
    row per voxel: batch x y z f_1..f_F [label] [cx cy cz]. Floats are
    written with %.17g so doubles round-trip exactly.
    """
    if tensor.stride != 1:
        raise ValidationError("voxset stores stride-1 tensors only")
    n, nf = tensor.n, tensor.num_features
    if labels is not None and np.asarray(labels).shape != (n,):
        raise ShapeError("labels must be (N,)")
    if centroid_offsets is not None and np.asarray(centroid_offsets).shape != (n, 3):
        raise ShapeError("centroid_offsets must be (N, 3)")
    has_l = int(labels is not None)
    has_c = int(centroid_offsets is not None)
    with open(path, "w", encoding="ascii") as f:
        f.write(f"{_VOXSET_MAGIC} {_VOXSET_VERSION} {n} {nf} {has_l} {has_c}\n")
        for i in range(n):
            parts = [str(int(v)) for v in tensor.coords[i]]
            parts += [f"{v:.17g}" for v in tensor.features[i]]
            if has_l:
                parts.append(str(int(labels[i])))
            if has_c:
                parts += [f"{v:.17g}" for v in centroid_offsets[i]]
            f.write(" ".join(parts) + "\n")


def load_voxset(path):
    """Read a voxset file written by save_voxset.

    Returns:
        (tensor, labels, centroid_offsets); the last two may be None.
    """
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().split()
        if len(header) != 6 or header[0] != _VOXSET_MAGIC:
            raise VoxsetFormatError(f"{path}: bad voxset header")
        try:
            version, n, nf, has_l, has_c = (int(x) for x in header[1:])
        except ValueError as e:
            raise VoxsetFormatError(f"{path}: non-integer header field") from e
        if version != _VOXSET_VERSION:
            raise VoxsetFormatError(f"{path}: unsupported voxset version {version}")
        if n < 0 or nf < 0 or has_l not in (0, 1) or has_c not in (0, 1):
            raise VoxsetFormatError(f"{path}: inconsistent header counts")
        width = COORD_COLS + nf + has_l + 3 * has_c
        try:
            data = np.loadtxt(f, dtype=np.float64, ndmin=2)
        except ValueError as e:
            raise VoxsetFormatError(f"{path}: unparseable data row") from e
    if n == 0:
        raise VoxsetFormatError(f"{path}: empty voxel set")
    if data.shape != (n, width):
        raise VoxsetFormatError(
            f"{path}: expected {n} rows of {width} columns, got {data.shape}"
        )
    coords_f = data[:, :COORD_COLS]
    if not np.all(coords_f == np.round(coords_f)):
        raise VoxsetFormatError(f"{path}: non-integer coordinate")
    coords = coords_f.astype(np.int64)
    feats = data[:, COORD_COLS : COORD_COLS + nf]
    col = COORD_COLS + nf
    labels = None
    if has_l:
        lab_f = data[:, col]
        if not np.all(lab_f == np.round(lab_f)):
            raise VoxsetFormatError(f"{path}: non-integer label")
        labels = lab_f.astype(np.int64)
        col += 1
    cents = data[:, col : col + 3].copy() if has_c else None
    return SparseTensor(coords, feats, stride=1), labels, cents
