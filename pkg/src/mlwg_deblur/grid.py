"""Image container, block partition and extended-block index maps.

Layout conventions used throughout the package:

* Images are ``n x n`` arrays indexed ``[row, col]``.  The flat vector form
  stacks columns, so pixel ``(row a, col b)`` lives at flat index ``b * n + a``
  (``numpy`` ``order="F"``).
* Blocks are numbered column-major over the block grid: block ``(br, bc)``
  has id ``bc * (n // m) + br``.
* Extended blocks are clipped at the image boundary, never padded.

Selection matrices and projectors are stored as integer index tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "Image",
    "BlockPartition",
    "ExtendedBlock",
    "SelectionMap",
    "EXTENSION_KINDS",
    "make_partition",
    "extended_block",
    "gather",
    "scatter",
    "selection_map",
]

EXTENSION_KINDS = ("+1", "+r", "+rr")


@dataclass(frozen=True)
class Image:
    """Square grayscale image stored as a flat column-major vector."""

    n: int
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float).reshape(-1)
        if self.n <= 0:
            raise ValueError(f"image side must be positive, got {self.n}")
        if data.size != self.n * self.n:
            raise ValueError(f"expected {self.n * self.n} intensities, got {data.size}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image intensities must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array) -> "Image":
        array = np.asarray(array, dtype=float)
        if array.ndim != 2 or array.shape[0] != array.shape[1]:
            raise ValueError(f"expected a square 2-D array, got shape {array.shape}")
        return cls(array.shape[0], array.ravel(order="F"))

    def to_array(self) -> np.ndarray:
        """Return a writable ``[row, col]`` copy."""
        return self.data.reshape(self.n, self.n, order="F").copy()

    @property
    def d(self) -> int:
        return self.n * self.n


@dataclass(frozen=True)
class SelectionMap:
    """Injective selection ``target[k] = source[index_table[k]]``.

    Represents a component selection matrix ``U`` (``U.T @ source``).  The
    associated projector ``I - U U.T`` is represented by :meth:`complement`.
    """

    source_size: int
    index_table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.index_table, dtype=np.intp).reshape(-1)
        if table.size and (table.min() < 0 or table.max() >= self.source_size):
            raise IndexError("selection index out of range")
        if np.unique(table).size != table.size:
            raise ValueError("selection map must be injective")
        table.setflags(write=False)
        object.__setattr__(self, "index_table", table)

    @property
    def target_size(self) -> int:
        return self.index_table.size

    def complement(self) -> "SelectionMap":
        mask = np.ones(self.source_size, dtype=bool)
        mask[self.index_table] = False
        return SelectionMap(self.source_size, np.flatnonzero(mask))

    def apply(self, source) -> np.ndarray:
        source = np.asarray(source)
        if source.shape[-1] != self.source_size:
            raise ValueError(f"source has length {source.shape[-1]}, map expects {self.source_size}")
        return source[..., self.index_table]

    def embed(self, values, out=None) -> np.ndarray:
        """Adjoint of :meth:`apply`: place ``values`` into a zero (or given) source vector."""
        if out is None:
            out = np.zeros(self.source_size)
        out[self.index_table] = values
        return out

    @classmethod
    def identity(cls, size: int) -> "SelectionMap":
        return cls(size, np.arange(size))


@dataclass(frozen=True)
class ExtendedBlock:
    """Block ``block_id`` grown by a clipped frame.

    ``rows`` and ``cols`` are the half-open pixel ranges of the clipped
    rectangle; ``pixel_indices`` enumerates it column-major as global flat
    indices and ``interior_offsets`` locate the core block inside it.
    """

    block_id: int
    kind: str
    width: int
    rows: tuple[int, int]
    cols: tuple[int, int]
    pixel_indices: np.ndarray
    interior_offsets: np.ndarray

    @property
    def size(self) -> int:
        return self.pixel_indices.size

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows[1] - self.rows[0], self.cols[1] - self.cols[0])

    def core_selection(self) -> SelectionMap:
        """``U_i`` / ``W_i``: selects the core block out of the extended block."""
        return SelectionMap(self.size, self.interior_offsets)


@dataclass(frozen=True)
class BlockPartition:
    """Tiling of an ``n x n`` image into ``b = (n/m)^2`` blocks of side ``m``."""

    n: int
    m: int
    r: int
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def blocks_per_side(self) -> int:
        return self.n // self.m

    @property
    def b(self) -> int:
        return self.blocks_per_side**2

    @property
    def q(self) -> int:
        return self.m * self.m

    @property
    def d(self) -> int:
        return self.n * self.n

    def block_coords(self, block_id: int) -> tuple[int, int]:
        """Block-grid position ``(block_row, block_col)``."""
        self._check_id(block_id)
        return block_id % self.blocks_per_side, block_id // self.blocks_per_side

    def block_id(self, block_row: int, block_col: int) -> int:
        return block_col * self.blocks_per_side + block_row

    def block_origin(self, block_id: int) -> tuple[int, int]:
        """Pixel position of the block's top-left corner."""
        br, bc = self.block_coords(block_id)
        return br * self.m, bc * self.m

    def core_indices(self, block_id: int) -> np.ndarray:
        return extended_block(self, block_id, "core").pixel_indices

    @cached_property
    def pixel_block_map(self) -> np.ndarray:
        """``[row, col]`` array of owning block ids."""
        br = np.arange(self.n) // self.m
        return br[:, None] + br[None, :] * self.blocks_per_side

    def frame_width(self, kind: str) -> int:
        if kind == "core":
            return 0
        if kind == "+1":
            return 1
        if kind == "+r":
            return self.r
        if kind == "+rr":
            return 2 * self.r
        raise ValueError(f"unknown extension kind {kind!r}; expected one of {EXTENSION_KINDS}")

    def _check_id(self, block_id: int) -> None:
        if not (0 <= int(block_id) < self.b) or int(block_id) != block_id:
            raise IndexError(f"block id {block_id} outside [0, {self.b})")


def make_partition(n: int, m: int, r: int) -> BlockPartition:
    """Partition an ``n x n`` image into ``m x m`` blocks for a PSF of radius ``r``."""
    if n <= 0 or m <= 0 or r < 0:
        raise ValueError(f"need n, m > 0 and r >= 0, got n={n}, m={m}, r={r}")
    if n % m:
        raise ValueError(f"block side m={m} does not divide image side n={n}")
    if m <= 2 * r:
        raise ValueError(f"block side m={m} must exceed twice the PSF radius (2r={2 * r})")
    return BlockPartition(n, m, r)


def _rect_indices(n: int, rows: tuple[int, int], cols: tuple[int, int]) -> np.ndarray:
    rr = np.arange(*rows)
    cc = np.arange(*cols)
    return (cc[:, None] * n + rr[None, :]).reshape(-1)


def extended_block(partition: BlockPartition, block_id: int, kind: str) -> ExtendedBlock:
    """Clipped extended block of ``kind`` in ``{"+1", "+r", "+rr"}`` (or ``"core"``)."""
    key = (int(block_id), kind)
    cached = partition._cache.get(key)
    if cached is not None:
        return cached
    width = partition.frame_width(kind)
    r0, c0 = partition.block_origin(block_id)
    n, m = partition.n, partition.m
    rows = (max(r0 - width, 0), min(r0 + m + width, n))
    cols = (max(c0 - width, 0), min(c0 + m + width, n))
    pixels = _rect_indices(n, rows, cols)
    h = rows[1] - rows[0]
    local_r = np.arange(r0 - rows[0], r0 - rows[0] + m)
    local_c = np.arange(c0 - cols[0], c0 - cols[0] + m)
    interior = (local_c[:, None] * h + local_r[None, :]).reshape(-1)
    for arr in (pixels, interior):
        arr.setflags(write=False)
    block = ExtendedBlock(int(block_id), kind, width, rows, cols, pixels, interior)
    partition._cache[key] = block
    return block


def selection_map(partition: BlockPartition, block_id: int, source: str, target: str) -> SelectionMap:
    """Selection between two nested extensions of the same block.

    ``selection_map(p, i, "+rr", "core")`` is ``U_i``, ``("+rr", "+r")`` is
    ``U_i^{+r}`` and ``("+1", "core")`` is ``W_i``.  ``source="image"`` maps
    from the full image.
    """
    tgt = extended_block(partition, block_id, target)
    if source == "image":
        return SelectionMap(partition.d, tgt.pixel_indices)
    src = extended_block(partition, block_id, source)
    if tgt.width > src.width:
        raise ValueError(f"{target} is not contained in {source}")
    h_src = src.rows[1] - src.rows[0]
    rr = np.arange(*tgt.rows) - src.rows[0]
    cc = np.arange(*tgt.cols) - src.cols[0]
    return SelectionMap(src.size, (cc[:, None] * h_src + rr[None, :]).reshape(-1))


def _as_flat(image) -> np.ndarray:
    if isinstance(image, Image):
        return image.data
    return np.asarray(image, dtype=float).reshape(-1)


def gather(image, where) -> np.ndarray:
    """Values of ``image`` at a :class:`SelectionMap` or :class:`ExtendedBlock`.

    ``image`` is an :class:`Image` or a flat column-major vector.
    """
    data = _as_flat(image)
    if isinstance(where, ExtendedBlock):
        return data[where.pixel_indices]
    return where.apply(data)


def scatter(values, where, out) -> np.ndarray:
    """Write ``values`` into the flat vector ``out`` at the positions of ``where``."""
    idx = where.pixel_indices if isinstance(where, ExtendedBlock) else where.index_table
    out[idx] = values
    return out
