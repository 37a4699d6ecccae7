"""Procedural Manhattan-style occupancy grid, validity and collision queries.

The world is a ``height x width`` array of square cells; a position
``(x, y)`` in meters maps to cell ``(floor(y / cell_size), floor(x / cell_size))``.
Buildings are axis-aligned rectangles on a block/street lattice, shrunk by a
seeded per-block jitter. Only streets ever get carved, so the free region
stays a single 4-connected component.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from . import _io
from .errors import FormatError, ParameterError

GRID_MAGIC = b"BFGW"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sIIIdq")


class Position(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class BlockSpec:
    """Lattice geometry in cells: building footprint and street width."""

    block_w: int = 28
    block_h: int = 28
    street_w: int = 10


@dataclass(frozen=True)
class Wall:
    """A maximal straight run of free/blocked cell boundary.

    ``normal`` is the unit vector pointing into the free side.
    """

    start: tuple[float, float]
    end: tuple[float, float]
    normal: tuple[float, float]

    @property
    def vertical(self) -> bool:
        return self.start[0] == self.end[0]


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Immutable binary occupancy map.

    Attributes
    ----------
    blocked:
        Boolean array of shape ``(height_cells, width_cells)``; ``True`` marks
        a building (or the enclosing border).
    cell_size:
        Edge length of a cell in meters.
    seed:
        Seed the grid was generated from.
    blocks:
        Building rectangles ``(ix0, iy0, ix1, iy1)`` (half-open cell ranges)
        as placed by the generator. Empty for grids loaded from disk.
    """

    blocked: np.ndarray
    cell_size: float = 1.0
    seed: int = 0
    blocks: tuple[tuple[int, int, int, int], ...] = field(default=())

    def __post_init__(self):
        arr = np.array(self.blocked, dtype=bool, copy=True)
        if arr.ndim != 2:
            raise ParameterError("occupancy array must be 2-D")
        arr.setflags(write=False)
        object.__setattr__(self, "blocked", arr)
        if not self.cell_size > 0:
            raise ParameterError("cell_size must be positive")

    @property
    def width_cells(self) -> int:
        return self.blocked.shape[1]

    @property
    def height_cells(self) -> int:
        return self.blocked.shape[0]

    @property
    def extent(self) -> tuple[float, float]:
        return self.width_cells * self.cell_size, self.height_cells * self.cell_size

    @property
    def free(self) -> np.ndarray:
        return ~self.blocked

    @property
    def n_free(self) -> int:
        return int(self.free.sum())

    def cell_of(self, p: Sequence[float]) -> tuple[int, int]:
        """(row, col) of the cell containing ``p``; may be out of range."""
        return int(np.floor(p[1] / self.cell_size)), int(np.floor(p[0] / self.cell_size))

    def cell_center(self, row: int, col: int) -> Position:
        return Position((col + 0.5) * self.cell_size, (row + 0.5) * self.cell_size)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<IId", self.width_cells, self.height_cells, self.cell_size))
        h.update(np.packbits(self.blocked, axis=None).tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return (
            self.cell_size == other.cell_size
            and self.blocked.shape == other.blocked.shape
            and bool(np.array_equal(self.blocked, other.blocked))
        )

    __hash__ = None


def _street_mask(n: int, block: int, street: int) -> np.ndarray:
    idx = np.arange(n)
    return (idx - 1) % (block + street) < street


def generate_city_grid(
    seed: int,
    width_cells: int = 401,
    height_cells: int = 401,
    cell_size: float = 1.0,
    block_spec: BlockSpec | None = None,
    jitter: int | None = None,
) -> OccupancyGrid:
    """Build a seeded city map of rectangular blocks separated by streets.

    The street lattice starts one cell inside the border, so every street
    row/column spans the whole interior. Each building is the lattice block
    shrunk by an independent ``0..jitter`` cells on every side (default
    ``min(block_w, block_h) // 4``).
    """
    spec = block_spec or BlockSpec()
    if width_cells < 3 or height_cells < 3:
        raise ParameterError("grid dimensions must be >= 3")
    if spec.street_w < 1 or spec.block_w < 0 or spec.block_h < 0:
        raise ParameterError("street_w must be >= 1 and block sizes >= 0")
    if jitter is None:
        jitter = min(spec.block_w, spec.block_h) // 4
    if jitter < 0:
        raise ParameterError("jitter must be >= 0")

    rng = np.random.default_rng(seed)
    blocked = np.zeros((height_cells, width_cells), dtype=bool)
    street_x = _street_mask(width_cells, spec.block_w, spec.street_w)
    street_y = _street_mask(height_cells, spec.block_h, spec.street_w)

    blocks = []
    for y0, y1 in _runs(~street_y[1:-1], offset=1):
        for x0, x1 in _runs(~street_x[1:-1], offset=1):
            j = rng.integers(0, jitter + 1, size=4) if jitter else np.zeros(4, int)
            bx0, bx1 = x0 + j[0], x1 - j[1]
            by0, by1 = y0 + j[2], y1 - j[3]
            if bx1 > bx0 and by1 > by0:
                blocked[by0:by1, bx0:bx1] = True
                blocks.append((int(bx0), int(by0), int(bx1), int(by1)))

    # carve streets after placement, then close the border
    blocked[street_y, :] = False
    blocked[:, street_x] = False
    blocked[0, :] = blocked[-1, :] = True
    blocked[:, 0] = blocked[:, -1] = True

    labels, n = ndimage.label(~blocked)
    if n == 0:
        raise ParameterError("grid has no free cell")
    if n > 1:
        sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
        keep = 1 + int(np.argmax(sizes))
        blocked |= (labels != keep) & (labels != 0)
    return OccupancyGrid(blocked, float(cell_size), int(seed), tuple(blocks))


def _runs(mask: np.ndarray, offset: int = 0) -> list[tuple[int, int]]:
    """Half-open index ranges of consecutive ``True`` entries."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return [(int(s) + offset, int(e) + offset) for s, e in zip(starts, ends)]


def is_connected(grid: OccupancyGrid) -> bool:
    _, n = ndimage.label(grid.free)
    return n == 1


def free_at(grid: OccupancyGrid, xs, ys) -> np.ndarray:
    """Vectorized validity lookup; out-of-bounds and non-finite are blocked."""
    xs, ys = np.broadcast_arrays(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float))
    shape = xs.shape
    with np.errstate(invalid="ignore"):
        col = np.floor(xs.ravel() / grid.cell_size)
        row = np.floor(ys.ravel() / grid.cell_size)
        inside = (
            (col >= 0) & (row >= 0)
            & (col < grid.width_cells) & (row < grid.height_cells)
        )
    out = np.zeros(col.shape, dtype=bool)
    out[inside] = ~grid.blocked[row[inside].astype(np.intp), col[inside].astype(np.intp)]
    return out.reshape(shape)


def is_free(grid: OccupancyGrid, p: Sequence[float]) -> bool:
    return bool(free_at(grid, p[0], p[1]))


def _line_params(a: np.ndarray, b: np.ndarray, cs: float) -> np.ndarray:
    """Parameters in (0, 1) where each segment crosses a grid line of one axis.

    Returns an ``(n, k)`` array padded with NaN.
    """
    lo = np.ceil(np.minimum(a, b) / cs)
    hi = np.floor(np.maximum(a, b) / cs)
    d = b - a
    moving = d != 0
    count = np.where(moving, np.maximum(hi - lo + 1, 0), 0).astype(np.intp)
    k = int(count.max()) if count.size else 0
    if k == 0:
        return np.empty((a.shape[0], 0))
    lines = lo[:, None] + np.arange(k)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (lines * cs - a[:, None]) / d[:, None]
    valid = np.arange(k)[None, :] < count[:, None]
    valid &= (t > 0) & (t < 1)
    return np.where(valid, t, np.nan)


def segments_free(grid: OccupancyGrid, a, b) -> np.ndarray:
    """Batched segment test: ``True`` where segment ``a[i] -> b[i]`` stays free.

    Every cell the open segment passes through is visited exactly once by
    checking the midpoint between consecutive grid-line crossings; both
    endpoints are checked directly. The endpoints are put in lexicographic
    order first so the answer is symmetric bit for bit.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape or a.shape[-1] != 2:
        raise ParameterError("segment endpoint arrays must both be (n, 2)")
    swap = (b[:, 0] < a[:, 0]) | ((b[:, 0] == a[:, 0]) & (b[:, 1] < a[:, 1]))
    p0 = np.where(swap[:, None], b, a)
    p1 = np.where(swap[:, None], a, b)

    ok = free_at(grid, p0[:, 0], p0[:, 1]) & free_at(grid, p1[:, 0], p1[:, 1])
    cs = grid.cell_size
    tx = _line_params(p0[:, 0], p1[:, 0], cs)
    ty = _line_params(p0[:, 1], p1[:, 1], cs)
    n = p0.shape[0]
    t = np.concatenate([np.zeros((n, 1)), tx, ty, np.ones((n, 1))], axis=1)
    t.sort(axis=1)
    mid = 0.5 * (t[:, :-1] + t[:, 1:])
    d = p1 - p0
    mx = p0[:, 0:1] + mid * d[:, 0:1]
    my = p0[:, 1:2] + mid * d[:, 1:2]
    check = np.isfinite(mid)
    inner = free_at(grid, np.where(check, mx, 0.0), np.where(check, my, 0.0)) | ~check
    return ok & inner.all(axis=1)


def collision_free_segment(grid: OccupancyGrid, a: Sequence[float], b: Sequence[float]) -> bool:
    return bool(segments_free(grid, [a], [b])[0])


def free_cells(grid: OccupancyGrid, stride: int = 1) -> np.ndarray:
    """``(n, 2)`` array of (row, col) for free cells on a ``stride`` lattice."""
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    rows, cols = np.nonzero(grid.free)
    keep = (rows % stride == 0) & (cols % stride == 0)
    return np.stack([rows[keep], cols[keep]], axis=1)


def wall_segments(grid: OccupancyGrid) -> list[Wall]:
    """Maximal straight boundaries between free and blocked cells."""
    cs = grid.cell_size
    walls: list[Wall] = []
    b = grid.blocked
    # horizontal boundaries: between row r-1 and r, at y = r * cs
    upper, lower = b[1:, :], b[:-1, :]
    for r in range(1, grid.height_cells):
        free_above = lower[r - 1] & ~upper[r - 1]   # blocked below, free above
        free_below = ~lower[r - 1] & upper[r - 1]
        for c0, c1 in _runs(free_above):
            walls.append(Wall((c0 * cs, r * cs), (c1 * cs, r * cs), (0.0, 1.0)))
        for c0, c1 in _runs(free_below):
            walls.append(Wall((c0 * cs, r * cs), (c1 * cs, r * cs), (0.0, -1.0)))
    right, left = b[:, 1:], b[:, :-1]
    for c in range(1, grid.width_cells):
        free_right = left[:, c - 1] & ~right[:, c - 1]
        free_left = ~left[:, c - 1] & right[:, c - 1]
        for r0, r1 in _runs(free_right):
            walls.append(Wall((c * cs, r0 * cs), (c * cs, r1 * cs), (1.0, 0.0)))
        for r0, r1 in _runs(free_left):
            walls.append(Wall((c * cs, r0 * cs), (c * cs, r1 * cs), (-1.0, 0.0)))
    return walls


def save_grid(grid: OccupancyGrid, path: str | Path, meta: dict | None = None) -> None:
    """Write the binary ``BFGW`` format: 32-byte header, packed rows, then a
    length-prefixed JSON metadata block."""
    header = _HEADER.pack(
        GRID_MAGIC, GRID_VERSION, grid.width_cells, grid.height_cells,
        grid.cell_size, grid.seed,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.packbits(grid.blocked, axis=None).tobytes())
        _io.write_meta(fh, meta)


def load_grid(path: str | Path, with_meta: bool = False):
    """Read a ``BFGW`` file; returns ``(grid, meta)`` when ``with_meta``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated grid header")
    magic, version, w, h, cs, seed = _HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != GRID_VERSION:
        raise FormatError(f"{path}: unsupported grid version {version}")
    nbytes = (w * h + 7) // 8
    if len(data) < _HEADER.size + nbytes:
        raise FormatError(f"{path}: truncated occupancy payload")
    payload = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=_HEADER.size)
    bits = np.unpackbits(payload, count=w * h).astype(bool).reshape(h, w)
    grid = OccupancyGrid(bits, cs, seed)
    end = _HEADER.size + nbytes
    meta = _io.read_meta(data, end)[0] if len(data) > end else {}
    return (grid, meta) if with_meta else grid


def grid_to_svg(grid: OccupancyGrid, overlays: str = "", scale: float = 2.0) -> str:
    """Render the grid as SVG (y axis up); ``overlays`` is raw SVG in meters."""
    w_m, h_m = grid.extent
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w_m * scale:g}" '
        f'height="{h_m * scale:g}" viewBox="0 0 {w_m:g} {h_m:g}">',
        f'<g transform="translate(0,{h_m:g}) scale(1,-1)">',
        f'<rect x="0" y="0" width="{w_m:g}" height="{h_m:g}" fill="#9ecae1"/>',
    ]
    cs = grid.cell_size
    for r in range(grid.height_cells):
        for c0, c1 in _runs(grid.blocked[r]):
            parts.append(
                f'<rect x="{c0 * cs:g}" y="{r * cs:g}" width="{(c1 - c0) * cs:g}" '
                f'height="{cs:g}" fill="#fdae6b"/>'
            )
    parts.append(overlays)
    parts.append("</g></svg>")
    return "\n".join(parts)
