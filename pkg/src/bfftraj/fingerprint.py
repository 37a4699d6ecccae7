"""Beam-swept power delay profiles and binary beamformed fingerprints.

A base station sweeps ``M`` directional beams. For each receiver position the
propagation paths come from a simplified image-method ray model (line of
sight plus single wall reflections). Each ray deposits its power, with
log-normal shadowing noise, into the delay bin ``floor(length / c * F_s)``.
Thresholding every profile at ``eta`` gives one binary ``M x N_s`` fingerprint.
"""

from __future__ import annotations

import hashlib
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _io
from .errors import FormatError, ParameterError
from .gridworld import OccupancyGrid, Position, free_cells, is_free, segments_free, wall_segments

SPEED_OF_LIGHT = 3.0e8
FLOOR_DB = -300.0

DATASET_MAGIC = b"BFFD"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<4sIIIQ32s32s")
_DS_RECORD = struct.Struct("<ddi")


@dataclass(frozen=True)
class BeamCodebook:
    """``M`` Gaussian beams with boresights spread uniformly over the circle."""

    M: int = 32
    beamwidth_sigma: float = 2 * math.pi / 32

    def __post_init__(self):
        if self.M < 1:
            raise ParameterError("codebook needs at least one beam")
        if not self.beamwidth_sigma > 0:
            raise ParameterError("beamwidth_sigma must be positive")

    @property
    def beam_centers(self) -> np.ndarray:
        return 2 * math.pi * np.arange(self.M) / self.M

    def pattern(self, angles) -> np.ndarray:
        """Normalized gain in [0, 1], shape ``(M,) + angles.shape``."""
        d = np.asarray(angles, dtype=float)[None, ...] - self.beam_centers.reshape(
            (-1,) + (1,) * np.ndim(angles)
        )
        d = (d + math.pi) % (2 * math.pi) - math.pi
        return np.exp(-(d ** 2) / (2 * self.beamwidth_sigma ** 2))


@dataclass(frozen=True)
class ChannelScene:
    """Link budget, sampling and noise parameters of the sounding setup.

    Defaults follow the 28 GHz outdoor setup (30 dBm, 24.5 dBi horn, 10 dBi
    receiver, 20 MHz sampling, 6 dB shadowing). ``threshold_eta_db`` and
    ``n_samples`` are implementation choices; see :func:`calibrate_threshold`.
    """

    tx_position: tuple[float, float] = (200.0, 200.0)
    tx_power_dbm: float = 30.0
    tx_gain_dbi: float = 24.5
    rx_gain_dbi: float = 10.0
    sounding_amplitude_s: float = 1.0
    carrier_ghz: float = 28.0
    sampling_freq_hz: float = 2e7
    n_samples: int = 64
    noise_sigma_db: float = 6.0
    threshold_eta_db: float = -45.0
    path_loss_exponent: float = 2.0
    nlos_path_loss_exponent: float = 2.9
    reflection_loss_db: float = 6.0

    def __post_init__(self):
        if not self.sampling_freq_hz > 0:
            raise ParameterError("sampling frequency must be positive")
        if self.n_samples < 1:
            raise ParameterError("n_samples must be >= 1")
        if self.noise_sigma_db < 0:
            raise ParameterError("noise_sigma_db must be >= 0")
        object.__setattr__(self, "tx_position", tuple(float(v) for v in self.tx_position))

    @property
    def max_excess_delay_T(self) -> float:
        return self.n_samples / self.sampling_freq_hz

    @property
    def tx(self) -> Position:
        return Position(*self.tx_position)

    def fspl_1m_db(self) -> float:
        wavelength = SPEED_OF_LIGHT / (self.carrier_ghz * 1e9)
        return 20 * math.log10(4 * math.pi / wavelength)

    def path_loss_db(self, length, bounces) -> np.ndarray:
        n = np.where(np.asarray(bounces) > 0, self.nlos_path_loss_exponent, self.path_loss_exponent)
        return self.fspl_1m_db() + 10 * n * np.log10(np.maximum(length, 1e-3))

    def with_(self, **changes) -> "ChannelScene":
        return ChannelScene(**{**asdict(self), **changes})

    def digest(self) -> str:
        return _io.digest_of(asdict(self))


@dataclass(frozen=True)
class PathRay:
    length: float
    departure_angle: float
    bounces: int

    def __post_init__(self):
        if not self.length > 0:
            raise ParameterError("ray length must be positive")
        if self.bounces not in (0, 1):
            raise ParameterError("only LOS and single-bounce rays are modelled")


@dataclass(frozen=True, eq=False)
class Fingerprint:
    bits: np.ndarray
    position: Position
    time_index: int = 0

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2 or not np.isin(b, (0, 1)).all():
            raise ParameterError("fingerprint must be a binary matrix")
        b = b.astype(np.uint8)
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def density(self) -> float:
        return float(self.bits.mean())


def _wall_arrays(grid: OccupancyGrid):
    cache = grid.__dict__.get("_wall_cache")
    if cache is None:
        walls = wall_segments(grid)
        start = np.array([w.start for w in walls], dtype=float).reshape(-1, 2)
        end = np.array([w.end for w in walls], dtype=float).reshape(-1, 2)
        normal = np.array([w.normal for w in walls], dtype=float).reshape(-1, 2)
        cache = (start, end, normal)
        object.__setattr__(grid, "_wall_cache", cache)
    return cache


def trace_rays(
    grid: OccupancyGrid, tx: Sequence[float], rx: Sequence[float], max_bounces: int = 1
) -> list[PathRay]:
    """LOS ray (if unobstructed) plus one image-method ray per visible wall.

    A wall contributes when tx and rx both sit on its free side, the mirror
    point lies on the wall run and both legs of the bounce are collision free.
    Rays come back LOS first, then in wall order, so output is deterministic.
    """
    if max_bounces not in (0, 1):
        raise ParameterError("max_bounces must be 0 or 1")
    if not is_free(grid, tx) or not is_free(grid, rx):
        raise ParameterError("tx and rx must lie on free cells")
    t = np.asarray(tx, dtype=float)
    r = np.asarray(rx, dtype=float)
    direct = float(np.hypot(*(r - t)))
    if direct == 0.0:
        raise ParameterError("tx and rx coincide; ray length would be zero")

    rays = []
    if segments_free(grid, [t], [r])[0]:
        rays.append(PathRay(direct, math.atan2(r[1] - t[1], r[0] - t[0]), 0))
    if max_bounces == 0:
        return rays

    start, end, normal = _wall_arrays(grid)
    if start.shape[0] == 0:
        return rays
    tangent = end - start
    wall_len = np.hypot(tangent[:, 0], tangent[:, 1])
    u = tangent / wall_len[:, None]
    dt = np.einsum("ij,ij->i", t[None, :] - start, normal)
    dr = np.einsum("ij,ij->i", r[None, :] - start, normal)
    ut = np.einsum("ij,ij->i", t[None, :] - start, u)
    ur = np.einsum("ij,ij->i", r[None, :] - start, u)
    facing = (dt > 0) & (dr > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = ut + (ur - ut) * dt / (dt + dr)
    on_wall = facing & (s >= 0) & (s <= wall_len)
    idx = np.flatnonzero(on_wall)
    if idx.size == 0:
        return rays
    point = start[idx] + s[idx, None] * u[idx]
    lifted = point + 1e-6 * grid.cell_size * normal[idx]
    tt = np.repeat(t[None, :], idx.size, axis=0)
    rr = np.repeat(r[None, :], idx.size, axis=0)
    visible = segments_free(grid, tt, lifted) & segments_free(grid, lifted, rr)
    for k in np.flatnonzero(visible):
        i = idx[k]
        length = float(np.hypot(ur[i] - ut[i], dt[i] + dr[i]))
        p = point[k]
        rays.append(PathRay(length, math.atan2(p[1] - t[1], p[0] - t[0]), 1))
    return rays


def pdp_matrix(
    rays: Sequence[PathRay],
    scene: ChannelScene,
    codebook: BeamCodebook,
    rng_seed: int,
    stats: dict | None = None,
) -> np.ndarray:
    """Power delay profiles of all beams, in dBm, shape ``(M, N_s)``.

    Noise is one ``Normal(0, noise_sigma_db)`` draw per (beam, ray), taken
    as a single ``(M, n_rays)`` block from ``rng_seed``.
    """
    M, ns = codebook.M, scene.n_samples
    out = np.full((M, ns), FLOOR_DB)
    if not rays:
        if stats is not None:
            stats["dropped"] = stats.get("dropped", 0)
        return out
    length = np.array([ray.length for ray in rays])
    angle = np.array([ray.departure_angle for ray in rays])
    bounces = np.array([ray.bounces for ray in rays])
    rng = np.random.default_rng(rng_seed)
    noise = rng.normal(0.0, scene.noise_sigma_db, size=(M, len(rays))) if scene.noise_sigma_db > 0 \
        else np.zeros((M, len(rays)))
    power = (
        scene.tx_power_dbm
        + scene.tx_gain_dbi * codebook.pattern(angle)
        + scene.rx_gain_dbi
        - scene.path_loss_db(length, bounces)[None, :]
        - bounces[None, :] * scene.reflection_loss_db
        + noise
    )
    bins = np.floor(length * scene.sampling_freq_hz / SPEED_OF_LIGHT).astype(np.int64)
    keep = bins < ns
    if stats is not None:
        stats["dropped"] = stats.get("dropped", 0) + int((~keep).sum())
    linear = np.zeros((M, ns))
    for j in np.unique(bins[keep]):
        sel = keep & (bins == j)
        linear[:, j] = np.sum(10.0 ** (power[:, sel] / 10.0), axis=1)
    hit = linear > 0
    out[hit] = 10.0 * np.log10(linear[hit])
    return out


def synth_pdp(
    rays: Sequence[PathRay],
    beam_index: int,
    scene: ChannelScene,
    codebook: BeamCodebook,
    rng_seed: int,
    stats: dict | None = None,
) -> np.ndarray:
    """Profile of a single beam (0-based ``beam_index``), length ``N_s``."""
    if not 0 <= beam_index < codebook.M:
        raise ParameterError(f"beam index {beam_index} outside 0..{codebook.M - 1}")
    return pdp_matrix(rays, scene, codebook, rng_seed, stats)[beam_index]


def binarize(pdp, eta: float) -> np.ndarray:
    return (np.asarray(pdp) >= eta).astype(np.uint8)


def build_fingerprint(
    grid: OccupancyGrid,
    tx: Sequence[float],
    rx: Sequence[float],
    codebook: BeamCodebook,
    scene: ChannelScene,
    seed: int,
    time_index: int = 0,
    rays: Sequence[PathRay] | None = None,
) -> Fingerprint:
    if rays is None:
        rays = trace_rays(grid, tx, rx)
    pdp = pdp_matrix(rays, scene, codebook, seed)
    return Fingerprint(binarize(pdp, scene.threshold_eta_db), Position(*map(float, rx)), int(time_index))


def derive_seed(*parts: int) -> int:
    """Stable 63-bit child seed for an integer key path."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]).generate_state(
        1, np.uint64)[0] >> np.uint64(1))


@dataclass(eq=False)
class FingerprintDataset:
    """Fingerprints with their positions, stored as parallel arrays."""

    bits: np.ndarray            # (n, M, N_s) uint8
    positions: np.ndarray       # (n, 2) float64
    time_index: np.ndarray      # (n,) int32
    grid_digest: str = ""
    scene_digest: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def records(self) -> list[tuple[Fingerprint, Position]]:
        out = []
        for k in range(len(self)):
            pos = Position(*map(float, self.positions[k]))
            out.append((Fingerprint(self.bits[k], pos, int(self.time_index[k])), pos))
        return out

    def digest(self) -> str:
        """Order-independent content hash."""
        order = np.lexsort((self.time_index, self.positions[:, 1], self.positions[:, 0]))
        h = hashlib.sha256()
        h.update(self.grid_digest.encode())
        h.update(self.scene_digest.encode())
        h.update(np.ascontiguousarray(self.positions[order]).tobytes())
        h.update(np.ascontiguousarray(self.time_index[order].astype("<i4")).tobytes())
        h.update(np.packbits(self.bits[order], axis=None).tobytes())
        return h.hexdigest()


def _dataset_chunk(args):
    grid, codebook, scene, seed, cells = args
    tx = scene.tx
    bits = np.zeros((len(cells), codebook.M, scene.n_samples), dtype=np.uint8)
    pos = np.zeros((len(cells), 2))
    for k, (row, col) in enumerate(cells):
        rx = grid.cell_center(int(row), int(col))
        index = int(row) * grid.width_cells + int(col)
        if rx == tx:
            rx = Position(rx.x + 0.25 * grid.cell_size, rx.y)
        fp = build_fingerprint(grid, tx, rx, codebook, scene, derive_seed(seed, index))
        bits[k] = fp.bits
        pos[k] = rx
    return bits, pos


def build_dataset(
    grid: OccupancyGrid,
    codebook: BeamCodebook,
    scene: ChannelScene,
    stride: int = 1,
    seed: int = 0,
    workers: int = 1,
) -> FingerprintDataset:
    """One fingerprint per free cell center on a ``stride`` lattice.

    Each record is seeded from ``(seed, row * width + col)``, so the result
    does not depend on evaluation order or on ``workers``. A receiver that
    would coincide with the transmitter is nudged a quarter cell east.
    """
    cells = free_cells(grid, stride)
    if workers > 1 and len(cells) > 1:
        chunks = np.array_split(cells, workers * 4)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_dataset_chunk, [(grid, codebook, scene, seed, c) for c in chunks if len(c)]))
        bits = np.concatenate([p[0] for p in parts])
        pos = np.concatenate([p[1] for p in parts])
    else:
        bits, pos = _dataset_chunk((grid, codebook, scene, seed, cells))
    return FingerprintDataset(
        bits, pos, np.zeros(len(pos), dtype=np.int32),
        grid.digest(), scene.digest(), {"seed": int(seed), "stride": int(stride)},
    )


def calibrate_threshold(
    grid: OccupancyGrid,
    codebook: BeamCodebook,
    scene: ChannelScene,
    target_density: float = 0.03,
    stride: int = 4,
) -> float:
    """Threshold giving the requested median ones-density over a grid sample.

    Evaluated without noise on the cell centers of a ``stride`` lattice. The
    median density is monotone non-increasing in ``eta``, so bisection works.
    """
    quiet = scene.with_(noise_sigma_db=0.0)
    profiles = []
    for row, col in free_cells(grid, stride):
        rx = grid.cell_center(int(row), int(col))
        if rx == quiet.tx:
            continue
        profiles.append(pdp_matrix(trace_rays(grid, quiet.tx, rx), quiet, codebook, 0))
    stack = np.stack(profiles)

    def median_density(eta):
        return float(np.median((stack >= eta).mean(axis=(1, 2))))

    lo, hi = -200.0, 100.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if median_density(mid) > target_density:
            lo = mid
        else:
            hi = mid
    return round(hi, 3)


def save_dataset(ds: FingerprintDataset, path: str | Path, meta: dict | None = None) -> None:
    n, M, ns = ds.bits.shape if ds.bits.ndim == 3 else (0, 0, 0)
    header = _DS_HEADER.pack(
        DATASET_MAGIC, DATASET_VERSION, M, ns, n,
        bytes.fromhex(ds.grid_digest or "00" * 32), bytes.fromhex(ds.scene_digest or "00" * 32),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        _io.write_meta(fh, {**ds.meta, **(meta or {})})
        for k in range(n):
            fh.write(_DS_RECORD.pack(float(ds.positions[k, 0]), float(ds.positions[k, 1]), int(ds.time_index[k])))
            fh.write(np.packbits(ds.bits[k], axis=None).tobytes())


def load_dataset(path: str | Path) -> FingerprintDataset:
    data = Path(path).read_bytes()
    if len(data) < _DS_HEADER.size:
        raise FormatError(f"{path}: truncated dataset header")
    magic, version, M, ns, n, gd, sd = _DS_HEADER.unpack_from(data)
    _io.check_magic(data, DATASET_MAGIC, DATASET_VERSION, version, str(path))
    meta, off = _io.read_meta(data, _DS_HEADER.size)
    nbits = (M * ns + 7) // 8
    rec = _DS_RECORD.size + nbits
    if len(data) - off != n * rec:
        raise FormatError(f"{path}: expected {n} records")
    bits = np.zeros((n, M, ns), dtype=np.uint8)
    pos = np.zeros((n, 2))
    tix = np.zeros(n, dtype=np.int32)
    for k in range(n):
        x, y, t = _DS_RECORD.unpack_from(data, off)
        raw = np.frombuffer(data, np.uint8, nbits, off + _DS_RECORD.size)
        bits[k] = np.unpackbits(raw, count=M * ns).reshape(M, ns)
        pos[k] = (x, y)
        tix[k] = t
        off += rec
    return FingerprintDataset(bits, pos, tix, gd.hex(), sd.hex(), meta)
