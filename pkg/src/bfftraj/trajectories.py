"""Pedestrian-, vehicle- and hybrid-like trajectories over the free grid."""

from __future__ import annotations

import hashlib
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _io
from .errors import FormatError, GenerationError, ParameterError
from .fingerprint import (
    BeamCodebook, ChannelScene, Fingerprint, FingerprintDataset, PathRay, build_fingerprint,
    derive_seed, load_dataset, save_dataset, trace_rays,
)
from .gridworld import OccupancyGrid, Position, free_at, free_cells, segments_free

CORPUS_MAGIC = b"BFTR"
CORPUS_VERSION = 1
_TR_HEADER = struct.Struct("<4sIQ")
_TR_RECORD = struct.Struct("<QIIq")

MAX_HEADING_RETRIES = 16


@dataclass(frozen=True)
class MotionProfile:
    kind: str = "pedestrian"
    avg_speed: float = 5 / 3.6
    speed_sigma: float = 0.2 * 5 / 3.6
    turn_prob: float = 0.3
    stop_prob: float = 0.1
    max_turn: float = math.pi / 2
    sample_rate: float = 1.0

    def __post_init__(self):
        if not self.avg_speed > 0:
            raise ParameterError("avg_speed must be positive")
        if not (0 <= self.turn_prob <= 1 and 0 <= self.stop_prob <= 1):
            raise ParameterError("probabilities must lie in [0, 1]")
        if self.speed_sigma < 0 or not self.sample_rate > 0:
            raise ParameterError("speed_sigma must be >= 0 and sample_rate > 0")

    @property
    def max_step(self) -> float:
        return (self.avg_speed + 3 * self.speed_sigma) / self.sample_rate


PEDESTRIAN = MotionProfile()
VEHICLE = MotionProfile(
    kind="vehicle", avg_speed=30 / 3.6, speed_sigma=0.1 * 30 / 3.6,
    turn_prob=0.1, stop_prob=0.0, max_turn=math.pi / 6,
)
HYBRID = MotionProfile(
    kind="hybrid",
    avg_speed=(PEDESTRIAN.avg_speed + VEHICLE.avg_speed) / 2,
    speed_sigma=(PEDESTRIAN.speed_sigma + VEHICLE.speed_sigma) / 2,
    turn_prob=(PEDESTRIAN.turn_prob + VEHICLE.turn_prob) / 2,
    stop_prob=(PEDESTRIAN.stop_prob + VEHICLE.stop_prob) / 2,
    max_turn=(PEDESTRIAN.max_turn + VEHICLE.max_turn) / 2,
)
PROFILES = {p.kind: p for p in (PEDESTRIAN, VEHICLE, HYBRID)}


def default_t_obs(L: int) -> int:
    return max(1, min(L - 1, math.ceil(2 * L / 3)))


@dataclass(eq=False)
class Trajectory:
    """``L`` ordered positions; the first ``T_obs`` are observed.

    ``fingerprints`` is ``None`` or a ``(L, M, N_s)`` uint8 array.
    """

    id: int
    positions: np.ndarray
    T_obs: int
    kind: str = "pedestrian"
    fingerprints: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if not 1 <= self.T_obs < self.L:
            raise ParameterError(f"T_obs={self.T_obs} must satisfy 1 <= T_obs < L={self.L}")

    @property
    def L(self) -> int:
        return self.positions.shape[0]

    @property
    def horizon(self) -> int:
        return self.L - self.T_obs

    @property
    def observed(self) -> np.ndarray:
        return self.positions[: self.T_obs]

    @property
    def target(self) -> np.ndarray:
        return self.positions[self.T_obs:]

    def fingerprint_list(self) -> list[Fingerprint]:
        if self.fingerprints is None:
            return []
        return [
            Fingerprint(self.fingerprints[l], Position(*self.positions[l]), l)
            for l in range(self.L)
        ]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)


def trajectory_id(seed: int, profile: MotionProfile, L: int, grid_digest: str) -> int:
    """64-bit identifier of the generating parameter set."""
    key = _io.canonical_json({"seed": int(seed), "profile": asdict(profile), "L": int(L), "grid": grid_digest})
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def _reflect(grid: OccupancyGrid, p: np.ndarray, step: np.ndarray) -> np.ndarray:
    """Mirror the blocked component(s) of ``step``."""
    bx = not segments_free(grid, [p], [p + (step[0], 0.0)])[0]
    by = not segments_free(grid, [p], [p + (0.0, step[1])])[0]
    if bx == by:
        return -step
    return np.array([-step[0], step[1]]) if bx else np.array([step[0], -step[1]])


def generate_trajectory(
    grid: OccupancyGrid,
    profile: MotionProfile,
    L: int,
    seed: int,
    T_obs: int | None = None,
) -> Trajectory:
    """Random walk with heading persistence and obstacle avoidance.

    Each step: hold with ``stop_prob``; otherwise perturb the heading by
    ``U(-max_turn, max_turn)`` with ``turn_prob`` and move ``speed / rate``
    with ``speed ~ N(avg, sigma)`` clipped to ``(0, avg + 3 sigma]``. A blocked
    step retries headings drawn from a cone that widens to the full circle
    over ``MAX_HEADING_RETRIES`` tries, then falls back to a reflection.
    """
    if L < 2:
        raise ParameterError("trajectory length must be >= 2")
    cells = free_cells(grid)
    if len(cells) == 0:
        raise ParameterError("grid has no free cell")
    rng = np.random.default_rng(seed)
    row, col = cells[rng.integers(len(cells))]
    p = (np.array([col, row], dtype=float) + rng.uniform(0.05, 0.95, size=2)) * grid.cell_size
    heading = rng.uniform(0, 2 * math.pi)
    hi = profile.avg_speed + 3 * profile.speed_sigma
    positions = [p.copy()]

    for _ in range(L - 1):
        if rng.random() < profile.stop_prob:
            positions.append(p.copy())
            continue
        if rng.random() < profile.turn_prob:
            heading += rng.uniform(-profile.max_turn, profile.max_turn)
        speed = float(np.clip(rng.normal(profile.avg_speed, profile.speed_sigma), 1e-3 * hi, hi))
        dist = speed / profile.sample_rate
        step = dist * np.array([math.cos(heading), math.sin(heading)])
        if not segments_free(grid, [p], [p + step])[0]:
            # one batched check over the widening cone of candidate headings
            spread = math.pi * np.arange(1, MAX_HEADING_RETRIES + 1) / MAX_HEADING_RETRIES
            cand = heading + rng.uniform(-1.0, 1.0, size=MAX_HEADING_RETRIES) * spread
            steps = dist * np.stack([np.cos(cand), np.sin(cand)], axis=1)
            ok = segments_free(grid, np.repeat(p[None], len(cand), 0), p + steps)
            if ok.any():
                k = int(np.argmax(ok))
                heading, step = float(cand[k]), steps[k]
            else:
                step = _reflect(grid, p, step)
                if not segments_free(grid, [p], [p + step])[0]:
                    raise GenerationError("no collision-free step after retries and reflection")
                heading = math.atan2(step[1], step[0])
        p = p + step
        positions.append(p.copy())

    return Trajectory(
        trajectory_id(seed, profile, L, grid.digest()),
        np.array(positions),
        default_t_obs(L) if T_obs is None else T_obs,
        profile.kind,
    )


def generate_corpus(
    grid: OccupancyGrid,
    profile: MotionProfile,
    n: int,
    L: int,
    seed: int,
    T_obs: int | None = None,
) -> list[Trajectory]:
    """``n`` trajectories from child seeds of ``seed``; failed draws re-seed."""
    out = []
    for k in range(n):
        for attempt in range(100):
            try:
                out.append(generate_trajectory(grid, profile, L, derive_seed(seed, k, attempt), T_obs))
                break
            except GenerationError:
                continue
        else:
            raise GenerationError(f"trajectory {k}: 100 seeds failed")
    return out


def validate_trajectory(grid: OccupancyGrid, traj: Trajectory, profile: MotionProfile | None = None) -> list[str]:
    """Problems found walking the trajectory; empty when it is valid."""
    problems = []
    pos = traj.positions
    if not np.isfinite(pos).all():
        problems.append("non-finite coordinates")
    if not free_at(grid, pos[:, 0], pos[:, 1]).all():
        problems.append("position on a blocked cell")
    if traj.L > 1 and not segments_free(grid, pos[:-1], pos[1:]).all():
        problems.append("segment crosses a blocked cell")
    if profile is not None and traj.L > 1:
        steps = np.hypot(*np.diff(pos, axis=0).T)
        if steps.max() > profile.max_step * (1 + 1e-9):
            problems.append(f"step {steps.max():.3f} m exceeds {profile.max_step:.3f} m")
    if not 1 <= traj.T_obs < traj.L:
        problems.append("T_obs out of range")
    return problems


class RayCache:
    """Memoizes :func:`trace_rays` per receiver position."""

    def __init__(self, grid: OccupancyGrid, tx: Sequence[float]):
        self.grid = grid
        self.tx = tuple(map(float, tx))
        self._store: dict[tuple[float, float], list[PathRay]] = {}

    def __call__(self, rx: Sequence[float]) -> list[PathRay]:
        key = (float(rx[0]), float(rx[1]))
        rays = self._store.get(key)
        if rays is None:
            rays = trace_rays(self.grid, self.tx, key) if key != self.tx else []
            self._store[key] = rays
        return rays


def attach_fingerprints(
    grid: OccupancyGrid,
    traj: Trajectory,
    codebook: BeamCodebook,
    scene: ChannelScene,
    seed: int,
    rays: RayCache | None = None,
) -> Trajectory:
    """Copy of ``traj`` with one fingerprint per step.

    Step ``l`` is seeded from ``(seed, traj.id, l)``. A receiver exactly on
    the transmitter gets no rays (all-floor profile).
    """
    rays = rays or RayCache(grid, scene.tx)
    fps = np.zeros((traj.L, codebook.M, scene.n_samples), dtype=np.uint8)
    for l in range(traj.L):
        rx = traj.positions[l]
        fp = build_fingerprint(grid, scene.tx, rx, codebook, scene, derive_seed(seed, traj.id, l), l, rays=rays(rx))
        fps[l] = fp.bits
    return replace(traj, fingerprints=fps)


def _attach_chunk(args):
    grid, trajs, codebook, scene, seed = args
    rays = RayCache(grid, scene.tx)
    return [attach_fingerprints(grid, t, codebook, scene, seed, rays) for t in trajs]


def attach_corpus(
    grid: OccupancyGrid,
    trajs: Sequence[Trajectory],
    codebook: BeamCodebook,
    scene: ChannelScene,
    seed: int,
    workers: int = 1,
) -> list[Trajectory]:
    """:func:`attach_fingerprints` over a corpus; independent of ``workers``."""
    trajs = list(trajs)
    if workers > 1 and len(trajs) > 1:
        chunks = [trajs[i::workers * 4] for i in range(workers * 4)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_attach_chunk, [(grid, c, codebook, scene, seed) for c in chunks if c]))
        done = {t.id: t for part in parts for t in part}
        return [done[t.id] for t in trajs]
    return _attach_chunk((grid, trajs, codebook, scene, seed))


def split_corpus(ids: Sequence[int], fractions=(0.70, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then contiguous train/val/test slices."""
    ids = list(ids)
    if not ids:
        raise ParameterError("cannot split an empty corpus")
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise ParameterError(f"fractions {fractions} must be 3 non-negative values summing to 1")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_train = int(round(fr[0] * n))
    n_val = min(n - n_train, int(round(fr[1] * n)))
    return DatasetSplit(
        tuple(shuffled[:n_train]),
        tuple(shuffled[n_train:n_train + n_val]),
        tuple(shuffled[n_train + n_val:]),
        fr,
    )


def save_corpus(
    trajs: Sequence[Trajectory],
    path: str | Path,
    fingerprint_path: str | Path | None = None,
    meta: dict | None = None,
    grid_digest: str = "",
    scene_digest: str = "",
) -> None:
    """Write a ``BFTR`` corpus; fingerprints go to a companion ``BFFD`` file.

    Each record stores the index of its first fingerprint record (``-1`` if
    the trajectory has none).
    """
    refs = []
    bits, pos, tix = [], [], []
    n_rec = 0
    for t in trajs:
        if t.fingerprints is not None and fingerprint_path is not None:
            refs.append(n_rec)
            bits.append(t.fingerprints)
            pos.append(t.positions)
            tix.append(np.arange(t.L, dtype=np.int32))
            n_rec += t.L
        else:
            refs.append(-1)
    meta = dict(meta or {})
    if n_rec:
        meta["fingerprint_file"] = Path(fingerprint_path).name
    with open(path, "wb") as fh:
        fh.write(_TR_HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, len(trajs)))
        _io.write_meta(fh, meta)
        for t, ref in zip(trajs, refs):
            kind = t.kind.encode()
            fh.write(_TR_RECORD.pack(t.id, t.L, t.T_obs, ref))
            fh.write(struct.pack("<B", len(kind)) + kind)
            fh.write(np.ascontiguousarray(t.positions, dtype="<f8").tobytes())
    if fingerprint_path is not None and bits:
        ds = FingerprintDataset(
            np.concatenate(bits), np.concatenate(pos), np.concatenate(tix),
            grid_digest, scene_digest, meta,
        )
        save_dataset(ds, fingerprint_path)


def load_corpus(path: str | Path, fingerprint_path: str | Path | None = None) -> tuple[list[Trajectory], dict]:
    """Read a ``BFTR`` corpus.

    Without ``fingerprint_path`` the companion file named in the metadata is
    looked up next to ``path``.
    """
    data = Path(path).read_bytes()
    if len(data) < _TR_HEADER.size:
        raise FormatError(f"{path}: truncated corpus header")
    _, version, count = _TR_HEADER.unpack_from(data)
    _io.check_magic(data, CORPUS_MAGIC, CORPUS_VERSION, version, str(path))
    meta, off = _io.read_meta(data, _TR_HEADER.size)
    if fingerprint_path is None and "fingerprint_file" in meta:
        fingerprint_path = Path(path).with_name(meta["fingerprint_file"])
        if not fingerprint_path.exists():
            raise FormatError(f"{path}: companion fingerprint file {fingerprint_path} is missing")
    fps = load_dataset(fingerprint_path) if fingerprint_path is not None else None
    out = []
    try:
        for _ in range(count):
            tid, L, t_obs, ref = _TR_RECORD.unpack_from(data, off)
            off += _TR_RECORD.size
            (nk,) = struct.unpack_from("<B", data, off)
            kind = data[off + 1: off + 1 + nk].decode()
            off += 1 + nk
            positions = np.frombuffer(data, "<f8", 2 * L, off).reshape(L, 2).copy()
            off += 16 * L
            bits = fps.bits[ref: ref + L].copy() if (fps is not None and ref >= 0) else None
            out.append(Trajectory(tid, positions, t_obs, kind, bits))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: corrupt corpus ({exc})") from None
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes after {count} trajectories")
    return out, meta
