"""Trajectory datasets: binary storage, normalization, training windows.

On-disk layout (all integers and floats little-endian):

    magic   4 bytes  b"VQBD"
    version u16      currently 1
    obs_dim u32
    act_dim u32
    count   u32      number of trajectories
    lengths count * u32
    per trajectory: observations (T * obs_dim f32), then actions (T * act_dim f32)
    crc32   u32      over every preceding byte

A JSON manifest with counts, dims, and action statistics is written next
to the binary file for quick inspection; the binary file alone is
sufficient to reload the dataset.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import SeededRng

MAGIC = b"VQBD"
VERSION = 1


class DataFormatError(RuntimeError):
    """Raised for malformed dataset files or inconsistent trajectories."""


@dataclass
class ActionStats:
    """Per-dimension action bounds used for [-1, 1] normalization."""

    lo: np.ndarray
    hi: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return (self.hi + self.lo) / 2.0

    @property
    def scale(self) -> np.ndarray:
        return (self.hi - self.lo) / 2.0


@dataclass
class TrajectoryDataset:
    obs: list[np.ndarray]
    actions: list[np.ndarray]

    def __post_init__(self):
        if not self.obs:
            raise DataFormatError("dataset needs at least one trajectory")
        if len(self.obs) != len(self.actions):
            raise DataFormatError("observation / action trajectory counts differ")
        obs_dim = self.obs[0].shape[1]
        act_dim = self.actions[0].shape[1]
        for i, (o, a) in enumerate(zip(self.obs, self.actions)):
            if len(o) != len(a):
                raise DataFormatError(f"trajectory {i}: {len(o)} observations vs {len(a)} actions")
            if len(o) == 0:
                raise DataFormatError(f"trajectory {i} is empty")
            if o.shape[1] != obs_dim or a.shape[1] != act_dim:
                raise DataFormatError(f"trajectory {i} dims disagree with trajectory 0")
            if not (np.all(np.isfinite(o)) and np.all(np.isfinite(a))):
                raise DataFormatError(f"trajectory {i} contains non-finite values")

    @property
    def obs_dim(self) -> int:
        return self.obs[0].shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions[0].shape[1]

    @property
    def lengths(self) -> list[int]:
        return [len(o) for o in self.obs]

    def action_stats(self) -> ActionStats:
        flat = np.concatenate(self.actions, axis=0)
        return ActionStats(lo=flat.min(axis=0), hi=flat.max(axis=0))


def normalize(actions: np.ndarray, stats: ActionStats) -> np.ndarray:
    """Map actions into [-1, 1] per dimension; constant dimensions go to 0."""
    scale = stats.scale
    safe = np.where(scale > 0, scale, 1.0)
    out = (actions - stats.center) / safe
    return np.where(scale > 0, out, 0.0).astype(np.float32)


def denormalize(normed: np.ndarray, stats: ActionStats) -> np.ndarray:
    return (normed * stats.scale + stats.center).astype(np.float32)


# -- binary io ---------------------------------------------------------------


def write_dataset(ds: TrajectoryDataset, path: str | Path) -> None:
    path = Path(path)
    parts = [MAGIC, struct.pack("<HIII", VERSION, ds.obs_dim, ds.act_dim, len(ds.obs))]
    parts.append(struct.pack(f"<{len(ds.obs)}I", *ds.lengths))
    for o, a in zip(ds.obs, ds.actions):
        parts.append(o.astype("<f4").tobytes())
        parts.append(a.astype("<f4").tobytes())
    body = b"".join(parts)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))

    stats = ds.action_stats()
    manifest = {
        "trajectories": len(ds.obs),
        "steps": int(sum(ds.lengths)),
        "obs_dim": ds.obs_dim,
        "act_dim": ds.act_dim,
        "action_min": [float(v) for v in stats.lo],
        "action_max": [float(v) for v in stats.hi],
    }
    Path(str(path) + ".json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def read_dataset(path: str | Path) -> TrajectoryDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 22 or raw[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a trajectory dataset")
    body, crc_bytes = raw[:-4], raw[-4:]
    if zlib.crc32(body) != struct.unpack("<I", crc_bytes)[0]:
        raise DataFormatError(f"{path}: checksum mismatch, file is corrupt")
    version, obs_dim, act_dim, count = struct.unpack_from("<HIII", body, 4)
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    off = 4 + 14
    lengths = struct.unpack_from(f"<{count}I", body, off)
    off += 4 * count
    obs, actions = [], []
    for t in lengths:
        o = np.frombuffer(body, dtype="<f4", count=t * obs_dim, offset=off)
        off += 4 * t * obs_dim
        a = np.frombuffer(body, dtype="<f4", count=t * act_dim, offset=off)
        off += 4 * t * act_dim
        obs.append(o.reshape(t, obs_dim).copy())
        actions.append(a.reshape(t, act_dim).copy())
    if off != len(body):
        raise DataFormatError(f"{path}: trailing bytes after payload")
    return TrajectoryDataset(obs=obs, actions=actions)


# -- training windows ---------------------------------------------------------


@dataclass
class WindowSample:
    obs_window: np.ndarray  # (h, obs_dim), left-padded with the first frame
    action_chunk: np.ndarray  # (n, act_dim)
    goal_window: np.ndarray | None  # (g, obs_dim) when goals are requested
    traj: int
    t: int


@dataclass
class WindowBatch:
    """All training windows of a dataset, materialized as flat arrays."""

    obs: np.ndarray  # (N, h, obs_dim)
    chunks: np.ndarray  # (N, n, act_dim)
    goals: np.ndarray | None  # (N, g, obs_dim)
    traj: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)


def _padded_windows(frames: np.ndarray, h: int) -> np.ndarray:
    pad = np.repeat(frames[:1], h - 1, axis=0) if h > 1 else frames[:0]
    padded = np.concatenate([pad, frames], axis=0)
    idx = np.arange(len(frames))[:, None] + np.arange(h)
    return padded[idx]


def _goal_block(frames: np.ndarray, g: int) -> np.ndarray:
    if len(frames) >= g:
        return frames[len(frames) - g:]
    pad = np.repeat(frames[:1], g - len(frames), axis=0)
    return np.concatenate([pad, frames], axis=0)


def build_windows(
    ds: TrajectoryDataset,
    h: int,
    n: int,
    g: int = 0,
    goal_source: str = "final",
    goal_future_offset: int = 0,
) -> WindowBatch:
    """Every (trajectory, t) pair with t + n <= T, in trajectory-major order.

    Observation windows hold the h frames ending at t; chunks hold the n
    actions starting at t.  Goal windows default to the final g frames of
    the sample's own trajectory; ``goal_source="future"`` instead takes g
    frames starting ``goal_future_offset`` steps past t (clamped to the
    trajectory end).
    """
    if goal_source not in ("final", "future"):
        raise ValueError(f"unknown goal_source {goal_source!r}")
    all_obs, all_chunks, all_goals, all_traj, all_t = [], [], [], [], []
    for k, (o, a) in enumerate(zip(ds.obs, ds.actions)):
        valid = len(o) - n + 1
        if valid <= 0:
            continue
        ts = np.arange(valid)
        all_obs.append(_padded_windows(o, h)[:valid])
        all_chunks.append(a[ts[:, None] + np.arange(n)])
        all_traj.append(np.full(valid, k))
        all_t.append(ts)
        if g > 0:
            if goal_source == "final":
                goals = np.broadcast_to(_goal_block(o, g), (valid, g, o.shape[1]))
            else:
                padded = o if len(o) >= g else np.concatenate(
                    [o, np.repeat(o[-1:], g - len(o), axis=0)], axis=0
                )
                starts = np.minimum(ts + goal_future_offset, len(padded) - g)
                goals = padded[starts[:, None] + np.arange(g)]
            all_goals.append(goals)
    if not all_obs:
        raise DataFormatError(f"no trajectory is long enough for chunks of {n} actions")
    return WindowBatch(
        obs=np.concatenate(all_obs).astype(np.float32),
        chunks=np.concatenate(all_chunks).astype(np.float32),
        goals=np.concatenate(all_goals).astype(np.float32) if g > 0 else None,
        traj=np.concatenate(all_traj),
        t=np.concatenate(all_t),
    )


def window_iter(
    ds: TrajectoryDataset,
    h: int,
    n: int,
    rng: SeededRng,
    g: int = 0,
    goal_source: str = "final",
    goal_future_offset: int = 0,
) -> Iterator[WindowSample]:
    """Yield every window exactly once per call, in rng-shuffled order."""
    batch = build_windows(ds, h, n, g, goal_source, goal_future_offset)
    for i in rng.permutation(len(batch)):
        yield WindowSample(
            obs_window=batch.obs[i],
            action_chunk=batch.chunks[i],
            goal_window=batch.goals[i] if batch.goals is not None else None,
            traj=int(batch.traj[i]),
            t=int(batch.t[i]),
        )
