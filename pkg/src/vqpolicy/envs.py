"""Synthetic 2-D control tasks with multimodal scripted demonstrations.

Both environments are deterministic point-mass worlds on [-1, 1]^2 with
per-axis action clamping at 0.1.  All multimodality lives in the
demonstrations: FourGoalWorld demos visit the four corner goals in a
uniformly random order, DetourWorld demos pass the central obstacle on a
uniformly random side.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

import numpy as np

from .data import TrajectoryDataset
from .rng import SeededRng

ACTION_LIMIT = 0.1
GOAL_RADIUS = 0.1

FOUR_GOALS = np.array(
    [[0.8, 0.8], [-0.8, 0.8], [-0.8, -0.8], [0.8, -0.8]], dtype=np.float32
)

DETOUR_START = np.array([-0.8, 0.0], dtype=np.float32)
DETOUR_TARGET = np.array([0.8, 0.0], dtype=np.float32)
OBSTACLE_RADIUS = 0.3


def _clamp_action(action: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(action, dtype=np.float32), -ACTION_LIMIT, ACTION_LIMIT)


class FourGoalWorld:
    """Visit four corner goals; observations carry position plus visited flags."""

    obs_dim = 6
    act_dim = 2
    max_steps = 200
    kind = "four_goal"

    def __init__(self):
        self.reset()

    def reset(self) -> np.ndarray:
        self.pos = np.zeros(2, dtype=np.float32)
        self.visited = np.zeros(4, dtype=bool)
        self.order: list[int] = []
        self.steps = 0
        self.done = False
        return self.observe()

    def observe(self) -> np.ndarray:
        return np.concatenate([self.pos, self.visited.astype(np.float32)])

    def step(self, action) -> tuple[np.ndarray, bool]:
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        self.pos = np.clip(self.pos + _clamp_action(action), -1.0, 1.0).astype(np.float32)
        self.steps += 1
        dists = np.linalg.norm(FOUR_GOALS - self.pos, axis=1)
        for i in np.flatnonzero(~self.visited & (dists < GOAL_RADIUS)):
            self.visited[i] = True
            self.order.append(int(i))
        self.done = bool(self.visited.all()) or self.steps >= self.max_steps
        return self.observe(), self.done

    @property
    def success_count(self) -> int:
        return int(self.visited.sum())


class DetourWorld:
    """Reach the far side of an obstacle; passing above or below are the two modes."""

    obs_dim = 2
    act_dim = 2
    max_steps = 150
    kind = "detour"

    def __init__(self):
        self.reset()

    def reset(self) -> np.ndarray:
        self.pos = DETOUR_START.copy()
        self.steps = 0
        self.done = False
        self.collided = False
        self.reached = False
        self._peak_y = 0.0
        return self.observe()

    def observe(self) -> np.ndarray:
        return self.pos.copy()

    def step(self, action) -> tuple[np.ndarray, bool]:
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        self.pos = np.clip(self.pos + _clamp_action(action), -1.0, 1.0).astype(np.float32)
        self.steps += 1
        if abs(self.pos[1]) > abs(self._peak_y):
            self._peak_y = float(self.pos[1])
        if np.linalg.norm(self.pos) < OBSTACLE_RADIUS:
            self.collided = True
            self.done = True
        elif np.linalg.norm(self.pos - DETOUR_TARGET) < GOAL_RADIUS:
            self.reached = True
            self.done = True
        elif self.steps >= self.max_steps:
            self.done = True
        return self.observe(), self.done

    @property
    def success_count(self) -> int:
        return int(self.reached)

    @property
    def route(self) -> str:
        if self._peak_y > 0:
            return "upper"
        if self._peak_y < 0:
            return "lower"
        return "none"


def make_env(kind: str):
    if kind == "four_goal":
        return FourGoalWorld()
    if kind == "detour":
        return DetourWorld()
    raise ValueError(f"unknown environment {kind!r}")


# -- scripted demonstrations ---------------------------------------------------

_KP = 5.0
_NOISE = 0.01
_WAYPOINT_RADIUS = 0.08


def _control_toward(target: np.ndarray, pos: np.ndarray, rng: SeededRng) -> np.ndarray:
    noise = rng.uniform(-_NOISE, _NOISE, 2)
    return np.clip(_KP * (target - pos) + noise, -ACTION_LIMIT, ACTION_LIMIT).astype(np.float32)


def _four_goal_demo(rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    env = FourGoalWorld()
    order = [int(i) for i in rng.permutation(4)]
    obs_rows, act_rows = [], []
    for goal in order:
        while not env.visited[goal] and not env.done:
            action = _control_toward(FOUR_GOALS[goal], env.pos, rng)
            obs_rows.append(env.observe())
            env.step(action)
            act_rows.append(action)
    return np.stack(obs_rows), np.stack(act_rows)


_DETOUR_WAYPOINTS = {
    "upper": np.array([[-0.45, 0.5], [0.45, 0.5]], dtype=np.float32),
    "lower": np.array([[-0.45, -0.5], [0.45, -0.5]], dtype=np.float32),
}


def _detour_demo(rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    env = DetourWorld()
    route = "upper" if rng.integers(2) == 0 else "lower"
    targets = list(_DETOUR_WAYPOINTS[route]) + [DETOUR_TARGET]
    obs_rows, act_rows = [], []
    for i, target in enumerate(targets):
        last = i == len(targets) - 1
        while not env.done:
            if not last and np.linalg.norm(env.pos - target) < _WAYPOINT_RADIUS:
                break
            action = _control_toward(target, env.pos, rng)
            obs_rows.append(env.observe())
            env.step(action)
            act_rows.append(action)
    return np.stack(obs_rows), np.stack(act_rows)


def scripted_demonstrator(kind: str, rng: SeededRng, count: int) -> TrajectoryDataset:
    """Generate `count` noisy successful demonstrations by stepping the env."""
    if count <= 0:
        raise ValueError("demonstration count must be positive")
    maker = {"four_goal": _four_goal_demo, "detour": _detour_demo}[kind]
    obs, actions = [], []
    for i in range(count):
        o, a = maker(rng.split(f"demo{i}"))
        obs.append(o)
        actions.append(a)
    return TrajectoryDataset(obs=obs, actions=actions)


# -- analysis helpers -----------------------------------------------------------


def four_goal_completion_order(obs: np.ndarray) -> list[int]:
    """Recover the goal visit order from a trajectory's visited-flag columns.

    The final goal of a completed episode never shows up as a flipped flag
    (recording stops on the entering step), so with exactly one unvisited
    flag left it is appended as the last entry.
    """
    flags = obs[:, 2:6] > 0.5
    first_on = [int(np.argmax(flags[:, i])) if flags[:, i].any() else -1 for i in range(4)]
    order = sorted((i for i in range(4) if first_on[i] >= 0), key=lambda i: first_on[i])
    missing = [i for i in range(4) if first_on[i] < 0]
    if len(missing) == 1 and len(order) == 3:
        order.append(missing[0])
    return order


def detour_route(obs: np.ndarray) -> str:
    ys = obs[:, 1]
    peak = ys[np.argmax(np.abs(ys))]
    if peak > 0:
        return "upper"
    if peak < 0:
        return "lower"
    return "none"


def completion_order_entropy(sequences: Sequence[Sequence], k: int) -> float:
    """Shannon entropy (bits) of the empirical distribution of k-prefixes.

    Only sequences that completed at least k entries count; having none of
    them is an error rather than a silent zero.
    """
    prefixes = [tuple(s[:k]) for s in sequences if len(s) >= k]
    if not prefixes:
        raise ValueError(f"no sequence has {k} or more completed entries")
    counts = Counter(prefixes)
    total = len(prefixes)
    return -sum((c / total) * math.log2(c / total) for c in counts.values())


def success_metrics(success_counts: Sequence[int], max_goals: int) -> dict:
    """Expected goals and p-K completion rates from per-episode success counts."""
    counts = np.asarray(success_counts, dtype=np.float64)
    out = {"expected_goals": float(counts.mean()), "episodes": int(len(counts))}
    for k in range(1, max_goals + 1):
        out[f"p{k}"] = float((counts >= k).mean())
    return out
