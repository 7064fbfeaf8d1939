"""Closed-loop rollouts, aggregate reports, and timing probes.

A rollout keeps the last h observations as the policy input window,
samples one code tuple per prediction, decodes it through the tokenizer,
adds the offset, denormalizes, and executes either the first action
(closed loop) or the first j actions (receding horizon) before predicting
again.  Reports are plain dicts serialized as sorted-key JSON so that
identical runs produce identical bytes; wall-clock timing never enters a
report unless a timing probe is attached explicitly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ActionStats, TrajectoryDataset, denormalize
from .envs import (
    DetourWorld,
    FourGoalWorld,
    completion_order_entropy,
    four_goal_completion_order,
    make_env,
    success_metrics,
)
from .policy import PolicyNet, sample_action
from .quantizer import ResidualQuantizer
from .rng import SeededRng


@dataclass
class PolicyBundle:
    """Everything a rollout needs: nets, action bounds, optional code mask."""

    net: PolicyNet
    quantizer: ResidualQuantizer
    stats: ActionStats
    mask: np.ndarray | None = None


@dataclass
class RolloutConfig:
    episodes: int = 100
    execution: str = "closed_loop"  # or "receding"
    receding_steps: int = 1
    temperature: float = 1.0
    conditional: bool = False
    seed: int = 0

    @property
    def actions_per_prediction(self) -> int:
        return 1 if self.execution == "closed_loop" else self.receding_steps


@dataclass
class EpisodeResult:
    success_count: int
    steps: int
    order: list[int] = field(default_factory=list)
    route: str | None = None
    collided: bool = False
    commanded: list[int] | None = None
    commanded_hits: int | None = None
    forward_passes: int = 0
    obs: np.ndarray | None = None
    actions: np.ndarray | None = None
    codes: np.ndarray | None = None


def _subsequence_hits(order: list[int], commanded: list[int]) -> int:
    ptr = 0
    for g in order:
        if ptr < len(commanded) and g == commanded[ptr]:
            ptr += 1
    return ptr


def _goal_command(ds: TrajectoryDataset, g: int, rng: SeededRng) -> tuple[np.ndarray, list[int]]:
    """A demo's final frames as the goal window, its last two goals as the target."""
    traj = ds.obs[int(rng.integers(len(ds.obs)))]
    window = traj[-g:] if len(traj) >= g else np.concatenate(
        [np.repeat(traj[:1], g - len(traj), axis=0), traj]
    )
    commanded = four_goal_completion_order(traj)[-2:]
    return window.astype(np.float32), commanded


def run_episode(
    bundle: PolicyBundle,
    env,
    cfg: RolloutConfig,
    rng: SeededRng,
    goal: np.ndarray | None = None,
    keep_trace: bool = False,
) -> EpisodeResult:
    net = bundle.net
    h = net.cfg.obs_window
    exec_n = cfg.actions_per_prediction
    obs = env.reset()
    window = [obs] * h
    before = net.forward_calls
    trace_obs, trace_act, trace_codes = [obs], [], []

    while not env.done:
        codes, offset = sample_action(
            net, np.stack(window), goal, rng, cfg.temperature, bundle.mask
        )
        chunk = bundle.quantizer.decode_codes(codes)[0] + offset
        actions = denormalize(chunk, bundle.stats)
        for j in range(exec_n):
            obs, done = env.step(actions[j])
            window = window[1:] + [obs]
            if keep_trace:
                trace_act.append(actions[j])
                trace_obs.append(obs)
                trace_codes.append(codes)
            if done:
                break

    result = EpisodeResult(
        success_count=env.success_count,
        steps=env.steps,
        forward_passes=net.forward_calls - before,
    )
    if isinstance(env, FourGoalWorld):
        result.order = list(env.order)
    if isinstance(env, DetourWorld):
        result.route = env.route
        result.collided = env.collided
    if keep_trace:
        result.obs = np.stack(trace_obs)
        result.actions = np.stack(trace_act) if trace_act else np.zeros((0, env.act_dim))
        result.codes = np.stack(trace_codes) if trace_codes else None
    return result


def rollout(
    bundle: PolicyBundle,
    env_kind: str,
    cfg: RolloutConfig,
    goal_source: TrajectoryDataset | None = None,
    keep_traces: bool = False,
) -> list[EpisodeResult]:
    if cfg.conditional and goal_source is None:
        raise ValueError("conditional rollouts need a demo dataset to draw goals from")
    root = SeededRng(cfg.seed).split("rollout")
    results = []
    for ep in range(cfg.episodes):
        ep_rng = root.split(f"ep{ep}")
        goal, commanded = None, None
        if cfg.conditional:
            goal, commanded = _goal_command(
                goal_source, bundle.net.cfg.goal_window, ep_rng.split("goal")
            )
        env = make_env(env_kind)
        result = run_episode(bundle, env, cfg, ep_rng.split("steps"), goal, keep_traces)
        if commanded is not None:
            result.commanded = commanded
            result.commanded_hits = _subsequence_hits(result.order, commanded)
        results.append(result)
    return results


# -- reports ---------------------------------------------------------------------


def evaluate(
    results: list[EpisodeResult],
    env_kind: str,
    cfg: RolloutConfig,
    demos: TrajectoryDataset | None = None,
) -> dict:
    """Aggregate rollout results into a JSON-ready report."""
    steps = sum(r.steps for r in results)
    report = {
        "env": env_kind,
        "episodes": len(results),
        "execution": cfg.execution,
        "actions_per_prediction": cfg.actions_per_prediction,
        "temperature": cfg.temperature,
        "conditional": cfg.conditional,
        "seed": cfg.seed,
        "mean_steps": steps / len(results),
        "forward_passes_per_step": sum(r.forward_passes for r in results) / max(steps, 1),
        "latency_ms": None,
    }
    if env_kind == "four_goal":
        report.update(success_metrics([r.success_count for r in results], max_goals=4))
        orders = [r.order for r in results]
        for k in (3, 4):
            qualified = [o for o in orders if len(o) >= k]
            report[f"entropy_p{k}"] = (
                completion_order_entropy(orders, k) if qualified else None
            )
        if demos is not None:
            demo_orders = [four_goal_completion_order(o) for o in demos.obs]
            for k in (3, 4):
                demo_h = completion_order_entropy(demo_orders, k)
                report[f"demo_entropy_p{k}"] = demo_h
                policy_h = report[f"entropy_p{k}"]
                report[f"entropy_ratio_p{k}"] = (
                    policy_h / demo_h if policy_h is not None and demo_h > 0 else None
                )
        if cfg.conditional:
            hits = [r.commanded_hits for r in results if r.commanded_hits is not None]
            report["commanded_score"] = float(np.mean(hits)) if hits else None
    elif env_kind == "detour":
        report.update(success_metrics([r.success_count for r in results], max_goals=1))
        routes = [r.route for r in results]
        report["collisions"] = sum(1 for r in results if r.collided)
        for label in ("upper", "lower", "none"):
            report[f"route_{label}"] = routes.count(label) / len(routes)
        two_sided = [r for r in routes if r != "none"]
        report["route_entropy"] = (
            completion_order_entropy([(r,) for r in two_sided], 1) if two_sided else None
        )
    return report


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> dict:
    return json.loads(text)


def write_traces(results: list[EpisodeResult], out_dir: str | Path) -> None:
    """Per-episode CSV traces plus an episode summary table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_lines = ["episode,success_count,steps,order,route,collided"]
    for i, r in enumerate(results):
        order = "+".join(str(g) for g in r.order)
        summary_lines.append(
            f"{i},{r.success_count},{r.steps},{order},{r.route or ''},{int(r.collided)}"
        )
        if r.obs is None:
            continue
        obs_dim = r.obs.shape[1]
        act_dim = r.actions.shape[1] if len(r.actions) else 0
        header = (
            ["t"]
            + [f"obs_{d}" for d in range(obs_dim)]
            + [f"act_{d}" for d in range(act_dim)]
            + [f"code_{q}" for q in range(r.codes.shape[1] if r.codes is not None else 0)]
        )
        lines = [",".join(header)]
        for t in range(len(r.actions)):
            row = [str(t)]
            row += [f"{v:.6g}" for v in r.obs[t]]
            row += [f"{v:.6g}" for v in r.actions[t]]
            row += [str(int(c)) for c in (r.codes[t] if r.codes is not None else [])]
            lines.append(",".join(row))
        (out_dir / f"episode_{i:04d}.csv").write_text("\n".join(lines) + "\n")
    (out_dir / "episodes.csv").write_text("\n".join(summary_lines) + "\n")


# -- timing -----------------------------------------------------------------------


def timing_probe(bundle: PolicyBundle, env_kind: str, repeats: int = 50, seed: int = 0) -> dict:
    """Wall-clock stats of one closed-loop prediction step, warmup excluded."""
    if repeats < 1:
        raise ValueError("timing probe needs at least one repeat")
    env = make_env(env_kind)
    obs = env.reset()
    window = np.stack([obs] * bundle.net.cfg.obs_window)
    g = bundle.net.cfg.goal_window
    goal = np.stack([obs] * g) if g > 0 else None
    rng = SeededRng(seed)
    times = []
    for i in range(repeats + 3):
        start = time.perf_counter()
        codes, offset = sample_action(bundle.net, window, goal, rng, temperature=1.0, mask=bundle.mask)
        chunk = bundle.quantizer.decode_codes(codes)[0] + offset
        denormalize(chunk, bundle.stats)
        elapsed = (time.perf_counter() - start) * 1000.0
        if i >= 3:
            times.append(elapsed)
    times = np.array(times)
    return {
        "repeats": repeats,
        "mean_ms": float(times.mean()),
        "p50_ms": float(np.percentile(times, 50)),
        "p95_ms": float(np.percentile(times, 95)),
    }
