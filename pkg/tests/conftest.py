"""Shared fixtures: small synthetic datasets and trained toy models.

The trained fixtures are session-scoped because several test modules assert
different properties of the same artifacts; each records how long its
training took so budget assertions can reuse the measurement instead of
training twice.
"""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from vqpolicy.config import RunConfig
from vqpolicy.data import TrajectoryDataset, build_windows, normalize
from vqpolicy.envs import scripted_demonstrator
from vqpolicy.evaluation import PolicyBundle, RolloutConfig, evaluate, rollout
from vqpolicy.rng import SeededRng
from vqpolicy.training import reconstruction_l1, train_policy, train_rvq


def synthetic_dataset(action_modes, trajectories, steps, obs_dim=2, jitter=0.0, seed=0):
    """Trajectories with constant per-trajectory actions drawn from `action_modes`."""
    rng = np.random.default_rng(seed)
    obs, acts = [], []
    for i in range(trajectories):
        mode = np.asarray(action_modes[i % len(action_modes)], dtype=np.float32)
        noise = rng.uniform(-jitter, jitter, (steps, len(mode))).astype(np.float32)
        acts.append(np.tile(mode, (steps, 1)) + noise)
        obs.append(np.zeros((steps, obs_dim), dtype=np.float32))
    return TrajectoryDataset(obs=obs, actions=acts)


@pytest.fixture(scope="session")
def four_chunk_run():
    """Tokenizer trained to memorize four distinct action chunks.

    Resets stay off here: with four distinct latents half the codebook is
    permanently dead and per-epoch resets would churn assignments forever.
    """
    modes = [(0.1, 0.1), (-0.1, 0.1), (0.1, -0.1), (-0.1, -0.1)]
    ds = synthetic_dataset(modes, trajectories=4, steps=50)
    cfg = RunConfig(
        chunk_len=1,
        latent_dim=16,
        enc_hidden=64,
        num_quantizers=2,
        codebook_size=8,
        rvq_steps=2000,
        rvq_batch=200,
        rvq_lr=1e-4,
        reset_dead_codes=False,
        seed=5,
    )
    start = time.monotonic()
    quantizer, stats = train_rvq(ds, cfg)
    seconds = time.monotonic() - start
    chunks = normalize(build_windows(ds, h=1, n=1).chunks, stats).reshape(-1, 2)
    recon = reconstruction_l1(quantizer, chunks)
    return SimpleNamespace(
        ds=ds, cfg=cfg, quantizer=quantizer, stats=stats, recon=recon, seconds=seconds
    )


@pytest.fixture(scope="session")
def two_mode_policy():
    """Policy trained on a two-mode dataset: one observation, two actions."""
    modes = [(0.08, 0.08), (-0.08, -0.08)]
    ds = synthetic_dataset(modes, trajectories=20, steps=12, jitter=0.005, seed=1)
    cfg = RunConfig(
        chunk_len=1,
        obs_window=2,
        latent_dim=8,
        enc_hidden=32,
        num_quantizers=2,
        codebook_size=4,
        rvq_steps=300,
        rvq_batch=120,
        rvq_lr=2e-3,
        trunk_layers=1,
        trunk_heads=2,
        embed_dim=16,
        policy_steps=200,
        policy_batch=120,
        policy_lr=3e-3,
        seed=2,
    )
    quantizer, stats = train_rvq(ds, cfg)
    net, mask = train_policy(ds, quantizer, stats, cfg)
    windows = build_windows(ds, h=cfg.obs_window, n=cfg.chunk_len)
    return SimpleNamespace(
        ds=ds, cfg=cfg, quantizer=quantizer, stats=stats, net=net, mask=mask, windows=windows
    )


def _train_and_roll(demos, cfg, conditional=False):
    """Two-stage training plus a 100-episode evaluation, wall time included."""
    start = time.monotonic()
    quantizer, stats = train_rvq(demos, cfg)
    net, mask = train_policy(demos, quantizer, stats, cfg)
    bundle = PolicyBundle(net=net, quantizer=quantizer, stats=stats, mask=mask)
    roll_cfg = RolloutConfig(
        episodes=cfg.episodes,
        execution=cfg.execution,
        receding_steps=cfg.receding_steps,
        temperature=cfg.temperature,
        conditional=conditional,
        seed=cfg.seed,
    )
    results = rollout(bundle, cfg.env, roll_cfg, goal_source=demos if conditional else None)
    report = evaluate(results, cfg.env, roll_cfg, demos=demos)
    seconds = time.monotonic() - start
    return SimpleNamespace(
        demos=demos, cfg=cfg, bundle=bundle, results=results, report=report, seconds=seconds
    )


@pytest.fixture(scope="session")
def four_goal_demos():
    start = time.monotonic()
    demos = scripted_demonstrator("four_goal", SeededRng(0).split("demos"), 2400)
    return SimpleNamespace(ds=demos, seconds=time.monotonic() - start)


@pytest.fixture(scope="session")
def four_goal_uncond(four_goal_demos):
    """Unconditional FourGoalWorld policy at full evaluation scale."""
    cfg = RunConfig(
        env="four_goal",
        obs_window=5,
        chunk_len=3,
        latent_dim=32,
        enc_hidden=128,
        num_quantizers=2,
        codebook_size=8,
        rvq_steps=2000,
        rvq_batch=256,
        rvq_lr=1e-3,
        trunk_layers=2,
        trunk_heads=4,
        embed_dim=64,
        policy_steps=6000,
        policy_batch=256,
        policy_lr=1e-3,
        episodes=100,
        execution="receding",
        receding_steps=3,
        temperature=1.0,
        seed=0,
    )
    run = _train_and_roll(four_goal_demos.ds, cfg)
    run.seconds += four_goal_demos.seconds
    return run


@pytest.fixture(scope="session")
def four_goal_cond(four_goal_demos):
    """Goal-conditioned FourGoalWorld policy, commanded-pair evaluation."""
    cfg = RunConfig(
        env="four_goal",
        obs_window=5,
        goal_window=5,
        chunk_len=3,
        latent_dim=32,
        enc_hidden=128,
        num_quantizers=2,
        codebook_size=8,
        rvq_steps=2000,
        rvq_batch=256,
        rvq_lr=1e-3,
        trunk_layers=2,
        trunk_heads=4,
        embed_dim=64,
        policy_steps=6000,
        policy_batch=256,
        policy_lr=1e-3,
        episodes=100,
        execution="receding",
        receding_steps=3,
        temperature=0.8,
        conditional=True,
        seed=0,
    )
    run = _train_and_roll(four_goal_demos.ds, cfg, conditional=True)
    run.seconds += four_goal_demos.seconds
    return run


@pytest.fixture(scope="session")
def detour_run():
    """DetourWorld policy evaluated at temperature 1 for mode coverage."""
    start = time.monotonic()
    demos = scripted_demonstrator("detour", SeededRng(0).split("demos"), 500)
    gen_seconds = time.monotonic() - start
    cfg = RunConfig(
        env="detour",
        obs_window=5,
        chunk_len=3,
        latent_dim=32,
        enc_hidden=128,
        num_quantizers=2,
        codebook_size=8,
        rvq_steps=1500,
        rvq_batch=256,
        rvq_lr=1e-3,
        trunk_layers=2,
        trunk_heads=4,
        embed_dim=64,
        policy_steps=3000,
        policy_batch=256,
        policy_lr=1e-3,
        episodes=100,
        execution="receding",
        receding_steps=3,
        temperature=1.0,
        seed=0,
    )
    run = _train_and_roll(demos, cfg)
    run.seconds += gen_seconds
    return run
