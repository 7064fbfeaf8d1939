"""Training loops for the action tokenizer and the code-predicting policy."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import ActionStats, TrajectoryDataset, build_windows, normalize
from .optim import AdamW
from .policy import PolicyConfig, PolicyNet, build_deadcode_mask, total_loss
from .quantizer import ResidualQuantizer, RvqConfig
from .rng import SeededRng


class CsvLog:
    """Append-only CSV with a fixed header, created on first write."""

    def __init__(self, path: str | Path | None, header: list[str]):
        self.path = Path(path) if path else None
        self.header = header
        if self.path and not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(header)

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([row[k] for k in self.header])


def _epoch_batches(n: int, batch: int, rng: SeededRng, epoch: int):
    order = rng.split(f"epoch{epoch}").permutation(n)
    for start in range(0, n, batch):
        idx = order[start : start + batch]
        if len(idx) == batch or start == 0:
            yield idx


def train_rvq(
    ds: TrajectoryDataset,
    cfg: RunConfig,
    log_path: str | Path | None = None,
) -> tuple[ResidualQuantizer, ActionStats]:
    """Stage one: fit the residual tokenizer to all action chunks of `ds`."""
    stats = ds.action_stats()
    chunks = normalize(build_windows(ds, h=1, n=cfg.chunk_len).chunks, stats)
    flat = chunks.reshape(len(chunks), -1)

    rng = SeededRng(cfg.seed).split("rvq")
    quantizer = ResidualQuantizer(
        RvqConfig(
            chunk_len=cfg.chunk_len,
            act_dim=ds.act_dim,
            latent_dim=cfg.latent_dim,
            hidden=cfg.enc_hidden,
            num_quantizers=cfg.num_quantizers,
            codebook_size=cfg.codebook_size,
        ),
        rng.split("init"),
    )
    opt = AdamW(quantizer.params(), lr=cfg.rvq_lr, weight_decay=cfg.rvq_weight_decay)
    util_cols = [f"util_{i}" for i in range(cfg.num_quantizers)]
    log = CsvLog(log_path, ["step", "recon", "embed", "commit", "total", *util_cols])

    step = 0
    epoch = 0
    batch_rng = rng.split("batches")
    while step < cfg.rvq_steps:
        last_q = None
        for idx in _epoch_batches(len(flat), cfg.rvq_batch, batch_rng, epoch):
            batch = flat[idx]
            if not quantizer.initialized:
                quantizer.seed_from_batch(batch, rng.split("seed"))
            losses, q = quantizer.loss(batch, cfg.commit_weight)
            for layer, layer_input, codes in zip(
                quantizer.layers, q.layer_inputs, q.codes.T
            ):
                layer.ema_update(layer_input, codes, cfg.ema_decay)
            opt.zero_grad()
            losses.graph.backward()
            opt.step()
            last_q = q
            row = {
                "step": step,
                "recon": losses.recon,
                "embed": losses.embed,
                "commit": losses.commit,
                "total": losses.total,
            }
            for i, layer in enumerate(quantizer.layers):
                row[f"util_{i}"] = layer.utilization()
            log.write(row)
            step += 1
            if step >= cfg.rvq_steps:
                break
        if cfg.reset_dead_codes and last_q is not None and step < cfg.rvq_steps:
            reset_rng = rng.split(f"reset{epoch}")
            for i, layer in enumerate(quantizer.layers):
                layer.reset_dead_codes(
                    last_q.layer_inputs[i], cfg.dead_code_threshold, reset_rng.split(f"l{i}")
                )
        epoch += 1
    return quantizer, stats


def reconstruction_l1(quantizer: ResidualQuantizer, chunks_norm: np.ndarray) -> float:
    """Mean L1 between normalized chunks and their code reconstructions."""
    total = 0.0
    count = 0
    for start in range(0, len(chunks_norm), 8192):
        part = chunks_norm[start : start + 8192]
        recon = quantizer.reconstruct(part).reshape(part.shape)
        total += float(np.abs(recon - part).sum(dtype=np.float64))
        count += part.size
    return total / count


def _tokenize_dataset(quantizer: ResidualQuantizer, chunks_norm: np.ndarray):
    """Codes and teacher-forced decoded centers for every chunk, batched."""
    codes, decoded = [], []
    for start in range(0, len(chunks_norm), 8192):
        part = chunks_norm[start : start + 8192]
        c = quantizer.encode_codes(part)
        codes.append(c)
        decoded.append(quantizer.decode_codes(c))
    return np.concatenate(codes), np.concatenate(decoded)


def train_policy(
    ds: TrajectoryDataset,
    quantizer: ResidualQuantizer,
    stats: ActionStats,
    cfg: RunConfig,
    log_path: str | Path | None = None,
) -> tuple[PolicyNet, np.ndarray]:
    """Stage two: fit the code heads on top of the frozen tokenizer.

    Returns the net and the deadcode mask of observed code tuples.
    """
    windows = build_windows(
        ds,
        h=cfg.obs_window,
        n=cfg.chunk_len,
        g=cfg.goal_window,
        goal_source=cfg.goal_source,
        goal_future_offset=cfg.goal_future_offset,
    )
    chunks = normalize(windows.chunks, stats).reshape(windows.chunks.shape)
    labels, decoded = _tokenize_dataset(quantizer, chunks.reshape(len(chunks), -1))
    decoded = decoded.reshape(chunks.shape)
    sizes = tuple(layer.k for layer in quantizer.layers)
    mask = build_deadcode_mask(labels, sizes)

    rng = SeededRng(cfg.seed).split("policy")
    net = PolicyNet(
        PolicyConfig(
            obs_dim=ds.obs_dim,
            act_dim=ds.act_dim,
            obs_window=cfg.obs_window,
            goal_window=cfg.goal_window,
            chunk_len=cfg.chunk_len,
            embed_dim=cfg.embed_dim,
            layers=cfg.trunk_layers,
            heads=cfg.trunk_heads,
            num_quantizers=cfg.num_quantizers,
            codebook_size=cfg.codebook_size,
            autoregressive=cfg.autoregressive_codes,
        ),
        rng.split("net"),
    )
    opt = AdamW(net.params(), lr=cfg.policy_lr, weight_decay=cfg.policy_weight_decay)
    acc_cols = [f"acc_{i}" for i in range(cfg.num_quantizers)]
    log = CsvLog(log_path, ["step", "code_loss", "offset_loss", "total_loss", *acc_cols])

    step = 0
    epoch = 0
    batch_rng = rng.split("batches")
    while step < cfg.policy_steps:
        for idx in _epoch_batches(len(windows), cfg.policy_batch, batch_rng, epoch):
            if cfg.policy_lr_schedule == "cosine":
                floor = 0.05 * cfg.policy_lr
                cos = 0.5 * (1.0 + math.cos(math.pi * step / cfg.policy_steps))
                opt.lr = floor + (cfg.policy_lr - floor) * cos
            goal = windows.goals[idx] if windows.goals is not None else None
            logits, offset = net.predict(windows.obs[idx], goal, teacher_codes=labels[idx])
            graph, parts = total_loss(
                logits,
                offset,
                labels[idx],
                chunks[idx],
                decoded[idx],
                cfg.secondary_weight,
                cfg.focal_gamma,
                cfg.offset_weight,
            )
            opt.zero_grad()
            graph.backward()
            opt.step()
            row = dict(parts, step=step)
            for i, lg in enumerate(logits):
                row[f"acc_{i}"] = float((lg.data.argmax(axis=1) == labels[idx][:, i]).mean())
            log.write(row)
            step += 1
            if step >= cfg.policy_steps:
                break
        epoch += 1
    return net, mask
