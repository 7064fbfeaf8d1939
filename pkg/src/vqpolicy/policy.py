"""Code-predicting policy: causal transformer trunk plus categorical heads.

The trunk reads a window of observations (optionally preceded by goal
frames), both linearly embedded and given learned positional embeddings.
At the final position, one head per codebook layer predicts a categorical
distribution over that layer's codes and an offset head predicts a small
continuous correction in normalized action space.  Sampled codes decode
through the frozen action tokenizer; the offset is added on top.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, apply_op, concat, embedding, l1_loss, softmax
from .modules import LayerNorm, Linear
from .rng import SeededRng

_NEG_MASK = -1e9


@dataclass
class PolicyConfig:
    obs_dim: int
    act_dim: int
    obs_window: int
    goal_window: int = 0
    chunk_len: int = 1
    embed_dim: int = 120
    layers: int = 6
    heads: int = 6
    num_quantizers: int = 2
    codebook_size: int = 16
    autoregressive: bool = False

    @property
    def context(self) -> int:
        return self.goal_window + self.obs_window


class CausalSelfAttention:
    def __init__(self, cfg: PolicyConfig, rng: SeededRng):
        d = cfg.embed_dim
        self.heads = cfg.heads
        self.qkv = Linear(d, 3 * d, rng.split("qkv"), init="normal")
        self.proj = Linear(d, d, rng.split("proj"), init="normal")
        mask = np.triu(np.full((cfg.context, cfg.context), _NEG_MASK, dtype=np.float32), k=1)
        self._mask = mask

    def __call__(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        dh = d // self.heads
        qkv = self.qkv(x)
        q = qkv[:, :, :d].reshape(b, s, self.heads, dh).transpose(0, 2, 1, 3)
        k = qkv[:, :, d : 2 * d].reshape(b, s, self.heads, dh).transpose(0, 2, 1, 3)
        v = qkv[:, :, 2 * d :].reshape(b, s, self.heads, dh).transpose(0, 2, 1, 3)
        att = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        att = softmax(att + self._mask[:s, :s])
        y = (att @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
        return self.proj(y)

    def named_params(self, prefix: str):
        return self.qkv.named_params(f"{prefix}.qkv") + self.proj.named_params(f"{prefix}.proj")


class Block:
    def __init__(self, cfg: PolicyConfig, rng: SeededRng):
        d = cfg.embed_dim
        self.ln1 = LayerNorm(d)
        self.attn = CausalSelfAttention(cfg, rng.split("attn"))
        self.ln2 = LayerNorm(d)
        self.fc = Linear(d, 4 * d, rng.split("fc"), init="normal")
        self.out = Linear(4 * d, d, rng.split("out"), init="normal")

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.out(self.fc(self.ln2(x)).gelu())

    def named_params(self, prefix: str):
        return (
            self.ln1.named_params(f"{prefix}.ln1")
            + self.attn.named_params(f"{prefix}.attn")
            + self.ln2.named_params(f"{prefix}.ln2")
            + self.fc.named_params(f"{prefix}.fc")
            + self.out.named_params(f"{prefix}.out")
        )


class PolicyNet:
    """Trunk and heads; `forward_calls` counts trunk evaluations."""

    def __init__(self, cfg: PolicyConfig, rng: SeededRng):
        if cfg.embed_dim % cfg.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        self.cfg = cfg
        d = cfg.embed_dim
        self.obs_embed = Linear(cfg.obs_dim, d, rng.split("obs_embed"), init="normal")
        self.goal_embed = Linear(cfg.obs_dim, d, rng.split("goal_embed"), init="normal")
        self.wpe = Tensor(rng.split("wpe").trunc_normal((cfg.context, d)), requires_grad=True)
        self.blocks = [Block(cfg, rng.split(f"block{i}")) for i in range(cfg.layers)]
        self.ln_f = LayerNorm(d)
        self.code_heads = [Linear(d, cfg.codebook_size, init="zeros") for _ in range(cfg.num_quantizers)]
        self.offset_head = Linear(d, cfg.chunk_len * cfg.act_dim, init="zeros")
        if cfg.autoregressive:
            self.code_embeds = [
                Tensor(rng.split(f"code_embed{i}").trunc_normal((cfg.codebook_size, d)), requires_grad=True)
                for i in range(cfg.num_quantizers - 1)
            ]
            self.ar_heads = [
                Linear(2 * d, cfg.codebook_size, rng.split(f"ar_head{i}"), init="normal")
                for i in range(cfg.num_quantizers - 1)
            ]
        self.forward_calls = 0

    def named_params(self):
        out = self.obs_embed.named_params("obs_embed")
        if self.cfg.goal_window > 0:
            out += self.goal_embed.named_params("goal_embed")
        out += [("wpe", self.wpe)]
        for i, blk in enumerate(self.blocks):
            out += blk.named_params(f"block{i}")
        out += self.ln_f.named_params("ln_f")
        for i, head in enumerate(self.code_heads):
            out += head.named_params(f"code_head{i}")
        out += self.offset_head.named_params("offset_head")
        if self.cfg.autoregressive:
            for i in range(self.cfg.num_quantizers - 1):
                out += [(f"code_embed{i}", self.code_embeds[i])]
                out += self.ar_heads[i].named_params(f"ar_head{i}")
        return out

    def params(self):
        return [t for _, t in self.named_params()]

    # -- trunk ---------------------------------------------------------------

    def tokenize(self, obs: np.ndarray, goal: np.ndarray | None) -> Tensor:
        """Embed goal frames (first, when present) then observation frames."""
        cfg = self.cfg
        obs = np.asarray(obs, dtype=np.float32)
        if obs.ndim == 2:
            obs = obs[None]
        if obs.shape[1] != cfg.obs_window:
            raise ValueError(f"expected {cfg.obs_window} observation frames, got {obs.shape[1]}")
        tokens = self.obs_embed(Tensor(obs))
        if cfg.goal_window > 0:
            if goal is None:
                raise ValueError("policy was built with goal conditioning, goal missing")
            goal = np.asarray(goal, dtype=np.float32)
            if goal.ndim == 2:
                goal = goal[None]
            if goal.shape[1] != cfg.goal_window:
                raise ValueError(f"expected {cfg.goal_window} goal frames, got {goal.shape[1]}")
            tokens = concat([self.goal_embed(Tensor(goal)), tokens], axis=1)
        elif goal is not None:
            raise ValueError("policy was built without goal conditioning")
        pos = embedding(self.wpe, np.arange(tokens.shape[1]))
        return tokens + pos

    def features(self, obs: np.ndarray, goal: np.ndarray | None = None) -> Tensor:
        """Full per-position features; one call = one trunk forward."""
        x = self.tokenize(obs, goal)
        for blk in self.blocks:
            x = blk(x)
        self.forward_calls += 1
        return self.ln_f(x)

    def predict(
        self,
        obs: np.ndarray,
        goal: np.ndarray | None = None,
        teacher_codes: np.ndarray | None = None,
    ) -> tuple[list[Tensor], Tensor]:
        """Code logits per layer and the offset, read at the final position.

        In autoregressive mode the logits of layer i > 0 condition on the
        earlier layers' codes: ``teacher_codes`` (B, num_quantizers) supplies
        them during training; sampling passes its own draws instead.
        """
        feat = self.features(obs, goal)[:, -1, :]
        logits = [self.code_heads[0](feat)]
        for i in range(1, self.cfg.num_quantizers):
            if self.cfg.autoregressive:
                if teacher_codes is None:
                    raise ValueError("autoregressive predict needs earlier-layer codes")
                logits.append(self.conditioned_logits(feat, i, teacher_codes[:, :i]))
            else:
                logits.append(self.code_heads[i](feat))
        b = feat.shape[0]
        offset = self.offset_head(feat).reshape(b, self.cfg.chunk_len, self.cfg.act_dim)
        return logits, offset

    def conditioned_logits(self, feat: Tensor, layer: int, earlier: np.ndarray) -> Tensor:
        """Autoregressive logits for `layer` given codes of all earlier layers."""
        cond = embedding(self.code_embeds[0], earlier[:, 0])
        for p in range(1, layer):
            cond = cond + embedding(self.code_embeds[p], earlier[:, p])
        base = self.code_heads[layer](feat)
        return base + self.ar_heads[layer - 1](concat([feat, cond], axis=-1))


# -- losses --------------------------------------------------------------------


def focal_loss(logits: Tensor, targets: np.ndarray, gamma: float) -> Tensor:
    """Mean focal loss over a batch of categorical predictions.

    gamma = 0 reduces to cross-entropy; larger gamma damps the loss of
    well-classified samples by (1 - p_target)^gamma.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    z = logits.data.astype(np.float64)
    if z.ndim == 1:
        z = z[None]
    targets = np.atleast_1d(np.asarray(targets))
    if targets.ndim != 1 or len(targets) != len(z):
        raise ValueError("targets must hold one class index per row")
    if targets.min() < 0 or targets.max() >= z.shape[1]:
        raise ValueError("target index out of range")
    b = len(z)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    pt = np.clip(p[rows, targets], 1e-12, 1.0)
    u = 1.0 - pt
    log_pt = np.log(pt)
    value = np.mean(-(u**gamma) * log_pt)

    def backward(g):
        # d/dz of -(1-p)^gamma log p through the softmax, per row:
        # A * (delta - p) with A = gamma (1-p)^(gamma-1) log(p) p - (1-p)^gamma
        with np.errstate(divide="ignore", invalid="ignore"):
            first = np.where(u > 0, gamma * u ** (gamma - 1.0) * log_pt * pt, 0.0)
        a = first - u**gamma
        grad = -a[:, None] * p
        grad[rows, targets] += a
        grad *= float(g) / b
        return (grad.reshape(logits.shape).astype(logits.dtype),)

    return apply_op(np.asarray(value, dtype=logits.dtype), (logits,), backward, "focal")


def code_loss(
    logits: list[Tensor], labels: np.ndarray, secondary_weight: float, gamma: float
) -> Tensor:
    """Primary-layer focal loss plus down-weighted secondary layers."""
    labels = np.atleast_2d(np.asarray(labels))
    if labels.shape[1] != len(logits):
        raise ValueError("one label column per codebook layer expected")
    total = focal_loss(logits[0], labels[:, 0], gamma)
    for i in range(1, len(logits)):
        total = total + secondary_weight * focal_loss(logits[i], labels[:, i], gamma)
    return total


def offset_loss(offset: Tensor, chunks: np.ndarray, decoded: np.ndarray) -> Tensor:
    """Mean L1 between true chunks and teacher-forced centers plus offset."""
    return l1_loss(offset + decoded.astype(np.float32), chunks.astype(np.float32))


def total_loss(
    logits: list[Tensor],
    offset: Tensor,
    labels: np.ndarray,
    chunks: np.ndarray,
    decoded: np.ndarray,
    secondary_weight: float,
    gamma: float,
    offset_weight: float,
) -> tuple[Tensor, dict]:
    code = code_loss(logits, labels, secondary_weight, gamma)
    off = offset_loss(offset, chunks, decoded)
    graph = code + offset_weight * off
    parts = {
        "code_loss": float(code.item()),
        "offset_loss": float(off.item()),
        "total_loss": float(code.item()) + offset_weight * float(off.item()),
    }
    return graph, parts


# -- sampling --------------------------------------------------------------------


def build_deadcode_mask(codes: np.ndarray, sizes: tuple[int, ...]) -> np.ndarray:
    """Boolean table over code tuples: True iff the tuple occurs in `codes`."""
    codes = np.atleast_2d(np.asarray(codes))
    if codes.shape[1] != len(sizes):
        raise ValueError("codes and sizes disagree on the number of layers")
    mask = np.zeros(sizes, dtype=bool)
    mask[tuple(codes.T)] = True
    return mask


def _masked_pick(
    logits: np.ndarray, allowed: np.ndarray | None, temperature: float, rng: SeededRng
) -> int:
    z = logits.astype(np.float64)
    if allowed is not None:
        if not allowed.any():
            warnings.warn("deadcode mask removed all probability mass, ignoring it")
            allowed = None
    if temperature == 0.0:
        if allowed is not None:
            z = np.where(allowed, z, -np.inf)
        return int(np.argmax(z))
    z = z / temperature
    z -= z.max()
    p = np.exp(z)
    if allowed is not None:
        p = np.where(allowed, p, 0.0)
    p /= p.sum()
    return rng.categorical(p)


def sample_action(
    net: PolicyNet,
    obs: np.ndarray,
    goal: np.ndarray | None,
    rng: SeededRng,
    temperature: float,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one code tuple and read the offset; one trunk forward total.

    Codes sample layer by layer; with a deadcode mask, layer i only keeps
    codes that continue some observed tuple under the already-drawn prefix.
    Returns (codes, offset) with offset shaped (chunk_len, act_dim).
    """
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    cfg = net.cfg
    feat = net.features(obs, goal)[:, -1, :]
    chosen: list[int] = []
    for i in range(cfg.num_quantizers):
        if i == 0 or not cfg.autoregressive:
            logits = net.code_heads[i](feat)
        else:
            logits = net.conditioned_logits(feat, i, np.array([chosen]))
        allowed = None
        if mask is not None:
            sub = mask[tuple(chosen)]
            allowed = sub if sub.ndim == 1 else sub.reshape(sub.shape[0], -1).any(axis=1)
        chosen.append(_masked_pick(logits.data[0], allowed, temperature, rng))
    offset = net.offset_head(feat).data[0]
    return np.array(chosen), offset.reshape(cfg.chunk_len, cfg.act_dim)
