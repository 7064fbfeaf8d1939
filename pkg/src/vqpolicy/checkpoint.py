"""Binary checkpoints for the tokenizer and the policy.

Both artifacts share one envelope (little-endian throughout):

    magic   4 bytes  b"VQB1"
    version u16      currently 1
    tag     4 bytes  b"TOKN" or b"POLI"
    body    section-specific, see below
    crc32   u32      over every preceding byte

TOKN body: header (chunk_len, act_dim, latent_dim, hidden u32 each,
layer count u16, then (k, dim) u32 pairs per layer), action bounds
(2 * act_dim f32), then raw f32 payloads in fixed order: per-layer
codebooks, encoder linears (weight then bias), decoder linears.

POLI body: u32 array count, then named arrays (u16 name length, utf-8
name, u8 ndim, u32 dims, f32 payload).  The policy's architecture config
is written as key=value text beside the binary file; both are needed to
reload it.  Checkpoints capture inference state only: EMA statistics of a
reloaded tokenizer restart from the stored codebook.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .data import ActionStats
from .policy import PolicyConfig, PolicyNet
from .quantizer import ResidualQuantizer, RvqConfig
from .rng import SeededRng

MAGIC = b"VQB1"
VERSION = 1
TOKENIZER_TAG = b"TOKN"
POLICY_TAG = b"POLI"


class CheckpointError(RuntimeError):
    """Raised for malformed checkpoint files or mismatched shapes."""


def _finish(path: Path, body: bytes) -> None:
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def _open(path: str | Path, tag: bytes) -> bytes:
    raw = Path(path).read_bytes()
    if len(raw) < 14 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body = raw[:-4]
    if zlib.crc32(body) != struct.unpack("<I", raw[-4:])[0]:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    version = struct.unpack_from("<H", body, 4)[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if body[6:10] != tag:
        raise CheckpointError(f"{path}: expected {tag.decode()} section, found {body[6:10]!r}")
    return body[10:]


def _mlp_arrays(mlp) -> list[np.ndarray]:
    out = []
    for layer in mlp.layers:
        out.append(layer.w.data)
        out.append(layer.b.data)
    return out


# -- tokenizer ------------------------------------------------------------------


def write_tokenizer(path: str | Path, quantizer: ResidualQuantizer, stats: ActionStats) -> None:
    cfg = quantizer.cfg
    parts = [
        MAGIC,
        struct.pack("<H", VERSION),
        TOKENIZER_TAG,
        struct.pack("<IIIIH", cfg.chunk_len, cfg.act_dim, cfg.latent_dim, cfg.hidden, cfg.num_quantizers),
    ]
    for layer in quantizer.layers:
        parts.append(struct.pack("<II", layer.k, layer.dim))
    parts.append(np.asarray(stats.lo, dtype="<f4").tobytes())
    parts.append(np.asarray(stats.hi, dtype="<f4").tobytes())
    for layer in quantizer.layers:
        parts.append(layer.embeddings.data.astype("<f4").tobytes())
    for arr in _mlp_arrays(quantizer.encoder) + _mlp_arrays(quantizer.decoder):
        parts.append(arr.astype("<f4").tobytes())
    _finish(Path(path), b"".join(parts))


def read_tokenizer(path: str | Path) -> tuple[ResidualQuantizer, ActionStats]:
    body = _open(path, TOKENIZER_TAG)
    try:
        chunk_len, act_dim, latent, hidden, num_q = struct.unpack_from("<IIIIH", body, 0)
        off = 18
        dims = []
        for _ in range(num_q):
            dims.append(struct.unpack_from("<II", body, off))
            off += 8
        lo = np.frombuffer(body, "<f4", act_dim, off).copy()
        off += 4 * act_dim
        hi = np.frombuffer(body, "<f4", act_dim, off).copy()
        off += 4 * act_dim
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header ({exc})") from None

    if any(d != latent for _, d in dims):
        raise CheckpointError(f"{path}: codebook dims disagree with the latent size")
    cfg = RvqConfig(
        chunk_len=chunk_len,
        act_dim=act_dim,
        latent_dim=latent,
        hidden=hidden,
        num_quantizers=num_q,
        codebook_size=dims[0][0] if dims else 0,
    )
    quantizer = ResidualQuantizer(cfg, SeededRng(0))

    def take(shape) -> np.ndarray:
        nonlocal off
        n = int(np.prod(shape))
        if off + 4 * n > len(body):
            raise CheckpointError(f"{path}: payload shorter than the header promises")
        arr = np.frombuffer(body, "<f4", n, off).reshape(shape).copy()
        off += 4 * n
        return arr

    for layer, (k, d) in zip(quantizer.layers, dims):
        layer.k = k
        layer.embeddings.data = take((k, d))
        layer.ema_counts = np.ones(k, dtype=np.float32)
        layer.ema_sums = layer.embeddings.data.copy()
        layer.initialized = True
    for mlp in (quantizer.encoder, quantizer.decoder):
        for linear in mlp.layers:
            linear.w.data = take(linear.w.shape)
            linear.b.data = take(linear.b.shape)
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return quantizer, ActionStats(lo=lo, hi=hi)


# -- policy ---------------------------------------------------------------------


def _pack_named(arrays: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def _unpack_named(body: bytes, path) -> dict[str, np.ndarray]:
    try:
        (count,) = struct.unpack_from("<I", body, 0)
        off = 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, "<f4", n, off).reshape(shape).copy()
            off += 4 * n
            out[name] = arr
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed policy section ({exc})") from None
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return out


_CONFIG_INTS = (
    "obs_dim", "act_dim", "obs_window", "goal_window", "chunk_len",
    "embed_dim", "layers", "heads", "num_quantizers", "codebook_size",
)


def write_policy(path: str | Path, net: PolicyNet, mask: np.ndarray | None) -> None:
    arrays = [(name, t.data) for name, t in net.named_params()]
    if mask is not None:
        arrays.append(("deadcode_mask", mask.astype(np.float32)))
    body = MAGIC + struct.pack("<H", VERSION) + POLICY_TAG + _pack_named(arrays)
    _finish(Path(path), body)

    cfg = net.cfg
    lines = [f"{key} = {getattr(cfg, key)}" for key in _CONFIG_INTS]
    lines.append(f"autoregressive = {'true' if cfg.autoregressive else 'false'}")
    Path(str(path) + ".cfg").write_text("\n".join(lines) + "\n")


def read_policy(path: str | Path) -> tuple[PolicyNet, np.ndarray | None]:
    cfg_path = Path(str(path) + ".cfg")
    if not cfg_path.exists():
        raise CheckpointError(f"{path}: missing config sidecar {cfg_path.name}")
    fields: dict = {}
    for line in cfg_path.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        if key == "autoregressive":
            fields[key] = value == "true"
        elif key in _CONFIG_INTS:
            fields[key] = int(value)
        else:
            raise CheckpointError(f"{cfg_path}: unknown config key {key!r}")
    try:
        cfg = PolicyConfig(**fields)
    except TypeError as exc:
        raise CheckpointError(f"{cfg_path}: incomplete config ({exc})") from None

    arrays = _unpack_named(_open(path, POLICY_TAG), path)
    mask = None
    if "deadcode_mask" in arrays:
        mask = arrays.pop("deadcode_mask") > 0.5
    net = PolicyNet(cfg, SeededRng(0))
    expected = dict(net.named_params())
    if set(expected) != set(arrays):
        missing = sorted(set(expected) ^ set(arrays))
        raise CheckpointError(f"{path}: parameter names disagree with the config ({missing[:4]})")
    for name, tensor in expected.items():
        if arrays[name].shape != tensor.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arrays[name].shape}, expected {tensor.shape}"
            )
        tensor.data = arrays[name]
    return net, mask
