"""Residual vector quantization of action chunks.

An MLP encoder maps a flattened chunk of n actions to a latent, a cascade
of codebook layers quantizes it coarse-to-fine (each layer quantizes the
residual left by the previous ones), and an MLP decoder maps the summed
codebook vectors back to the chunk.  Codebooks learn by exponential moving
averages of their assigned latents, never by gradient, so the training
loss routes gradients to the encoder through a straight-through estimator
and to nothing else.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, l1_loss, mse_loss
from .modules import Mlp
from .rng import SeededRng

EMA_EPS = 1e-5


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared euclidean distances in float64, shape (len(x), len(centers))."""
    diff = x.astype(np.float64)[:, None, :] - centers.astype(np.float64)[None, :, :]
    return (diff * diff).sum(axis=-1)


def nearest_code(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest center per row; ties break to the lowest index."""
    return np.argmin(_sq_dists(x, centers), axis=1)


def kmeans_plusplus(data: np.ndarray, k: int, rng: SeededRng) -> np.ndarray:
    """k-means++ seeding: D^2-weighted draws without replacement."""
    n = len(data)
    if k > n:
        raise ValueError(f"cannot seed {k} centers from {n} points")
    centers = np.empty((k, data.shape[1]), dtype=np.float32)
    centers[0] = data[int(rng.integers(n))]
    d2 = _sq_dists(data, centers[:1]).min(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            warnings.warn("seeding data is degenerate, duplicating the first center")
            centers[i:] = centers[0]
            return centers
        idx = int(rng.choice(n, p=d2 / total))
        centers[i] = data[idx]
        d2 = np.minimum(d2, _sq_dists(data, centers[i : i + 1]).min(axis=1))
    return centers


def kmeans_fit(
    data: np.ndarray, k: int, rng: SeededRng, iters: int = 50
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm from a k-means++ seed; empty clusters keep their center."""
    centers = kmeans_plusplus(data, k, rng)
    labels = nearest_code(data, centers)
    for _ in range(iters):
        for j in range(k):
            mask = labels == j
            if mask.any():
                centers[j] = data[mask].mean(axis=0, dtype=np.float64).astype(np.float32)
        new_labels = nearest_code(data, centers)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centers, labels


class CodebookLayer:
    """One quantization layer: k vectors maintained by EMA statistics."""

    def __init__(self, k: int, dim: int):
        self.k = k
        self.dim = dim
        self.embeddings = Tensor(np.zeros((k, dim), dtype=np.float32), requires_grad=True)
        self.ema_counts = np.ones(k, dtype=np.float32)
        self.ema_sums = np.zeros((k, dim), dtype=np.float32)
        self.initialized = False

    def seed(self, latents: np.ndarray, rng: SeededRng) -> None:
        self.embeddings.data = kmeans_plusplus(latents, self.k, rng)
        self.ema_counts = np.ones(self.k, dtype=np.float32)
        self.ema_sums = self.embeddings.data.copy()
        self.initialized = True

    def quantize(self, x: np.ndarray) -> np.ndarray:
        return nearest_code(x, self.embeddings.data)

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        return self.embeddings.data[codes]

    def _refresh_embeddings(self) -> None:
        denom = np.maximum(self.ema_counts, EMA_EPS)
        self.embeddings.data = (self.ema_sums / denom[:, None]).astype(np.float32)

    def ema_update(self, x: np.ndarray, codes: np.ndarray, decay: float) -> None:
        batch_count = np.bincount(codes, minlength=self.k).astype(np.float32)
        batch_sum = np.zeros_like(self.ema_sums)
        np.add.at(batch_sum, codes, x)
        self.ema_counts = decay * self.ema_counts + (1.0 - decay) * batch_count
        self.ema_sums = decay * self.ema_sums + (1.0 - decay) * batch_sum
        self._refresh_embeddings()

    def reset_dead_codes(self, latents: np.ndarray, threshold: float, rng: SeededRng) -> int:
        """Move codes with stale EMA counts onto random batch latents."""
        dead = np.flatnonzero(self.ema_counts < threshold)
        if dead.size == 0:
            return 0
        if len(latents) >= dead.size:
            picks = rng.choice(len(latents), size=dead.size, replace=False)
        else:
            warnings.warn("fewer batch latents than dead codes, reusing some")
            picks = rng.choice(len(latents), size=dead.size, replace=True)
        chosen = latents[picks]
        self.embeddings.data[dead] = chosen
        self.ema_counts[dead] = 1.0
        self.ema_sums[dead] = chosen
        return int(dead.size)

    def utilization(self) -> float:
        return float((self.ema_counts >= 1.0).mean())


@dataclass
class RvqConfig:
    chunk_len: int
    act_dim: int
    latent_dim: int = 32
    hidden: int = 128
    num_quantizers: int = 2
    codebook_size: int = 16

    @property
    def flat_dim(self) -> int:
        return self.chunk_len * self.act_dim


@dataclass
class RvqLosses:
    recon: float
    embed: float
    commit: float
    total: float
    graph: Tensor  # recon + commit_weight * commit, the differentiable part


@dataclass
class QuantizeResult:
    codes: np.ndarray  # (B, num_quantizers) int
    quantized: np.ndarray  # (B, latent_dim) sum of selected codebook vectors
    layer_inputs: list[np.ndarray]  # residual fed into each layer
    layer_vectors: list[np.ndarray]  # codebook vector selected at each layer


class ResidualQuantizer:
    """Encoder, codebook cascade, and decoder for normalized action chunks."""

    def __init__(self, cfg: RvqConfig, rng: SeededRng):
        self.cfg = cfg
        self.encoder = Mlp([cfg.flat_dim, cfg.hidden, cfg.hidden, cfg.latent_dim], rng.split("enc"))
        self.decoder = Mlp([cfg.latent_dim, cfg.hidden, cfg.hidden, cfg.flat_dim], rng.split("dec"))
        self.layers = [
            CodebookLayer(cfg.codebook_size, cfg.latent_dim) for _ in range(cfg.num_quantizers)
        ]

    # -- parameters -------------------------------------------------------

    def named_params(self):
        return self.encoder.named_params("enc") + self.decoder.named_params("dec")

    def params(self):
        return [t for _, t in self.named_params()]

    @property
    def initialized(self) -> bool:
        return all(layer.initialized for layer in self.layers)

    # -- forward pieces -----------------------------------------------------

    def _flatten(self, chunks: np.ndarray) -> np.ndarray:
        chunks = np.asarray(chunks, dtype=np.float32)
        if chunks.ndim == 3:
            chunks = chunks.reshape(len(chunks), -1)
        if chunks.shape[1] != self.cfg.flat_dim:
            raise ValueError(f"chunk dim {chunks.shape[1]} != {self.cfg.flat_dim}")
        return chunks

    def encode(self, chunks: np.ndarray) -> Tensor:
        return self.encoder(Tensor(self._flatten(chunks)))

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z)

    def quantize(self, x: np.ndarray) -> QuantizeResult:
        """Quantize latents layer by layer against the running residual."""
        residual = np.asarray(x, dtype=np.float32)
        codes, inputs, vectors = [], [], []
        total = np.zeros_like(residual)
        for layer in self.layers:
            inputs.append(residual)
            c = layer.quantize(residual)
            e = layer.lookup(c)
            codes.append(c)
            vectors.append(e)
            total = total + e
            residual = residual - e
        return QuantizeResult(
            codes=np.stack(codes, axis=1),
            quantized=total,
            layer_inputs=inputs,
            layer_vectors=vectors,
        )

    def seed_from_batch(self, chunks: np.ndarray, rng: SeededRng) -> None:
        """First-batch initialization: k-means++ on each layer's residuals."""
        residual = self.encode(chunks).data
        for i, layer in enumerate(self.layers):
            layer.seed(residual, rng.split(f"layer{i}"))
            e = layer.lookup(layer.quantize(residual))
            residual = residual - e

    # -- chunk-level api ------------------------------------------------------

    def encode_codes(self, chunks: np.ndarray) -> np.ndarray:
        """Chunks -> code tuples, no gradient bookkeeping."""
        return self.quantize(self.encode(chunks).data).codes

    def decode_codes(self, codes: np.ndarray) -> np.ndarray:
        """Code tuples -> reconstructed chunks (B, chunk_len, act_dim)."""
        codes = np.asarray(codes)
        if codes.ndim == 1:
            codes = codes[None, :]
        z = np.zeros((len(codes), self.cfg.latent_dim), dtype=np.float32)
        for i, layer in enumerate(self.layers):
            z = z + layer.lookup(codes[:, i])
        out = self.decode(Tensor(z)).data
        return out.reshape(len(codes), self.cfg.chunk_len, self.cfg.act_dim)

    def reconstruct(self, chunks: np.ndarray) -> np.ndarray:
        return self.decode_codes(self.encode_codes(chunks))

    # -- training loss -----------------------------------------------------------

    def loss(self, chunks: np.ndarray, commit_weight: float = 1.0) -> tuple[RvqLosses, QuantizeResult]:
        """Reconstruction + codebook terms on a batch of normalized chunks.

        The quantized latent enters the decoder as x + sg(q - x), so the
        reconstruction gradient reaches the encoder as if quantization were
        the identity.  The embedding term is measured for the log only; the
        commitment term stops gradients at the codebook side.
        """
        flat = self._flatten(chunks)
        x = self.encode(flat)
        q = self.quantize(x.data)

        z_st = x + (q.quantized - x.data)
        recon = l1_loss(self.decode(z_st), flat)

        commit_graph = None
        embed_value = 0.0
        for layer_input, vector in zip(q.layer_inputs, q.layer_vectors):
            shift = layer_input - x.data  # residual = x + constant shift
            term = mse_loss(x + shift, vector)
            commit_graph = term if commit_graph is None else commit_graph + term
            diff = (layer_input - vector).astype(np.float64)
            embed_value += float((diff * diff).mean())

        graph = recon + commit_weight * commit_graph
        losses = RvqLosses(
            recon=float(recon.item()),
            embed=embed_value,
            commit=float(commit_graph.item()),
            total=float(recon.item()) + embed_value + commit_weight * float(commit_graph.item()),
            graph=graph,
        )
        return losses, q
