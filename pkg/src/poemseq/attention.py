"""Single-head scaled dot-product attention and its cross-image variant.

Features are float64 arrays: one image is ``(N, C)``, a batch ``(B, N, C)``.
In the consistent variant every image keeps its own queries, while its keys
and values come from its own tokens concatenated with tokens sampled from
other images of the batch, projected with the same weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

POOLS = ("all-other-images", "prior-images-only")


@dataclass(frozen=True)
class ProjectionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray | None = None

    def __post_init__(self):
        mats = [self.w_q, self.w_k, self.w_v] + ([self.w_o] if self.w_o is not None else [])
        c = self.w_q.shape[0]
        for m in mats:
            if m.ndim != 2 or m.shape != (c, c):
                raise ValueError(f"projection matrices must all be {c}x{c}, got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ValueError("projection weights must be finite")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def identity(cls, channels: int) -> "ProjectionWeights":
        eye = np.eye(channels)
        return cls(eye, eye.copy(), eye.copy())

    @classmethod
    def random(cls, channels: int, seed: int | Sequence[int], with_output: bool = False) -> "ProjectionWeights":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(channels)
        mats = [rng.standard_normal((channels, channels)) * scale for _ in range(4 if with_output else 3)]
        return cls(*mats)


@dataclass(frozen=True)
class SamplingPolicy:
    rate: float = 0.5
    seed: int = 0
    pool: str = "all-other-images"

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("sampling rate must lie in [0, 1]")
        if self.pool not in POOLS:
            raise ValueError(f"unknown pool {self.pool!r}")


def _check_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")


def check_batch(batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or min(batch.shape) < 1:
        raise ValueError(f"feature batch must have shape (B, N, C) with all sizes >= 1, got {batch.shape}")
    _check_finite(batch, "feature batch")
    return batch


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """softmax(q kᵀ / √C) v; returns the output and the weight matrix."""
    weights = softmax(q @ k.T / np.sqrt(q.shape[-1]))
    return weights @ v, weights


def self_attention(features, w: ProjectionWeights, return_weights: bool = False):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.channels or x.shape[0] < 1:
        raise ValueError(f"features must be (N, {w.channels}), got {x.shape}")
    _check_finite(x, "features")
    out, weights = attend(x @ w.w_q, x @ w.w_k, x @ w.w_v)
    if w.w_o is not None:
        out = out @ w.w_o
    return (out, weights) if return_weights else out


def eligible_sources(batch_size: int, i: int, pool: str) -> list[int]:
    if pool == "prior-images-only":
        return list(range(i))
    return [j for j in range(batch_size) if j != i]


def sample_indices(batch_shape: tuple[int, ...], i: int, policy: SamplingPolicy, stream: int = 0) -> list[tuple[int, np.ndarray]]:
    """Token indices drawn for image ``i``: ``[(source_image, indices), ...]``.

    Draws ``floor(rate * N)`` tokens without replacement from each eligible
    image, in ascending source order. The draw from the r-th eligible source
    uses a generator seeded by ``(seed, stream, r)``, so images with the
    same number of sources pick the same positions and a batch of identical
    images stays identical.
    """
    b, n = batch_shape[0], batch_shape[1]
    if not 0 <= i < b:
        raise IndexError(f"image index {i} out of range for batch of {b}")
    count = int(np.floor(policy.rate * n))
    sources = eligible_sources(b, i, policy.pool)
    if count == 0 or not sources:
        return []
    return [
        (j, np.random.default_rng([policy.seed, stream, r]).choice(n, size=count, replace=False))
        for r, j in enumerate(sources)
    ]


def rand_sample(batch, i: int, policy: SamplingPolicy, stream: int = 0) -> np.ndarray:
    """Reference tokens for image ``i`` as an ``(M, C)`` array (M may be 0)."""
    batch = check_batch(batch)
    picks = sample_indices(batch.shape, i, policy, stream)
    if not picks:
        return np.empty((0, batch.shape[2]))
    return np.concatenate([batch[j, idx] for j, idx in picks], axis=0)


def consistent_self_attention(batch, w: ProjectionWeights, policy: SamplingPolicy,
                              stream: int = 0, return_weights: bool = False):
    """Attention where image i attends over its own tokens plus sampled ones.

    Returns a ``(B, N, C)`` array, plus the list of per-image weight
    matrices (``N x (N + M_i)``) when ``return_weights`` is set.
    """
    batch = check_batch(batch)
    if batch.shape[2] != w.channels:
        raise ValueError(f"channel count {batch.shape[2]} does not match weights ({w.channels})")
    out = np.empty_like(batch)
    all_weights = []
    for i in range(batch.shape[0]):
        merged = np.concatenate([batch[i], rand_sample(batch, i, policy, stream)], axis=0)
        o, weights = attend(batch[i] @ w.w_q, merged @ w.w_k, merged @ w.w_v)
        out[i] = o @ w.w_o if w.w_o is not None else o
        all_weights.append(weights)
    return (out, all_weights) if return_weights else out


def dump_arrays(directory, **arrays) -> list[Path]:
    """Write arrays as little-endian float64 ``.npy`` files for cross-checks."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, arr in arrays.items():
        path = directory / f"{name}.npy"
        np.save(path, np.asarray(arr, dtype="<f8"))
        paths.append(path)
    return paths
