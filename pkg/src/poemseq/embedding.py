"""Embedding and captioning providers plus the cosine helper.

The stub providers are deterministic and model-free. ``HashProjectionEmbedder``
maps text to character-trigram hash counts and projects them to 64
dimensions with a seeded Gaussian matrix; it embeds images through the
description they were generated from (or, lacking one, a coarse pixel
signature), so text and images share one space.
"""
from __future__ import annotations

import hashlib
import re
from typing import TYPE_CHECKING, Protocol

import numpy as np

if TYPE_CHECKING:
    from poemseq.generation import ImageArtifact


class TextEmbedder(Protocol):
    def embed_text(self, text: str) -> np.ndarray: ...


class ImageEmbedder(Protocol):
    joint_space: bool

    def embed_image(self, image: "ImageArtifact") -> np.ndarray: ...


class Captioner(Protocol):
    def caption(self, image: "ImageArtifact") -> str: ...


def stable_hash(text: str, salt: str = "") -> int:
    digest = hashlib.blake2b(f"{salt}\x00{text}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"vector dimensions differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


_WORD_RE = re.compile(r"\w+", re.UNICODE)


def char_ngrams(text: str, n: int = 3) -> list[str]:
    grams = []
    for word in _WORD_RE.findall(text.lower()):
        padded = f" {word} "
        grams.extend(padded[i : i + n] for i in range(len(padded) - n + 1))
    return grams


def pixel_signature(pixels: np.ndarray, cells: int = 4) -> str:
    """Coarse textual fingerprint of an RGB buffer (cell means, 16 levels)."""
    h, w, _ = pixels.shape
    rows = np.array_split(np.arange(h), min(cells, h))
    cols = np.array_split(np.arange(w), min(cells, w))
    tokens = []
    for r, ri in enumerate(rows):
        for c, ci in enumerate(cols):
            mean = pixels[np.ix_(ri, ci)].reshape(-1, 3).mean(axis=0)
            q = (mean // 16).astype(int)
            tokens.append(f"cell{r}x{c}r{q[0]}g{q[1]}b{q[2]}")
    return " ".join(tokens)


class HashProjectionEmbedder:
    joint_space = True

    def __init__(self, dim: int = 64, buckets: int = 4096, n: int = 3, seed: int = 0):
        self.dim, self.buckets, self.n, self.seed = dim, buckets, n, seed
        self.projection = np.random.default_rng(seed).standard_normal((buckets, dim))
        self.calls = 0

    def features(self, text: str) -> np.ndarray:
        counts = np.zeros(self.buckets)
        for gram in char_ngrams(text, self.n):
            counts[stable_hash(gram, "ngram") % self.buckets] += 1.0
        return counts

    def embed_text(self, text: str) -> np.ndarray:
        self.calls += 1
        vec = self.features(text) @ self.projection
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise ValueError(f"no features to embed in {text!r}")
        return vec / norm

    def embed_image(self, image: "ImageArtifact") -> np.ndarray:
        if image.description:
            return self.embed_text(image.description)
        if image.pixels is None:
            raise ValueError(f"image {image.segment_id} has neither pixels nor description")
        return self.embed_text(pixel_signature(image.pixels))

    def descriptor(self) -> dict:
        return {"kind": "hash", "dim": self.dim, "buckets": self.buckets, "n": self.n, "seed": self.seed}


class BagOfWordsEmbedder:
    """Hashed word counts; blind to word order. Text only."""

    joint_space = False

    def __init__(self, dim: int = 512):
        self.dim = dim
        self.calls = 0

    def embed_text(self, text: str) -> np.ndarray:
        self.calls += 1
        vec = np.zeros(self.dim)
        for word in _WORD_RE.findall(text.lower()):
            vec[stable_hash(word, "bow") % self.dim] += 1.0
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise ValueError(f"no words to embed in {text!r}")
        return vec / norm

    def descriptor(self) -> dict:
        return {"kind": "bow", "dim": self.dim}


class DescriptionCaptioner:
    """Captions an image with the description it was generated from."""

    def __init__(self):
        self.calls = 0

    def caption(self, image: "ImageArtifact") -> str:
        self.calls += 1
        if not image.description:
            raise ValueError(f"image {image.segment_id} carries no description")
        return image.description

    def descriptor(self) -> dict:
        return {"kind": "description"}


class FixedCaptioner:
    def __init__(self, text: str):
        self.text = text
        self.calls = 0

    def caption(self, image: "ImageArtifact") -> str:
        self.calls += 1
        return self.text

    def descriptor(self) -> dict:
        return {"kind": "fixed", "text": self.text}
