"""Image-sequence generation through pluggable backends.

``ToyBackend`` is a small deterministic stand-in for a diffusion model:
descriptions become 8x8x16 token grids through seeded word hashing, pass
through two rounds of (consistent) self-attention, and are read out to RGB.
``HttpImageBackend`` forwards prompts to a remote model service.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import httpx
import numpy as np

from poemseq.attention import (
    ProjectionWeights,
    SamplingPolicy,
    consistent_self_attention,
    self_attention,
)
from poemseq.embedding import stable_hash
from poemseq.errors import (
    ConfigurationError,
    ImageValidationError,
    PoemseqError,
    ProviderError,
)
from poemseq.providers import decode_png_b64
from poemseq.transport import auth_headers, make_client, post_json

logger = logging.getLogger(__name__)

SEQUENCE_SCHEMA = "poemseq.sequence/v1"


@dataclass(frozen=True)
class GenerationRequest:
    poem_id: str
    prompts: tuple[tuple[str, str], ...]
    consistency: bool = True
    seed: int = 0
    size: tuple[int, int] = (64, 64)
    style_directives: str = ""

    def __post_init__(self):
        if not self.prompts:
            raise ValueError("generation request has no prompts")
        width, height = self.size
        if width < 1 or height < 1:
            raise ValueError(f"invalid image size {self.size}")

    def prompt_texts(self) -> list[str]:
        style = self.style_directives.strip()
        return [f"{text}, {style}" if style else text for _, text in self.prompts]


@dataclass
class ImageArtifact:
    segment_id: str
    pixels: np.ndarray | None = None
    feature_map: np.ndarray | None = None
    backend_meta: dict = field(default_factory=dict)
    description: str = ""
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.pixels is not None


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str = "toy"
    endpoint: str | None = None
    model: str | None = None
    options: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("toy", "http"):
            raise ConfigurationError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not self.endpoint:
            raise ConfigurationError("http backend requires an endpoint")

    @classmethod
    def from_dict(cls, data: Mapping) -> "BackendDescriptor":
        return cls(
            kind=data.get("kind", "toy"),
            endpoint=data.get("endpoint"),
            model=data.get("model"),
            options=dict(data.get("options", {})),
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind, "endpoint": self.endpoint, "model": self.model, "options": dict(self.options)}

    @property
    def model_name(self) -> str:
        return self.model or ("toy-csa" if self.kind == "toy" else "remote")


class ImageBackend(Protocol):
    def generate(self, request: GenerationRequest) -> list[ImageArtifact]: ...


_WORD_RE = re.compile(r"\w+", re.UNICODE)


def text_token_grid(text: str, seed: int, tokens: int = 64, channels: int = 16) -> np.ndarray:
    """Seeded pseudo-embedding of ``text`` as a ``(tokens, channels)`` grid.

    Each word owns a standard-normal grid drawn from ``(hash(word), seed)``;
    the text's grid is the sum over its words divided by sqrt(word count).
    """
    words = _WORD_RE.findall(text.lower())
    if not words:
        raise ValueError(f"cannot embed description {text!r}: no words")
    grid = np.zeros((tokens, channels))
    for w in words:
        grid += np.random.default_rng([stable_hash(w, "token-grid"), seed]).standard_normal((tokens, channels))
    return grid / np.sqrt(len(words))


def upsample_nearest(grid_rgb: np.ndarray, width: int, height: int) -> np.ndarray:
    g_h, g_w, _ = grid_rgb.shape
    rows = (np.arange(height) * g_h) // height
    cols = (np.arange(width) * g_w) // width
    return grid_rgb[rows][:, cols]


class ToyBackend:
    """Deterministic attention-based image generator.

    Per request: token grids for all descriptions, ``layers`` rounds of
    attention across the batch (consistent attention drawing from earlier
    images when the request asks for consistency, plain self-attention
    otherwise), then a linear channel-to-RGB readout upsampled to the
    requested size.
    """

    def __init__(self, grid: int = 8, channels: int = 16, layers: int = 2,
                 rate: float = 0.5, pool: str = "prior-images-only", model: str = "toy-csa"):
        self.grid, self.channels, self.layers = grid, channels, layers
        self.rate, self.pool, self.model = rate, pool, model

    def layer_weights(self, seed: int, layer: int) -> ProjectionWeights:
        return ProjectionWeights.random(self.channels, seed=[seed, 1000 + layer])

    def readout_weights(self, seed: int) -> np.ndarray:
        return np.random.default_rng([seed, 2000]).standard_normal((self.channels, 3)) / np.sqrt(self.channels)

    def policy(self, seed: int) -> SamplingPolicy:
        return SamplingPolicy(rate=self.rate, seed=seed, pool=self.pool)

    def features(self, texts: Sequence[str], seed: int, consistency: bool) -> np.ndarray:
        batch = np.stack([text_token_grid(t, seed, self.grid * self.grid, self.channels) for t in texts])
        policy = self.policy(seed)
        for layer in range(self.layers):
            w = self.layer_weights(seed, layer)
            if consistency:
                batch = consistent_self_attention(batch, w, policy, stream=layer)
            else:
                batch = np.stack([self_attention(x, w) for x in batch])
        return batch

    def render(self, feature_map: np.ndarray, seed: int, width: int, height: int) -> np.ndarray:
        rgb = feature_map @ self.readout_weights(seed)
        levels = np.clip(np.rint(128.0 + 96.0 * rgb), 0, 255).astype(np.uint8)
        return upsample_nearest(levels.reshape(self.grid, self.grid, 3), width, height)

    def generate(self, request: GenerationRequest) -> list[ImageArtifact]:
        texts = request.prompt_texts()
        for sid, text in request.prompts:
            if not text.strip():
                raise ValueError(f"empty description for segment {sid}")
        feats = self.features(texts, request.seed, request.consistency)
        width, height = request.size
        meta = {
            "backend": "toy",
            "model": self.model,
            "layers": self.layers,
            "grid": self.grid,
            "channels": self.channels,
            "consistency": request.consistency,
            "sampling_rate": self.rate if request.consistency else 0.0,
            "pool": self.pool,
            "seed": request.seed,
        }
        return [
            ImageArtifact(
                segment_id=sid,
                pixels=self.render(f, request.seed, width, height),
                feature_map=f,
                backend_meta=dict(meta),
                description=text,
            )
            for (sid, _), text, f in zip(request.prompts, texts, feats)
        ]


def toy_generate(prompts: Sequence[str], seed: int, policy: SamplingPolicy | None = None,
                 size: tuple[int, int] = (64, 64), consistency: bool = True) -> list[ImageArtifact]:
    policy = policy or SamplingPolicy(seed=seed, pool="prior-images-only")
    backend = ToyBackend(rate=policy.rate, pool=policy.pool)
    request = GenerationRequest(
        poem_id="toy",
        prompts=tuple((f"toy#{k}", p) for k, p in enumerate(prompts)),
        consistency=consistency,
        seed=seed,
        size=size,
    )
    return backend.generate(request)


class HttpImageBackend:
    """Client for a remote text-to-image service.

    Protocol: ``POST {path}`` with ``{prompt, seed, width, height,
    consistent, reference_ids}`` answered by ``{image_b64, meta}``.
    """

    def __init__(self, descriptor: BackendDescriptor, transport: httpx.BaseTransport | None = None):
        if descriptor.kind != "http":
            raise ConfigurationError("HttpImageBackend needs an http descriptor")
        opts = dict(descriptor.options)
        self.descriptor = descriptor
        self.path = opts.pop("path", "/generate")
        self.retries = int(opts.pop("retries", 2))
        self.backoff = float(opts.pop("backoff", 0.5))
        self.token_env = opts.pop("token_env", "POEMSEQ_BACKEND_TOKEN")
        timeout = float(opts.pop("timeout", 300.0))
        self.extra_meta = opts  # sampler / quantization / ema tags, recorded verbatim
        self.client = make_client(descriptor.endpoint, transport, timeout)
        self.calls = 0

    def generate_one(self, segment_id: str, prompt: str, *, seed: int, size: tuple[int, int],
                     consistent: bool = False, reference_ids: Sequence[str] = ()) -> ImageArtifact:
        width, height = size
        payload = {
            "prompt": prompt,
            "seed": seed,
            "width": width,
            "height": height,
            "consistent": consistent,
            "reference_ids": list(reference_ids),
        }
        if self.descriptor.model:
            payload["model"] = self.descriptor.model
        self.calls += 1
        body, retries = post_json(self.client, self.path, payload, retries=self.retries,
                                  backoff=self.backoff, headers=auth_headers(self.token_env))
        try:
            pixels = decode_png_b64(body["image_b64"])
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise ProviderError(f"undecodable image in reply: {exc}", retryable=False) from exc
        if pixels.shape[:2] != (height, width):
            raise ImageValidationError(
                f"backend returned {pixels.shape[1]}x{pixels.shape[0]}, expected {width}x{height}"
            )
        meta = {
            "backend": "http",
            "model": self.descriptor.model_name,
            **self.extra_meta,
            **(body.get("meta") or {}),
            "retries": retries,
        }
        return ImageArtifact(segment_id, pixels, None, meta, prompt)

    def generate(self, request: GenerationRequest) -> list[ImageArtifact]:
        artifacts: list[ImageArtifact] = []
        failed = False
        for k, ((sid, _), prompt) in enumerate(zip(request.prompts, request.prompt_texts())):
            if failed and request.consistency:
                artifacts.append(ImageArtifact(sid, description=prompt, error="skipped: an earlier segment failed"))
                continue
            refs = [a.segment_id for a in artifacts] if request.consistency else []
            try:
                artifacts.append(self.generate_one(
                    sid, prompt, seed=request.seed, size=request.size,
                    consistent=request.consistency and k > 0, reference_ids=refs,
                ))
            except PoemseqError as exc:
                logger.error("generation failed for %s: %s", sid, exc)
                artifacts.append(ImageArtifact(sid, description=prompt, error=str(exc)))
                failed = True
        return artifacts


def build_backend(descriptor: BackendDescriptor, transport: httpx.BaseTransport | None = None):
    if descriptor.kind == "toy":
        opts = dict(descriptor.options)
        return ToyBackend(
            rate=float(opts.get("rate", 0.5)),
            pool=opts.get("pool", "prior-images-only"),
            layers=int(opts.get("layers", 2)),
            model=descriptor.model_name,
        )
    return HttpImageBackend(descriptor, transport)


def generate_sequence(request: GenerationRequest, backend: ImageBackend) -> list[ImageArtifact]:
    """One artifact per prompt, in order; failed segments carry ``error``."""
    artifacts = backend.generate(request)
    if len(artifacts) != len(request.prompts):
        raise PoemseqError(f"backend returned {len(artifacts)} artifacts for {len(request.prompts)} prompts")
    return artifacts


def write_sequence(out_dir, poem_id: str, artifacts: Sequence[ImageArtifact]) -> Path:
    """PNG per artifact plus a ``sequence.json`` manifest; returns its path."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, art in enumerate(artifacts):
        entry = {"segment_id": art.segment_id, "file": None, "description": art.description,
                 "meta": art.backend_meta}
        if art.ok:
            name = f"image_{k:02d}.png"
            Image.fromarray(art.pixels, "RGB").save(out_dir / name, format="PNG")
            entry["file"] = name
        if art.error:
            entry["error"] = art.error
        entries.append(entry)
    path = out_dir / "sequence.json"
    doc = {"schema": SEQUENCE_SCHEMA, "poem_id": poem_id, "artifacts": entries}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n", "utf-8")
    return path


def load_sequence(directory) -> tuple[str, list[ImageArtifact]]:
    from PIL import Image

    directory = Path(directory)
    doc = json.loads((directory / "sequence.json").read_text("utf-8"))
    artifacts = []
    for entry in doc["artifacts"]:
        pixels = None
        if entry.get("file"):
            with Image.open(directory / entry["file"]) as img:
                pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
        artifacts.append(ImageArtifact(entry["segment_id"], pixels, None, entry.get("meta", {}),
                                       entry.get("description", ""), entry.get("error")))
    return doc["poem_id"], artifacts
