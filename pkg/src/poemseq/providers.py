"""Remote providers speaking the JSON protocols, and the descriptor factory
that turns config entries into provider objects."""
from __future__ import annotations

import base64
import io
from typing import Mapping

import httpx
import numpy as np

from poemseq.corpus import EmotionLabel
from poemseq.errors import ConfigurationError, ProviderError
from poemseq.segmentation import (
    ConstantClassifier,
    Entity,
    EntityLabel,
    GazetteerTagger,
    LexiconEmotionClassifier,
)
from poemseq.transport import auth_headers, make_client, post_json


def png_b64(pixels: np.ndarray) -> str:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), "RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_b64(data: str) -> np.ndarray:
    from PIL import Image

    with Image.open(io.BytesIO(base64.b64decode(data))) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


class _HttpProvider:
    def __init__(
        self,
        endpoint: str,
        *,
        retries: int = 2,
        backoff: float = 0.0,
        token_env: str | None = None,
        transport: httpx.BaseTransport | None = None,
        timeout: float = 60.0,
    ):
        self.endpoint = endpoint
        self.retries = retries
        self.backoff = backoff
        self.token_env = token_env
        self.client = make_client(endpoint, transport, timeout)
        self.calls = 0

    def _post(self, path: str, payload: dict) -> dict:
        self.calls += 1
        body, _ = post_json(
            self.client, path, payload, retries=self.retries, backoff=self.backoff,
            headers=auth_headers(self.token_env),
        )
        return body

    def descriptor(self) -> dict:
        return {"kind": "http", "class": type(self).__name__, "endpoint": self.endpoint}


class HttpAnnotator(_HttpProvider):
    """Entity tagger and emotion classifier behind ``POST /annotate``."""

    def _annotate(self, line: str) -> dict:
        body = self._post("/annotate", {"lines": [line]})
        try:
            entities, emotions = body["entities"], body["emotions"]
            if len(entities) != 1 or len(emotions) != 1:
                raise ValueError("expected exactly one result per line")
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed /annotate reply: {exc}", retryable=False) from exc
        return {"entities": entities[0], "emotion": emotions[0]}

    def tag(self, line: str) -> frozenset[Entity]:
        result = self._annotate(line)
        return frozenset(Entity(e["surface"], EntityLabel(e["label"])) for e in result["entities"])

    def classify(self, line: str) -> tuple[EmotionLabel, float]:
        emotion = self._annotate(line)["emotion"]
        return EmotionLabel.parse(emotion["label"]), float(emotion["confidence"])


class HttpDescriptionGenerator(_HttpProvider):
    """Chat-completion style text generator."""

    def __init__(self, endpoint: str, *, model: str = "default", temperature: float = 0.0,
                 seed: int | None = None, path: str = "/chat", **kw):
        super().__init__(endpoint, **kw)
        self.model, self.temperature, self.seed, self.path = model, temperature, seed, path

    def generate(self, prompt: str) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        if self.seed is not None:
            payload["seed"] = self.seed
        body = self._post(self.path, payload)
        text = body.get("text") if isinstance(body, dict) else None
        if not isinstance(text, str) or not text.strip():
            raise ProviderError("generator reply has no text", retryable=False)
        return text

    def descriptor(self) -> dict:
        return {**super().descriptor(), "model": self.model, "temperature": self.temperature, "seed": self.seed}


class HttpEmbedder(_HttpProvider):
    def __init__(self, endpoint: str, *, joint_space: bool = True, **kw):
        super().__init__(endpoint, **kw)
        self.joint_space = joint_space

    @staticmethod
    def _vector(body: dict) -> np.ndarray:
        try:
            vec = np.asarray(body["vector"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed embedding reply: {exc}", retryable=False) from exc
        if vec.ndim != 1 or not vec.size or not np.all(np.isfinite(vec)):
            raise ProviderError("embedding must be a non-empty finite vector", retryable=False)
        return vec

    def embed_text(self, text: str) -> np.ndarray:
        return self._vector(self._post("/embed_text", {"text": text}))

    def embed_image(self, image) -> np.ndarray:
        if image.pixels is None:
            raise ProviderError(f"image {image.segment_id} has no pixels", retryable=False)
        return self._vector(self._post("/embed_image", {"image_b64": png_b64(image.pixels)}))


class HttpCaptioner(_HttpProvider):
    def caption(self, image) -> str:
        if image.pixels is None:
            raise ProviderError(f"image {image.segment_id} has no pixels", retryable=False)
        body = self._post("/caption", {"image_b64": png_b64(image.pixels)})
        text = body.get("text") if isinstance(body, dict) else None
        if not isinstance(text, str):
            raise ProviderError("caption reply has no text", retryable=False)
        return text


def _http_kwargs(desc: Mapping, transport) -> dict:
    if not desc.get("endpoint"):
        raise ConfigurationError(f"http provider needs an endpoint: {dict(desc)}")
    return {
        "retries": int(desc.get("retries", 2)),
        "backoff": float(desc.get("backoff", 0.0)),
        "token_env": desc.get("token_env"),
        "transport": transport,
        "timeout": float(desc.get("timeout", 60.0)),
    }


def build_tagger(desc: Mapping, transport=None):
    kind = desc.get("kind", "gazetteer")
    if kind == "gazetteer":
        return GazetteerTagger(desc["entries"]) if "entries" in desc else GazetteerTagger.default()
    if kind == "http":
        return HttpAnnotator(desc["endpoint"], **_http_kwargs(desc, transport))
    raise ConfigurationError(f"unknown tagger kind {kind!r}")


def build_classifier(desc: Mapping, transport=None):
    kind = desc.get("kind", "lexicon")
    if kind == "lexicon":
        return LexiconEmotionClassifier(desc["lexicon"]) if "lexicon" in desc else LexiconEmotionClassifier.default()
    if kind == "constant":
        return ConstantClassifier(EmotionLabel.parse(desc.get("label", "neutral")), float(desc.get("confidence", 1.0)))
    if kind == "http":
        return HttpAnnotator(desc["endpoint"], **_http_kwargs(desc, transport))
    raise ConfigurationError(f"unknown classifier kind {kind!r}")


def build_generator(desc: Mapping, transport=None):
    from poemseq.refinement import EchoGenerator, SuffixGenerator, TemplateStubGenerator

    kind = desc.get("kind", "stub")
    if kind == "stub":
        return TemplateStubGenerator()
    if kind == "echo":
        return EchoGenerator()
    if kind == "suffix":
        return SuffixGenerator(desc.get("suffix", "!"))
    if kind == "http":
        return HttpDescriptionGenerator(
            desc["endpoint"],
            model=desc.get("model", "default"),
            temperature=float(desc.get("temperature", 0.0)),
            seed=desc.get("seed"),
            path=desc.get("path", "/chat"),
            **_http_kwargs(desc, transport),
        )
    raise ConfigurationError(f"unknown generator kind {kind!r}")


def build_embedder(desc: Mapping, transport=None):
    from poemseq.embedding import BagOfWordsEmbedder, HashProjectionEmbedder

    kind = desc.get("kind", "hash")
    if kind in ("hash", "stub"):
        return HashProjectionEmbedder(dim=int(desc.get("dim", 64)), seed=int(desc.get("seed", 0)))
    if kind == "bow":
        return BagOfWordsEmbedder(dim=int(desc.get("dim", 512)))
    if kind == "http":
        return HttpEmbedder(desc["endpoint"], joint_space=bool(desc.get("joint_space", True)),
                            **_http_kwargs(desc, transport))
    raise ConfigurationError(f"unknown embedder kind {kind!r}")


def build_captioner(desc: Mapping, transport=None):
    from poemseq.embedding import DescriptionCaptioner, FixedCaptioner

    kind = desc.get("kind", "stub")
    if kind in ("stub", "description"):
        return DescriptionCaptioner()
    if kind == "fixed":
        return FixedCaptioner(desc["text"])
    if kind == "http":
        return HttpCaptioner(desc["endpoint"], **_http_kwargs(desc, transport))
    raise ConfigurationError(f"unknown captioner kind {kind!r}")
