"""Run configuration: loading from TOML or JSON, validation and hashing."""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from poemseq.attention import SamplingPolicy
from poemseq.cache import canonical_json
from poemseq.errors import ConfigurationError
from poemseq.evaluation import APPROACHES
from poemseq.generation import BackendDescriptor
from poemseq.refinement import MsprConfig
from poemseq.segmentation import BoundaryPolicy

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PROVIDER_ROLES = ("tagger", "classifier", "generator", "scorer", "embedder", "captioner")
DEFAULT_PROVIDERS = {
    "tagger": {"kind": "gazetteer"},
    "classifier": {"kind": "lexicon"},
    "generator": {"kind": "stub"},
    "scorer": {"kind": "hash"},
    "embedder": {"kind": "hash"},
    "captioner": {"kind": "stub"},
}


@dataclass(frozen=True)
class RunConfig:
    corpus_path: Path
    approach: str = "poemtale"
    backend: BackendDescriptor = field(default_factory=BackendDescriptor)
    providers: Mapping[str, Mapping[str, Any]] = field(default_factory=lambda: dict(DEFAULT_PROVIDERS))
    mspr: MsprConfig = field(default_factory=MsprConfig)
    sampling: SamplingPolicy = field(default_factory=lambda: SamplingPolicy(pool="prior-images-only"))
    segmentation: BoundaryPolicy = field(default_factory=BoundaryPolicy)
    seed: int = 0
    output_dir: Path = Path("output")
    cache_dir: Path | None = None
    consistency: bool | None = None
    size: tuple[int, int] = (64, 64)
    style_directives: str = ""
    workers: int = 1
    gallery: bool = True
    score_overrides: Path | None = None

    def __post_init__(self):
        if self.approach not in APPROACHES:
            raise ConfigurationError(f"approach must be one of {APPROACHES}, got {self.approach!r}")
        if self.approach == "single_image" and self.consistency:
            raise ConfigurationError("single_image runs produce one image; consistency cannot be enabled")
        missing = [r for r in PROVIDER_ROLES if r not in self.providers]
        if missing:
            raise ConfigurationError(f"missing provider descriptors: {missing}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    @property
    def use_consistency(self) -> bool:
        if self.consistency is not None:
            return self.consistency
        return self.approach == "poemtale"

    def check_paths(self) -> None:
        """Fail early when referenced files are missing or dirs unwritable."""
        if not Path(self.corpus_path).is_file():
            raise ConfigurationError(f"corpus not found: {self.corpus_path}")
        if self.score_overrides is not None and not Path(self.score_overrides).is_file():
            raise ConfigurationError(f"score override file not found: {self.score_overrides}")
        try:
            self.mspr.templates()
        except FileNotFoundError as exc:
            raise ConfigurationError(str(exc)) from exc
        for d in (self.output_dir, self.cache_dir):
            if d is None:
                continue
            try:
                Path(d).mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise ConfigurationError(f"cannot create {d}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "corpus_path": str(self.corpus_path),
            "approach": self.approach,
            "backend": self.backend.to_dict(),
            "providers": {k: dict(v) for k, v in sorted(self.providers.items())},
            "mspr": dict(self.mspr.__dict__),
            "sampling": dict(self.sampling.__dict__),
            "segmentation": dict(self.segmentation.__dict__),
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "cache_dir": None if self.cache_dir is None else str(self.cache_dir),
            "consistency": self.consistency,
            "size": list(self.size),
            "style_directives": self.style_directives,
            "workers": self.workers,
            "gallery": self.gallery,
            "score_overrides": None if self.score_overrides is None else str(self.score_overrides),
        }

    def config_hash(self) -> str:
        """Hash of everything that affects results.

        Locations (output, cache) and the worker count are left out; the
        corpus enters by content, not by path.
        """
        doc = self.to_dict()
        for key in ("output_dir", "cache_dir", "workers", "corpus_path", "score_overrides"):
            doc.pop(key)
        doc["corpus_sha256"] = hashlib.sha256(Path(self.corpus_path).read_bytes()).hexdigest()
        if self.score_overrides is not None:
            doc["score_overrides_sha256"] = hashlib.sha256(Path(self.score_overrides).read_bytes()).hexdigest()
        return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def _resolve(base: Path | None, value) -> Path | None:
    if value is None:
        return None
    p = Path(value).expanduser()
    return p if p.is_absolute() or base is None else (base / p).resolve()


def config_from_dict(data: Mapping[str, Any], base_dir: Path | None = None, **overrides) -> RunConfig:
    """Build a :class:`RunConfig`; relative paths resolve against ``base_dir``."""
    data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    if "corpus_path" not in data:
        raise ConfigurationError("config needs corpus_path")
    try:
        providers = {**DEFAULT_PROVIDERS, **{k: dict(v) for k, v in (data.get("providers") or {}).items()}}
        unknown = set(providers) - set(PROVIDER_ROLES)
        if unknown:
            raise ConfigurationError(f"unknown provider roles: {sorted(unknown)}")
        sampling = dict(data.get("sampling") or {})
        sampling.setdefault("pool", "prior-images-only")
        sampling["seed"] = int(data.get("seed", 0))
        mspr = dict(data.get("mspr") or {})
        for key in ("stage1_template", "refine_template"):
            if key in mspr and str(mspr[key]).endswith(".txt"):
                mspr[key] = str(_resolve(base_dir, mspr[key]))
        return RunConfig(
            corpus_path=_resolve(base_dir, data["corpus_path"]),
            approach=data.get("approach", "poemtale"),
            backend=BackendDescriptor.from_dict(data.get("backend") or {}),
            providers=providers,
            mspr=MsprConfig.from_dict(mspr),
            sampling=SamplingPolicy(**{k: sampling[k] for k in ("rate", "seed", "pool") if k in sampling}),
            segmentation=BoundaryPolicy.from_dict(data.get("segmentation") or {}),
            seed=int(data.get("seed", 0)),
            output_dir=_resolve(base_dir, data.get("output_dir", "output")),
            cache_dir=_resolve(base_dir, data.get("cache_dir")),
            consistency=data.get("consistency"),
            size=tuple(int(v) for v in data.get("size", (64, 64))),
            style_directives=str(data.get("style_directives", "")),
            workers=int(data.get("workers", 1)),
            gallery=bool(data.get("gallery", True)),
            score_overrides=_resolve(base_dir, data.get("score_overrides")),
        )
    except ConfigurationError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigurationError(f"invalid config: {exc}") from exc


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc


def load_config(path, **overrides) -> RunConfig:
    path = Path(path)
    return config_from_dict(read_config_file(path), path.resolve().parent, **overrides)
