"""End-to-end orchestration: corpus -> segments -> descriptions -> images ->
metrics -> reports.

Output layout under ``output_dir``::

    manifest.json        deterministic record of the run
    report.json          aggregated metric table (schema-versioned)
    report.txt           the same table, aligned text
    run_stats.json       wall-clock timings and cache counters
    gallery.html         optional static page, images beside prompts
    poems/<poem_id>/     sequence.json, image_NN.png, segments.json,
                         traces.json (refined runs), metrics.json
"""
from __future__ import annotations

import hashlib
import html
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import httpx
import numpy as np

from poemseq.cache import ResponseCache, cache_key
from poemseq.config import RunConfig
from poemseq.corpus import EmotionLabel, ParseError, Poem, load_corpus
from poemseq.errors import PoemseqError
from poemseq.evaluation import (
    MetricReport,
    aggregate_report,
    render_table,
    report_document,
    score_sequence,
)
from poemseq.generation import (
    GenerationRequest,
    build_backend,
    generate_sequence,
    write_sequence,
)
from poemseq.providers import (
    build_captioner,
    build_classifier,
    build_embedder,
    build_generator,
    build_tagger,
)
from poemseq.refinement import RefinementTrace, load_score_overrides, run_mspr
from poemseq.segmentation import (
    Entity,
    EntityLabel,
    LineAnnotation,
    Segment,
    annotate_lines,
    boundary_agreement,
    detect_boundaries,
    dominant_emotion,
    gold_boundaries,
    gold_emotion_for,
    segments_from_boundaries,
)

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "poemseq.manifest/v1"


def _describe(provider) -> Any:
    fn = getattr(provider, "descriptor", None)
    return fn() if callable(fn) else {"class": type(provider).__name__}


class CachedAnnotator:
    """Caches tagger and classifier answers per line."""

    def __init__(self, tagger, classifier, cache: ResponseCache):
        self.tagger, self.classifier, self.cache = tagger, classifier, cache

    def tag(self, line: str) -> frozenset[Entity]:
        key = cache_key(_describe(self.tagger), None, {"op": "tag", "line": line})
        items = self.cache.get_or_compute(
            key, lambda: sorted([e.surface, e.label.value] for e in self.tagger.tag(line))
        )
        return frozenset(Entity(s, EntityLabel(lbl)) for s, lbl in items)

    def classify(self, line: str) -> tuple[EmotionLabel, float]:
        key = cache_key(_describe(self.classifier), None, {"op": "classify", "line": line})

        def live():
            label, conf = self.classifier.classify(line)
            return [EmotionLabel.parse(label).value, float(conf)]

        label, conf = self.cache.get_or_compute(key, live)
        return EmotionLabel(label), conf


def _image_payload(image) -> dict:
    pixels = None if image.pixels is None else hashlib.sha256(np.ascontiguousarray(image.pixels).tobytes()).hexdigest()
    shape = None if image.pixels is None else list(image.pixels.shape)
    return {"description": image.description, "pixels_sha256": pixels, "shape": shape}


class CachedEmbedder:
    def __init__(self, inner, cache: ResponseCache):
        self.inner, self.cache = inner, cache
        self.joint_space = getattr(inner, "joint_space", False)

    def embed_text(self, text: str) -> np.ndarray:
        key = cache_key(_describe(self.inner), None, {"op": "embed_text", "text": text})
        return np.asarray(self.cache.get_or_compute(key, lambda: self.inner.embed_text(text).tolist()))

    def embed_image(self, image) -> np.ndarray:
        key = cache_key(_describe(self.inner), None, {"op": "embed_image", **_image_payload(image)})
        return np.asarray(self.cache.get_or_compute(key, lambda: self.inner.embed_image(image).tolist()))

    def descriptor(self):
        return _describe(self.inner)


class CachedCaptioner:
    def __init__(self, inner, cache: ResponseCache):
        self.inner, self.cache = inner, cache

    def caption(self, image) -> str:
        key = cache_key(_describe(self.inner), None, {"op": "caption", **_image_payload(image)})
        return self.cache.get_or_compute(key, lambda: self.inner.caption(image))


@dataclass
class Providers:
    tagger: Any
    classifier: Any
    generator: Any
    scorer: Any
    embedder: Any
    captioner: Any

    @classmethod
    def from_config(cls, cfg: RunConfig, transport: httpx.BaseTransport | None = None) -> "Providers":
        p = cfg.providers
        return cls(
            tagger=build_tagger(p["tagger"], transport),
            classifier=build_classifier(p["classifier"], transport),
            generator=build_generator(p["generator"], transport),
            scorer=build_embedder(p["scorer"], transport),
            embedder=build_embedder(p["embedder"], transport),
            captioner=build_captioner(p["captioner"], transport),
        )

    def descriptors(self) -> dict:
        return {name: _describe(getattr(self, name)) for name in self.__dataclass_fields__}


@dataclass
class PoemOutcome:
    poem_id: str
    status: str = "ok"
    error: str | None = None
    segments: list[Segment] = field(default_factory=list)
    traces: list[RefinementTrace] = field(default_factory=list)
    prompts: list[tuple[str, str]] = field(default_factory=list)
    report: MetricReport | None = None
    agreement: dict | None = None
    directory: str | None = None
    images: list[str | None] = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class RunManifest:
    config_hash: str
    template_hashes: dict
    approach: str
    seed: int
    poems: list[dict]
    corpus_errors: list[dict]
    artifacts: dict

    @property
    def failures(self) -> int:
        return sum(p["status"] != "ok" for p in self.poems) + len(self.corpus_errors)

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0

    def to_dict(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "config_hash": self.config_hash,
            "template_hashes": self.template_hashes,
            "approach": self.approach,
            "seed": self.seed,
            "poems": self.poems,
            "corpus_errors": self.corpus_errors,
            "artifacts": self.artifacts,
        }


def safe_name(poem_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", poem_id) or "_"


class PipelineRunner:
    """Runs one configuration. Shared state (cache, providers) lives here;
    per-poem work is independent and may run on a worker pool."""

    def __init__(self, cfg: RunConfig, providers: Providers | None = None,
                 transport: httpx.BaseTransport | None = None, backend=None):
        cfg.check_paths()
        self.cfg = cfg
        self.raw = providers or Providers.from_config(cfg, transport)
        self.cache = ResponseCache(cfg.cache_dir) if cfg.cache_dir is not None else None
        if self.cache is not None:
            annot = CachedAnnotator(self.raw.tagger, self.raw.classifier, self.cache)
            self.tagger = self.classifier = annot
            self.scorer = CachedEmbedder(self.raw.scorer, self.cache)
            self.embedder = CachedEmbedder(self.raw.embedder, self.cache)
            self.captioner = CachedCaptioner(self.raw.captioner, self.cache)
        else:
            self.tagger, self.classifier = self.raw.tagger, self.raw.classifier
            self.scorer, self.embedder, self.captioner = self.raw.scorer, self.raw.embedder, self.raw.captioner
        self.generator = self.raw.generator
        backend_desc = cfg.backend
        if backend_desc.kind == "toy":
            opts = {"rate": cfg.sampling.rate, "pool": cfg.sampling.pool, **dict(backend_desc.options)}
            backend_desc = type(backend_desc)(backend_desc.kind, backend_desc.endpoint, backend_desc.model, opts)
        self.backend_desc = backend_desc
        self.backend = backend or build_backend(backend_desc, transport)
        self.overrides = load_score_overrides(cfg.score_overrides) if cfg.score_overrides else None

    # -- segmentation ----------------------------------------------------
    def annotate(self, poem: Poem) -> list[LineAnnotation]:
        return annotate_lines(poem, self.tagger, self.classifier,
                              confidence_floor=self.cfg.segmentation.confidence_floor)

    def epe_segments(self, poem: Poem, annotations: Sequence[LineAnnotation]) -> list[Segment]:
        return segments_from_boundaries(poem.id, annotations, detect_boundaries(annotations, self.cfg.segmentation))

    @staticmethod
    def gold_segments(poem: Poem) -> list[Segment]:
        return [
            Segment(poem.id, k, g.start, g.end, g.emotion)
            for k, g in enumerate(poem.gold_segments or ())
        ]

    # -- one poem --------------------------------------------------------
    def process(self, poem: Poem) -> PoemOutcome:
        started = time.perf_counter()
        outcome = PoemOutcome(poem.id)
        try:
            self._process(poem, outcome)
        except (PoemseqError, ValueError, OSError) as exc:
            logger.error("poem %s failed: %s", poem.id, exc)
            outcome.status = "failed"
            outcome.error = f"{type(exc).__name__}: {exc}"
        outcome.seconds = time.perf_counter() - started
        return outcome

    def _process(self, poem: Poem, outcome: PoemOutcome) -> None:
        cfg = self.cfg
        annotations = self.annotate(poem)
        epe = self.epe_segments(poem, annotations)
        gold = gold_boundaries(poem)
        if gold is not None and cfg.approach != "single_image":
            outcome.agreement = boundary_agreement(gold, [s.start for s in epe[1:]]).to_dict()

        if cfg.approach == "single_image":
            whole = Segment(poem.id, 0, 0, len(poem.lines), dominant_emotion(annotations),
                            frozenset().union(*(a.entities for a in annotations)))
            segments = [whole]
            prompts = [(whole.id, poem.text)]
        elif cfg.approach == "segments_only":
            segments = self.gold_segments(poem) if poem.gold_segments else epe
            prompts = [(s.id, s.text(poem)) for s in segments]
        else:
            segments = epe
            prompts = []
            for seg in segments:
                trace = run_mspr(seg.text(poem), poem.text, self.generator, self.scorer, cfg.mspr,
                                 segment_id=seg.id, cache=self.cache, overrides=self.overrides)
                outcome.traces.append(trace)
                best = trace.best_draft
                if best is None:
                    raise PoemseqError(f"refinement produced no description for {seg.id}: {trace.error}")
                prompts.append((seg.id, best.text))
        outcome.segments = segments
        outcome.prompts = prompts

        request = GenerationRequest(
            poem_id=poem.id,
            prompts=tuple(prompts),
            consistency=cfg.use_consistency,
            seed=cfg.seed,
            size=cfg.size,
            style_directives=cfg.style_directives,
        )
        artifacts = generate_sequence(request, self.backend)
        poem_dir = Path(cfg.output_dir) / "poems" / safe_name(poem.id)
        write_sequence(poem_dir, poem.id, artifacts)
        outcome.directory = f"poems/{safe_name(poem.id)}"
        outcome.images = [f"{outcome.directory}/image_{k:02d}.png" if a.ok else None
                          for k, a in enumerate(artifacts)]
        self._write_json(poem_dir / "segments.json", [s.to_dict() for s in segments])
        if outcome.traces:
            self._write_json(poem_dir / "traces.json", [t.to_dict() for t in outcome.traces])
        failed = [a for a in artifacts if not a.ok]
        if failed:
            raise PoemseqError(f"{len(failed)} of {len(artifacts)} images failed: {failed[0].error}")

        emotions = []
        for seg in segments:
            start, end = seg.line_range
            emotions.append(gold_emotion_for(poem, start, end) or seg.dominant_emotion)
        outcome.report = score_sequence(
            poem_id=poem.id,
            approach=cfg.approach,
            model=self.backend_desc.model_name,
            poem_text=poem.text,
            images=artifacts,
            instructions=request.prompt_texts(),
            gold_emotions=emotions,
            captioner=self.captioner,
            embedder=self.embedder,
        )
        self._write_json(poem_dir / "metrics.json", outcome.report.to_dict())

    @staticmethod
    def _write_json(path: Path, doc) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n", "utf-8")

    # -- whole run -------------------------------------------------------
    def run(self) -> RunManifest:
        cfg = self.cfg
        started = time.perf_counter()
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        errors: list[ParseError] = []
        poems = load_corpus(cfg.corpus_path, errors)
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                outcomes = list(pool.map(self.process, poems))
        else:
            outcomes = [self.process(p) for p in poems]

        reports = [o.report for o in outcomes if o.report is not None]
        artifacts = {"manifest": "manifest.json"}
        if reports:
            rows = aggregate_report(reports)
            doc = report_document(rows)
            doc["runs"] = [r.to_dict() for r in reports]
            self._write_json(out / "report.json", doc)
            (out / "report.txt").write_text(render_table(rows), "utf-8")
            artifacts.update({"report_json": "report.json", "report_txt": "report.txt"})
        if cfg.gallery:
            (out / "gallery.html").write_text(render_gallery(poems, outcomes), "utf-8")
            artifacts["gallery"] = "gallery.html"

        manifest = RunManifest(
            config_hash=cfg.config_hash(),
            template_hashes=cfg.mspr.template_hashes(),
            approach=cfg.approach,
            seed=cfg.seed,
            poems=[_manifest_entry(o) for o in outcomes],
            corpus_errors=[{"line": e.line_number, "message": e.message} for e in errors],
            artifacts=artifacts,
        )
        self._write_json(out / "manifest.json", manifest.to_dict())
        stats = {
            "seconds_total": time.perf_counter() - started,
            "seconds_per_poem": {o.poem_id: o.seconds for o in outcomes},
            "cache": None if self.cache is None else {"hits": self.cache.hits, "misses": self.cache.misses},
        }
        self._write_json(out / "run_stats.json", stats)
        return manifest


def _manifest_entry(o: PoemOutcome) -> dict:
    return {
        "poem_id": o.poem_id,
        "status": o.status,
        "error": o.error,
        "directory": o.directory,
        "segments": [s.to_dict() for s in o.segments],
        "prompts": [{"segment_id": sid, "text": text} for sid, text in o.prompts],
        "images": o.images,
        "terminations": [t.termination for t in o.traces],
        "segment_agreement": o.agreement,
        "metrics": None if o.report is None else o.report.to_dict(),
    }


def render_gallery(poems: Sequence[Poem], outcomes: Sequence[PoemOutcome]) -> str:
    by_id = {p.id: p for p in poems}
    parts = ["<!DOCTYPE html>", "<html><head><meta charset='utf-8'><title>Poem image sequences</title>",
             "<style>body{font-family:serif;margin:2em}td{vertical-align:top;padding:.5em}"
             "img{width:160px;image-rendering:pixelated}pre{white-space:pre-wrap}</style></head><body>"]
    for o in outcomes:
        poem = by_id[o.poem_id]
        parts.append(f"<h2>{html.escape(poem.title)} <small>{html.escape(poem.poet)}</small></h2>")
        if o.status != "ok":
            parts.append(f"<p><b>failed:</b> {html.escape(o.error or '')}</p>")
        parts.append("<table>")
        for (sid, text), img in zip(o.prompts, o.images or [None] * len(o.prompts)):
            cell = f"<img src='{html.escape(img)}' alt='{html.escape(sid)}'>" if img else "(no image)"
            parts.append(f"<tr><td>{cell}</td><td><pre>{html.escape(text)}</pre></td></tr>")
        parts.append("</table>")
    parts.append("</body></html>")
    return "\n".join(parts) + "\n"


def run_pipeline(cfg: RunConfig, providers: Providers | None = None,
                 transport: httpx.BaseTransport | None = None, backend=None) -> RunManifest:
    return PipelineRunner(cfg, providers, transport, backend).run()


def find_poem(poems: Sequence[Poem], poem_id: str) -> Poem:
    for p in poems:
        if p.id == poem_id:
            return p
    raise KeyError(f"no poem with id {poem_id!r}")


def segment_one(poem: Poem, tagger, classifier, policy) -> dict:
    """Annotations, EPE segments and gold agreement for one poem."""
    annotations = annotate_lines(poem, tagger, classifier, confidence_floor=policy.confidence_floor)
    boundaries = detect_boundaries(annotations, policy)
    segments = segments_from_boundaries(poem.id, annotations, boundaries)
    gold = gold_boundaries(poem)
    return {
        "poem_id": poem.id,
        "boundaries": boundaries,
        "segments": [s.to_dict() for s in segments],
        "annotations": [
            {
                "line_index": a.line_index,
                "emotion": a.emotion.value,
                "emotion_confidence": a.emotion_confidence,
                "entities": sorted([e.surface, e.label.value] for e in a.entities),
            }
            for a in annotations
        ],
        "gold_agreement": None if gold is None else boundary_agreement(gold, boundaries).to_dict(),
    }


def evaluate_sequence_dir(directory, poem: Poem, *, approach: str, captioner, embedder,
                          model: str | None = None) -> MetricReport:
    """Score a sequence written by :func:`write_sequence`.

    Gold emotions come from ``segments.json`` line ranges when present,
    otherwise from the gold segment covering most of the poem.
    """
    from poemseq.generation import load_sequence

    directory = Path(directory)
    poem_id, artifacts = load_sequence(directory)
    if poem_id != poem.id:
        raise ValueError(f"sequence belongs to {poem_id!r}, not {poem.id!r}")
    seg_file = directory / "segments.json"
    ranges = {}
    if seg_file.exists():
        ranges = {s["id"]: tuple(s["line_range"]) for s in json.loads(seg_file.read_text("utf-8"))}
    emotions = []
    for art in artifacts:
        start, end = ranges.get(art.segment_id, (0, len(poem.lines)))
        emotions.append(gold_emotion_for(poem, start, end) or EmotionLabel.NEUTRAL)
    model = model or (artifacts[0].backend_meta.get("model") if artifacts else None) or "unknown"
    return score_sequence(
        poem_id=poem.id,
        approach=approach,
        model=model,
        poem_text=poem.text,
        images=artifacts,
        instructions=[a.description for a in artifacts],
        gold_emotions=emotions,
        captioner=captioner,
        embedder=embedder,
    )
