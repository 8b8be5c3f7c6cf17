"""FastAPI application exposing the pipeline.

Pipeline endpoints wrap the core package one-to-one. Under ``/providers``
the service also hosts the deterministic stub providers with the same wire
protocols as the remote ones, so a client configured with
``{"kind": "http", "endpoint": "<server>/providers"}`` runs fully offline.
"""
from __future__ import annotations

import logging
from functools import lru_cache
from importlib import resources
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from poemseq import __version__
from poemseq.cache import ResponseCache
from poemseq.config import DEFAULT_PROVIDERS, config_from_dict
from poemseq.corpus import (
    VALIDATION_SCHEMA,
    ParseError,
    compare_to_reference,
    corpus_stats,
    parse_corpus,
    validate_poem,
)
from poemseq.embedding import HashProjectionEmbedder, pixel_signature
from poemseq.errors import ConfigurationError, ProviderError
from poemseq.evaluation import (
    MetricReport,
    aggregate_report,
    load_reference_table,
    render_table,
    report_document,
)
from poemseq.generation import (
    BackendDescriptor,
    GenerationRequest,
    build_backend,
    generate_sequence,
    write_sequence,
)
from poemseq.pipeline import evaluate_sequence_dir, find_poem, run_pipeline, segment_one
from poemseq.providers import (
    build_captioner,
    build_classifier,
    build_embedder,
    build_generator,
    build_tagger,
    decode_png_b64,
    png_b64,
)
from poemseq.refinement import MsprConfig, TemplateStubGenerator, run_mspr
from poemseq.segmentation import (
    BoundaryPolicy,
    GazetteerTagger,
    LexiconEmotionClassifier,
)
from poemseq.service import schemas

logger = logging.getLogger(__name__)

app = FastAPI(title="poemseq", version=__version__)


@app.exception_handler(ConfigurationError)
async def _config_error(request: Request, exc: ConfigurationError):
    return JSONResponse(status_code=422, content={"detail": str(exc), "kind": "configuration"})


@app.exception_handler(ProviderError)
async def _provider_error(request: Request, exc: ProviderError):
    return JSONResponse(status_code=502, content={"detail": str(exc), "kind": "provider"})


@app.exception_handler(KeyError)
async def _not_found(request: Request, exc: KeyError):
    return JSONResponse(status_code=404, content={"detail": str(exc.args[0] if exc.args else exc)})


@app.exception_handler(ValueError)
async def _bad_value(request: Request, exc: ValueError):
    return JSONResponse(status_code=400, content={"detail": str(exc)})


def sample_corpus_text() -> str:
    return resources.files("poemseq.data").joinpath("sample_corpus.jsonl").read_text("utf-8")


def _corpus(body: schemas.CorpusInput):
    errors: list[ParseError] = []
    if body.corpus_text is not None:
        poems = parse_corpus(body.corpus_text, errors)
    elif body.corpus_path is not None:
        path = Path(body.corpus_path)
        if not path.is_file():
            raise ConfigurationError(f"corpus not found: {path}")
        poems = parse_corpus(path.read_bytes(), errors)
    else:
        poems = parse_corpus(sample_corpus_text(), errors)
    return poems, [schemas.ParseErrorOut(line=e.line_number, message=e.message) for e in errors]


def _providers(overrides: dict) -> dict:
    merged = {**DEFAULT_PROVIDERS, **overrides}
    unknown = set(merged) - set(DEFAULT_PROVIDERS)
    if unknown:
        raise ConfigurationError(f"unknown provider roles: {sorted(unknown)}")
    return merged


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/corpus/stats", response_model=schemas.StatsResponse)
def stats(body: schemas.CorpusInput):
    poems, errors = _corpus(body)
    result = corpus_stats(poems)
    return schemas.StatsResponse(
        document=result.to_document(),
        parse_errors=errors,
        reference_differences=compare_to_reference(result),
    )


@app.post("/corpus/validate", response_model=schemas.ValidateResponse)
def validate(body: schemas.CorpusInput):
    poems, errors = _corpus(body)
    reports = [validate_poem(p) for p in poems]
    return schemas.ValidateResponse(
        document={
            "schema": VALIDATION_SCHEMA,
            "reports": [r.to_document() for r in reports],
        },
        parse_errors=errors,
        passed=all(r.passed for r in reports) and not errors,
    )


@app.post("/segment")
def segment(body: schemas.SegmentRequest):
    poems, _ = _corpus(body)
    poem = find_poem(poems, body.poem_id)
    providers = _providers(body.providers)
    return segment_one(
        poem,
        build_tagger(providers["tagger"]),
        build_classifier(providers["classifier"]),
        BoundaryPolicy.from_dict(body.policy),
    )


@app.post("/refine", response_model=schemas.RefineResponse)
def refine(body: schemas.RefineRequest):
    poems, _ = _corpus(body)
    poem = find_poem(poems, body.poem_id)
    cfg = body.config
    providers = _providers(cfg.get("providers") or {})
    try:
        mspr = MsprConfig.from_dict(cfg.get("mspr") or {})
        policy = BoundaryPolicy.from_dict(cfg.get("segmentation") or {})
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc
    cache = ResponseCache(cfg["cache_dir"]) if cfg.get("cache_dir") else None
    seg_info = segment_one(poem, build_tagger(providers["tagger"]), build_classifier(providers["classifier"]), policy)
    segments = seg_info["segments"]
    if body.segment is not None:
        if not 0 <= body.segment < len(segments):
            raise KeyError(f"poem {poem.id} has {len(segments)} segments; no segment {body.segment}")
        segments = [segments[body.segment]]
    generator = build_generator(providers["generator"])
    scorer = build_embedder(providers["scorer"])
    traces = []
    for seg in segments:
        start, end = seg["line_range"]
        traces.append(run_mspr(poem.lines_text(start, end), poem.text, generator, scorer, mspr,
                               segment_id=seg["id"], cache=cache).to_dict())
    return schemas.RefineResponse(poem_id=poem.id, template_hashes=mspr.template_hashes(), traces=traces)


@app.post("/generate", response_model=schemas.GenerateResponse)
def generate(body: schemas.GenerateRequest):
    request = GenerationRequest(
        poem_id=body.poem_id,
        prompts=tuple((p.segment_id, p.text) for p in body.prompts),
        consistency=body.consistency,
        seed=body.seed,
        size=(body.width, body.height),
        style_directives=body.style_directives,
    )
    backend = build_backend(BackendDescriptor.from_dict(body.backend))
    artifacts = generate_sequence(request, backend)
    path = write_sequence(body.output_dir, body.poem_id, artifacts) if body.output_dir else None
    return schemas.GenerateResponse(
        poem_id=body.poem_id,
        artifacts=[
            schemas.ArtifactOut(
                segment_id=a.segment_id,
                image_b64=png_b64(a.pixels) if a.pixels is not None else None,
                description=a.description,
                meta=a.backend_meta,
                error=a.error,
            )
            for a in artifacts
        ],
        sequence_path=None if path is None else str(path),
    )


@app.post("/evaluate")
def evaluate(body: schemas.EvaluateRequest):
    poems, _ = _corpus(body)
    poem = find_poem(poems, body.poem_id)
    providers = _providers(body.providers)
    report = evaluate_sequence_dir(
        body.sequence_dir, poem, approach=body.approach, model=body.model,
        captioner=build_captioner(providers["captioner"]),
        embedder=build_embedder(providers["embedder"]),
    )
    return report.to_dict()


@app.post("/report", response_model=schemas.ReportResponse)
def report(body: schemas.ReportRequest):
    runs = load_reference_table() if body.reference else [MetricReport.from_dict(r) for r in body.runs]
    rows = aggregate_report(runs)
    return schemas.ReportResponse(document=report_document(rows), text=render_table(rows))


@app.post("/run", response_model=schemas.RunResponse)
def run(body: schemas.RunRequest):
    cfg = config_from_dict(
        body.config,
        Path(body.base_dir) if body.base_dir else None,
        approach=body.approach,
        seed=body.seed,
        output_dir=body.output_dir,
    )
    manifest = run_pipeline(cfg)
    return schemas.RunResponse(exit_code=manifest.exit_code, output_dir=str(cfg.output_dir),
                               manifest=manifest.to_dict())


# -- stub providers --------------------------------------------------------

@lru_cache(maxsize=1)
def _stubs():
    return {
        "tagger": GazetteerTagger.default(),
        "classifier": LexiconEmotionClassifier.default(),
        "generator": TemplateStubGenerator(),
        "embedder": HashProjectionEmbedder(),
        "backend": build_backend(BackendDescriptor(kind="toy")),
    }


@app.post("/providers/annotate", response_model=schemas.AnnotateResponse)
def stub_annotate(body: schemas.AnnotateRequest):
    stubs = _stubs()
    entities, emotions = [], []
    for line in body.lines:
        entities.append(sorted(({"surface": e.surface, "label": e.label.value} for e in stubs["tagger"].tag(line)),
                               key=lambda d: (d["label"], d["surface"])))
        label, conf = stubs["classifier"].classify(line)
        emotions.append({"label": label.value, "confidence": conf})
    return schemas.AnnotateResponse(entities=entities, emotions=emotions)


@app.post("/providers/chat", response_model=schemas.TextResponse)
def stub_chat(body: schemas.ChatRequest):
    prompt = "\n\n".join(m.content for m in body.messages if m.role == "user")
    return schemas.TextResponse(text=_stubs()["generator"].generate(prompt))


@app.post("/providers/embed_text", response_model=schemas.VectorResponse)
def stub_embed_text(body: schemas.EmbedTextRequest):
    return schemas.VectorResponse(vector=_stubs()["embedder"].embed_text(body.text).tolist())


def _decode(image_b64: str):
    try:
        return decode_png_b64(image_b64)
    except (ValueError, OSError) as exc:
        raise HTTPException(status_code=400, detail=f"undecodable image: {exc}") from exc


@app.post("/providers/embed_image", response_model=schemas.VectorResponse)
def stub_embed_image(body: schemas.ImageIn):
    pixels = _decode(body.image_b64)
    return schemas.VectorResponse(vector=_stubs()["embedder"].embed_text(pixel_signature(pixels)).tolist())


@app.post("/providers/caption", response_model=schemas.TextResponse)
def stub_caption(body: schemas.ImageIn):
    return schemas.TextResponse(text=pixel_signature(_decode(body.image_b64)))


@app.post("/providers/generate", response_model=schemas.ImageGenResponse)
def stub_generate(body: schemas.ImageGenRequest):
    # stateless: renders one image; consistency flags are echoed, not applied
    request = GenerationRequest(
        poem_id="remote",
        prompts=(("remote#0", body.prompt),),
        consistency=False,
        seed=body.seed,
        size=(body.width, body.height),
    )
    art = _stubs()["backend"].generate(request)[0]
    meta = {"stub": True, "consistent": body.consistent, "reference_ids": body.reference_ids}
    return schemas.ImageGenResponse(image_b64=png_b64(art.pixels), meta=meta)
