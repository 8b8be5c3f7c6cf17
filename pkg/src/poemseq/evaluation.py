"""Alignment and consistency metrics, per-poem score records and the
approach-by-model report table."""
from __future__ import annotations

import itertools
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from importlib import resources
from statistics import fmean
from typing import Iterable, Sequence

from poemseq.corpus import EmotionLabel
from poemseq.embedding import Captioner, ImageEmbedder, TextEmbedder, cosine
from poemseq.errors import ConfigurationError
from poemseq.generation import ImageArtifact

REPORT_SCHEMA = "poemseq.report/v1"
APPROACHES = ("poemtale", "segments_only", "single_image")
APPROACH_TITLES = {
    "poemtale": "Segmented + refined + consistent",
    "segments_only": "Segments only",
    "single_image": "Single image per poem",
}
EMOTION_PROMPT_TEMPLATE = "a scene expressing {emotion}"
EMOTION_PROMPT_VERSION = "emotion-prompt/v1"
NOT_APPLICABLE = "/"


def _usable(image: ImageArtifact) -> ImageArtifact:
    if image.error:
        raise ValueError(f"image {image.segment_id} failed to generate: {image.error}")
    return image


def blip_alignment(image: ImageArtifact, instruction: str, captioner: Captioner, embedder: TextEmbedder) -> float:
    """Caption the image and compare the caption with the instruction prompt."""
    if not instruction.strip():
        raise ValueError("instruction is empty")
    caption = captioner.caption(_usable(image))
    return cosine(embedder.embed_text(caption), embedder.embed_text(instruction))


def _require_joint(embedder) -> None:
    if not getattr(embedder, "joint_space", False) or not hasattr(embedder, "embed_image"):
        raise ConfigurationError(f"{type(embedder).__name__} does not embed text and images jointly")


def longclip_alignment(poem_text: str, image: ImageArtifact, embedder: ImageEmbedder) -> float:
    if not poem_text.strip():
        raise ValueError("poem text is empty")
    _require_joint(embedder)
    return cosine(embedder.embed_text(poem_text), embedder.embed_image(_usable(image)))


def emotion_prompt(emotion: EmotionLabel) -> str:
    return EMOTION_PROMPT_TEMPLATE.format(emotion=EmotionLabel.parse(emotion).value)


def emotion_alignment(image: ImageArtifact, gold_emotion: EmotionLabel, embedder: ImageEmbedder) -> float:
    _require_joint(embedder)
    return cosine(embedder.embed_image(_usable(image)), embedder.embed_text(emotion_prompt(gold_emotion)))


def character_consistency(images: Sequence[ImageArtifact], embedder: ImageEmbedder) -> float | None:
    """Mean pairwise cosine of image embeddings; ``None`` for fewer than two."""
    if len(images) < 2:
        return None
    vectors = [embedder.embed_image(_usable(img)) for img in images]
    return fmean(cosine(a, b) for a, b in itertools.combinations(vectors, 2))


@dataclass(frozen=True)
class MetricReport:
    poem_id: str
    approach: str
    model: str
    blip_score: float
    longclip_score: float
    emotion_score: float
    consistency_score: float | None = None
    schema: str = REPORT_SCHEMA

    def __post_init__(self):
        if self.approach not in APPROACHES:
            raise ValueError(f"unknown approach {self.approach!r}")
        for name in ("blip_score", "longclip_score", "emotion_score", "consistency_score"):
            value = getattr(self, name)
            if value is not None and not -1.0 - 1e-9 <= value <= 1.0 + 1e-9:
                raise ValueError(f"{name}={value} outside [-1, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


def score_sequence(
    *,
    poem_id: str,
    approach: str,
    model: str,
    poem_text: str,
    images: Sequence[ImageArtifact],
    instructions: Sequence[str],
    gold_emotions: Sequence[EmotionLabel],
    captioner: Captioner,
    embedder,
) -> MetricReport:
    """Per-poem record: alignment metrics averaged over the images."""
    if not images:
        raise ValueError("no images to score")
    if not len(images) == len(instructions) == len(gold_emotions):
        raise ValueError("images, instructions and emotions must align")
    return MetricReport(
        poem_id=poem_id,
        approach=approach,
        model=model,
        blip_score=fmean(blip_alignment(i, t, captioner, embedder) for i, t in zip(images, instructions)),
        longclip_score=fmean(longclip_alignment(poem_text, i, embedder) for i in images),
        emotion_score=fmean(emotion_alignment(i, e, embedder) for i, e in zip(images, gold_emotions)),
        consistency_score=character_consistency(images, embedder),
    )


@dataclass(frozen=True)
class ReportRow:
    approach: str
    model: str
    runs: int
    blip_score: float
    longclip_score: float
    emotion_score: float
    consistency_score: float | None
    poem_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["poem_ids"] = list(self.poem_ids)
        return d


def aggregate_report(runs: Iterable[MetricReport]) -> list[ReportRow]:
    """Average runs per (approach, model).

    Rows are ordered by approach (fixed order) and then by the first
    appearance of each model. Consistency is averaged over the runs that
    have it and stays ``None`` when none do.
    """
    runs = list(runs)
    if not runs:
        raise ValueError("no runs to aggregate")
    schemas = {r.schema for r in runs}
    if len(schemas) > 1:
        raise ValueError(f"mixed report schema versions: {sorted(schemas)}")
    groups: OrderedDict[tuple[str, str], list[MetricReport]] = OrderedDict()
    for r in runs:
        groups.setdefault((r.approach, r.model), []).append(r)
    keys = sorted(groups, key=lambda k: APPROACHES.index(k[0]))  # stable: keeps model order
    rows = []
    for approach, model in keys:
        members = groups[(approach, model)]
        consistency = [m.consistency_score for m in members if m.consistency_score is not None]
        rows.append(ReportRow(
            approach=approach,
            model=model,
            runs=len(members),
            blip_score=fmean(m.blip_score for m in members),
            longclip_score=fmean(m.longclip_score for m in members),
            emotion_score=fmean(m.emotion_score for m in members),
            consistency_score=fmean(consistency) if consistency else None,
            poem_ids=tuple(m.poem_id for m in members),
        ))
    return rows


def report_document(rows: Sequence[ReportRow]) -> dict:
    return {"schema": REPORT_SCHEMA, "rows": [r.to_dict() for r in rows]}


def format_score(value: float | None) -> str:
    return NOT_APPLICABLE if value is None else f"{value:.4f}"


COLUMNS = ("BLIP", "Long-CLIP", "Emotion CLIP", "Consistency CLIP")


def render_table(rows: Sequence[ReportRow]) -> str:
    """Plain-text table: one block per approach, one line per model."""
    body = []
    for approach in APPROACHES:
        block = [r for r in rows if r.approach == approach]
        for k, r in enumerate(block):
            label = APPROACH_TITLES[approach] if k == 0 else ""
            body.append((label, r.model, *(format_score(v) for v in (
                r.blip_score, r.longclip_score, r.emotion_score, r.consistency_score))))
        if block:
            body.append(None)
    header = ("Approach", "Model", *COLUMNS)
    table = [header] + [line for line in body if line is not None]
    widths = [max(len(line[c]) for line in table) for c in range(len(header))]

    def fmt(line):
        left = [line[0].ljust(widths[0]), line[1].ljust(widths[1])]
        return "  ".join(left + [v.rjust(w) for v, w in zip(line[2:], widths[2:])]).rstrip()

    rule = "-" * len(fmt(header))
    out = [rule, fmt(header), rule]
    for line in body:
        out.append(rule if line is None else fmt(line))
    return "\n".join(out) + "\n"


def load_reference_table() -> list[MetricReport]:
    """Published scores for three text-to-image models under each approach
    (fixture data for report formatting; not recomputed here)."""
    data = json.loads(resources.files("poemseq.data").joinpath("reference_scores.json").read_text("utf-8"))
    return [MetricReport.from_dict(d) for d in data["rows"]]


@dataclass(frozen=True)
class HumanRating:
    approach: str
    criterion: str
    average: float


def load_reference_human_ratings() -> list[HumanRating]:
    data = json.loads(resources.files("poemseq.data").joinpath("reference_scores.json").read_text("utf-8"))
    return [HumanRating(**d) for d in data["human_ratings"]]


def render_human_ratings(ratings: Sequence[HumanRating]) -> str:
    width = max(len(APPROACH_TITLES[r.approach]) for r in ratings)
    crit = max(len(r.criterion) for r in ratings)
    lines = [f"{'Approach'.ljust(width)}  {'Criterion'.ljust(crit)}  Average (1-5)"]
    for r in ratings:
        lines.append(f"{APPROACH_TITLES[r.approach].ljust(width)}  {r.criterion.ljust(crit)}  {r.average:.1f}")
    return "\n".join(lines) + "\n"
