"""Entity-plus-emotion segmentation of poems.

Every line is tagged with named entities and an emotion label; a new segment
starts wherever either signal shifts between consecutive lines. Short
segments are folded into their left neighbour afterwards.
"""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Iterable, Mapping, Protocol, Sequence

from poemseq.corpus import EmotionLabel, Poem
from poemseq.errors import ProviderError

logger = logging.getLogger(__name__)


class EntityLabel(str, Enum):
    PERSON = "PERSON"
    LOCATION = "LOCATION"
    ORGANIZATION = "ORGANIZATION"
    OTHER = "OTHER"


@dataclass(frozen=True)
class Entity:
    surface: str
    label: EntityLabel


@dataclass(frozen=True)
class LineAnnotation:
    line_index: int
    entities: frozenset[Entity]
    emotion: EmotionLabel
    emotion_confidence: float = 1.0

    @property
    def categories(self) -> frozenset[EntityLabel]:
        return frozenset(e.label for e in self.entities)


@dataclass(frozen=True)
class Segment:
    poem_id: str
    index: int
    start: int
    end: int
    dominant_emotion: EmotionLabel
    entities: frozenset[Entity] = frozenset()

    @property
    def id(self) -> str:
        return f"{self.poem_id}#{self.index}"

    @property
    def line_range(self) -> tuple[int, int]:
        return (self.start, self.end)

    def text(self, poem: Poem) -> str:
        return poem.lines_text(self.start, self.end)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "poem_id": self.poem_id,
            "index": self.index,
            "line_range": [self.start, self.end],
            "dominant_emotion": self.dominant_emotion.value,
            "entities": sorted(
                ({"surface": e.surface, "label": e.label.value} for e in self.entities),
                key=lambda d: (d["label"], d["surface"]),
            ),
        }


ENTITY_RULES = ("set-inequality", "new-entity-introduced")
EMOTION_RULES = ("label-change",)


@dataclass(frozen=True)
class BoundaryPolicy:
    entity_shift_rule: str = "set-inequality"
    emotion_shift_rule: str = "label-change"
    min_segment_lines: int = 2
    confidence_floor: float = 0.0

    def __post_init__(self):
        if self.entity_shift_rule not in ENTITY_RULES:
            raise ValueError(f"unknown entity_shift_rule {self.entity_shift_rule!r}")
        if self.emotion_shift_rule not in EMOTION_RULES:
            raise ValueError(f"unknown emotion_shift_rule {self.emotion_shift_rule!r}")
        if self.min_segment_lines < 1:
            raise ValueError("min_segment_lines must be >= 1")
        if not 0.0 <= self.confidence_floor <= 1.0:
            raise ValueError("confidence_floor must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data: Mapping) -> "BoundaryPolicy":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


class EntityTagger(Protocol):
    def tag(self, line: str) -> frozenset[Entity]: ...


class EmotionClassifier(Protocol):
    def classify(self, line: str) -> tuple[EmotionLabel, float]: ...


_WORD_RE = re.compile(r"[a-z']+")


class GazetteerTagger:
    """Case-insensitive whole-word lookup of known names.

    The reported surface form is the text as it appears in the line.
    """

    def __init__(self, entries: Mapping[str, EntityLabel | str]):
        self.entries = {k: EntityLabel(v) for k, v in entries.items()}
        # longest names first so "New York" wins over "York"
        names = sorted(self.entries, key=len, reverse=True)
        self._lookup = {n.lower(): self.entries[n] for n in names}
        self._pattern = (
            re.compile(r"\b(" + "|".join(re.escape(n) for n in names) + r")\b", re.IGNORECASE)
            if names
            else None
        )
        self.calls = 0

    def tag(self, line: str) -> frozenset[Entity]:
        self.calls += 1
        if self._pattern is None:
            return frozenset()
        return frozenset(
            Entity(m.group(0), self._lookup[m.group(0).lower()])
            for m in self._pattern.finditer(line)
        )

    def descriptor(self) -> dict:
        return {"kind": "gazetteer", "entries": {k: v.value for k, v in sorted(self.entries.items())}}

    @classmethod
    def default(cls) -> "GazetteerTagger":
        data = json.loads(resources.files("poemseq.data").joinpath("gazetteer.json").read_text("utf-8"))
        return cls(data)


class LexiconEmotionClassifier:
    """Keyword-count emotion classifier.

    The label is the emotion with the most keyword hits in the line; ties go
    to the emotion whose first hit comes earliest in the line. Confidence is
    that emotion's share of all hits. A line without hits is ``neutral``
    with confidence 1.
    """

    def __init__(self, lexicon: Mapping[EmotionLabel | str, Iterable[str]]):
        self.lexicon = {EmotionLabel.parse(k): frozenset(w.lower() for w in v) for k, v in lexicon.items()}
        self._index: dict[str, EmotionLabel] = {}
        for label, words in self.lexicon.items():
            for w in words:
                if w in self._index and self._index[w] != label:
                    raise ValueError(f"keyword {w!r} listed under two emotions")
                self._index[w] = label
        self.calls = 0

    def classify(self, line: str) -> tuple[EmotionLabel, float]:
        self.calls += 1
        hits = [self._index[w] for w in _WORD_RE.findall(line.lower()) if w in self._index]
        if not hits:
            return EmotionLabel.NEUTRAL, 1.0
        counts = Counter(hits)
        top = max(counts.values())
        label = next(h for h in hits if counts[h] == top)
        return label, top / len(hits)

    def descriptor(self) -> dict:
        return {
            "kind": "lexicon",
            "lexicon": {k.value: sorted(v) for k, v in sorted(self.lexicon.items())},
        }

    @classmethod
    def default(cls) -> "LexiconEmotionClassifier":
        data = json.loads(resources.files("poemseq.data").joinpath("emotion_lexicon.json").read_text("utf-8"))
        return cls(data)


class ConstantClassifier:
    def __init__(self, label: EmotionLabel = EmotionLabel.NEUTRAL, confidence: float = 1.0):
        self.label = label
        self.confidence = confidence
        self.calls = 0

    def classify(self, line: str) -> tuple[EmotionLabel, float]:
        self.calls += 1
        return self.label, self.confidence

    def descriptor(self) -> dict:
        return {"kind": "constant", "label": self.label.value, "confidence": self.confidence}


def _with_retries(fn, line_index: int, retries: int):
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            return fn()
        except ProviderError as exc:
            last = exc
            if not exc.retryable:
                break
            logger.warning("annotation of line %d failed (attempt %d): %s", line_index, attempt + 1, exc)
    raise ProviderError(f"annotation failed for line {line_index}: {last}", retryable=False, line_index=line_index)


def annotate_lines(
    poem: Poem,
    tagger: EntityTagger,
    classifier: EmotionClassifier,
    *,
    confidence_floor: float = 0.0,
    retries: int = 2,
    max_workers: int = 1,
) -> list[LineAnnotation]:
    """Tag every line of ``poem``; returns one annotation per line, in order.

    Emotions whose confidence falls below ``confidence_floor`` become
    ``neutral``. Provider errors are retried ``retries`` times and then
    re-raised as a non-retryable :class:`ProviderError` naming the line.
    """
    if not poem.lines:
        raise ValueError("poem has no lines")

    def one(i: int) -> LineAnnotation:
        line = poem.lines[i]
        entities = _with_retries(lambda: frozenset(tagger.tag(line)), i, retries)
        label, conf = _with_retries(lambda: classifier.classify(line), i, retries)
        label = EmotionLabel.parse(label) if not isinstance(label, EmotionLabel) else label
        if conf < confidence_floor:
            label = EmotionLabel.NEUTRAL
        return LineAnnotation(i, entities, label, float(conf))

    indices = range(len(poem.lines))
    if max_workers <= 1:
        return [one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(one, indices))


def _entity_shift(prev: LineAnnotation, cur: LineAnnotation, rule: str) -> bool:
    if rule == "set-inequality":
        return prev.categories != cur.categories
    # new-entity-introduced: some surface form (case-folded) on this line
    # did not appear on the previous one
    before = {e.surface.lower() for e in prev.entities}
    return any(e.surface.lower() not in before for e in cur.entities)


def is_shift(prev: LineAnnotation, cur: LineAnnotation, policy: BoundaryPolicy) -> bool:
    return prev.emotion != cur.emotion or _entity_shift(prev, cur, policy.entity_shift_rule)


def raw_boundaries(annotations: Sequence[LineAnnotation], policy: BoundaryPolicy) -> list[int]:
    return [
        i
        for i in range(1, len(annotations))
        if is_shift(annotations[i - 1], annotations[i], policy)
    ]


def suppress_short(candidates: Sequence[int], n_lines: int, min_lines: int) -> list[int]:
    """Greedy left-to-right removal of boundaries that make short segments.

    A boundary is kept only if the segment it closes has at least
    ``min_lines`` lines; a short final segment is merged into its left
    neighbour by dropping the last kept boundary.
    """
    kept: list[int] = []
    start = 0
    for b in candidates:
        if b - start >= min_lines:
            kept.append(b)
            start = b
    if kept and n_lines - start < min_lines:
        kept.pop()
    return kept


def detect_boundaries(annotations: Sequence[LineAnnotation], policy: BoundaryPolicy) -> list[int]:
    if not annotations:
        raise ValueError("annotations must be non-empty")
    return suppress_short(raw_boundaries(annotations, policy), len(annotations), policy.min_segment_lines)


def dominant_emotion(annotations: Sequence[LineAnnotation]) -> EmotionLabel:
    """Modal emotion; ties by summed confidence, then by earliest line."""
    counts: Counter = Counter()
    conf: Counter = Counter()
    first: dict[EmotionLabel, int] = {}
    for k, a in enumerate(annotations):
        counts[a.emotion] += 1
        conf[a.emotion] += a.emotion_confidence
        first.setdefault(a.emotion, k)
    return max(counts, key=lambda e: (counts[e], conf[e], -first[e]))


def segments_from_boundaries(
    poem_id: str,
    annotations: Sequence[LineAnnotation],
    boundaries: Sequence[int],
) -> list[Segment]:
    edges = [0, *boundaries, len(annotations)]
    segments = []
    for index, (start, end) in enumerate(zip(edges, edges[1:])):
        members = annotations[start:end]
        segments.append(
            Segment(
                poem_id=poem_id,
                index=index,
                start=start,
                end=end,
                dominant_emotion=dominant_emotion(members),
                entities=frozenset().union(*(a.entities for a in members)),
            )
        )
    return segments


def segment_poem(
    poem: Poem,
    annotations: Sequence[LineAnnotation],
    policy: BoundaryPolicy = BoundaryPolicy(),
) -> list[Segment]:
    if len(annotations) != len(poem.lines):
        raise ValueError(f"{len(annotations)} annotations for {len(poem.lines)} lines")
    return segments_from_boundaries(poem.id, annotations, detect_boundaries(annotations, policy))


def gold_boundaries(poem: Poem) -> list[int] | None:
    if poem.gold_segments is None:
        return None
    return [g.start for g in poem.gold_segments[1:]]


@dataclass(frozen=True)
class BoundaryAgreement:
    precision: float
    recall: float
    f1: float
    exact: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def boundary_agreement(gold: Sequence[int], predicted: Sequence[int]) -> BoundaryAgreement:
    """Exact-position agreement between two boundary lists.

    Two empty lists agree perfectly.
    """
    g, p = set(gold), set(predicted)
    hits = len(g & p)
    precision = hits / len(p) if p else float(not g)
    recall = hits / len(g) if g else float(not p)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return BoundaryAgreement(precision, recall, f1, g == p)


def gold_emotion_for(poem: Poem, start: int, end: int) -> EmotionLabel | None:
    """Emotion of the gold segment overlapping [start, end) the most."""
    if not poem.gold_segments:
        return None
    best, best_overlap = None, 0
    for g in poem.gold_segments:
        overlap = min(end, g.end) - max(start, g.start)
        if overlap > best_overlap:
            best, best_overlap = g.emotion, overlap
    return best
