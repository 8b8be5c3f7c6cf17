"""Poem corpus ingestion, cleaning, validation and summary statistics.

The wire format is JSON-lines, one poem per line::

    {"id": "...", "title": "...", "poet": "...", "theme": "...",
     "protagonist": "...", "lines": ["..."],
     "gold_segments": [{"start": 0, "end": 4, "emotion": "joy"}]}

``id``, ``protagonist`` and ``gold_segments`` are optional.
"""
from __future__ import annotations

import hashlib
import io
import json
import re
import unicodedata
from dataclasses import dataclass
from enum import Enum
from statistics import fmean
from typing import IO, Iterable, Sequence, Union

STATS_SCHEMA = "poemseq.corpus-stats/v1"
VALIDATION_SCHEMA = "poemseq.validation/v1"


class EmotionLabel(str, Enum):
    ANGER = "anger"
    DISGUST = "disgust"
    FEAR = "fear"
    JOY = "joy"
    NEUTRAL = "neutral"
    SADNESS = "sadness"
    SURPRISE = "surprise"

    @classmethod
    def parse(cls, value: str) -> "EmotionLabel":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown emotion label: {value!r}") from None


@dataclass(frozen=True)
class GoldSegment:
    start: int
    end: int
    emotion: EmotionLabel


@dataclass(frozen=True)
class Poem:
    id: str
    title: str
    poet: str
    theme: str
    lines: tuple[str, ...]
    protagonist: str = ""
    gold_segments: tuple[GoldSegment, ...] | None = None
    # indices of lines that open a new stanza (blank lines in the source)
    stanza_breaks: tuple[int, ...] = ()

    @property
    def text(self) -> str:
        return "\n".join(self.lines)

    @property
    def word_count(self) -> int:
        return sum(len(line.split()) for line in self.lines)

    def lines_text(self, start: int, end: int) -> str:
        return "\n".join(self.lines[start:end])


@dataclass(frozen=True)
class CorpusStats:
    poem_count: int
    max_words: int
    min_words: int
    mean_words: float
    theme_count: int
    distinct_poets: int

    def to_document(self) -> dict:
        return {"schema": STATS_SCHEMA, **self.__dict__}


@dataclass(frozen=True)
class Issue:
    code: str
    message: str
    location: str = ""
    severity: str = "error"  # "error" | "warning"


@dataclass(frozen=True)
class ValidationReport:
    poem_id: str
    issues: tuple[Issue, ...] = ()

    @property
    def passed(self) -> bool:
        return not any(i.severity == "error" for i in self.issues)

    def to_document(self) -> dict:
        return {
            "schema": VALIDATION_SCHEMA,
            "poem_id": self.poem_id,
            "passed": self.passed,
            "issues": [i.__dict__ for i in self.issues],
        }


@dataclass(frozen=True)
class ParseError:
    line_number: int
    message: str


# Statistics reported for the full 1111-poem annotated corpus. Useful as a
# sanity check when the real corpus file is supplied; not enforced anywhere.
REFERENCE_STATS = CorpusStats(
    poem_count=1111,
    max_words=460,
    min_words=16,
    mean_words=180.0,
    theme_count=6,
    distinct_poets=798,
)


_TAG_RE = re.compile(r"</?[A-Za-z!][^<>]*>")


def _strip_controls(raw: str) -> str:
    return "".join(
        ch
        for ch in raw
        if ch.isspace() or unicodedata.category(ch) not in ("Cc", "Cf")
    )


def _strip_tags(raw: str) -> str:
    # loop to a fixed point so "<<b>i>" cannot leave a tag behind
    while True:
        stripped = _TAG_RE.sub(" ", raw)
        if stripped == raw:
            return raw
        raw = stripped


def normalize_text(raw: str, preserve_lines: bool = False) -> str:
    """Strip HTML tags and control characters and collapse whitespace.

    With ``preserve_lines`` the line structure survives: every line is
    collapsed on its own, runs of blank lines shrink to one empty line and
    leading/trailing blank lines are dropped.
    """
    text = _strip_tags(_strip_controls(raw))
    if not preserve_lines:
        return " ".join(text.split())
    out: list[str] = []
    for line in text.splitlines():
        line = " ".join(line.split())
        if line or (out and out[-1]):
            out.append(line)
    while out and not out[-1]:
        out.pop()
    return "\n".join(out)


def split_stanzas(raw_lines: Iterable[str]) -> tuple[list[str], list[int]]:
    """Normalize raw lines, turning blank lines into stanza-break markers.

    Returns the non-empty lines and the indices (into those lines) where a
    new stanza starts after a blank line.
    """
    lines: list[str] = []
    breaks: list[int] = []
    pending_break = False
    for raw in raw_lines:
        # one entry is one line, even if it carries stray line breaks
        piece = normalize_text(raw)
        if not piece:
            pending_break = True
            continue
        if pending_break and lines:
            breaks.append(len(lines))
        pending_break = False
        lines.append(piece)
    return lines, breaks


def stable_poem_id(title: str, poet: str) -> str:
    digest = hashlib.sha256(f"{title}\x1f{poet}".encode("utf-8")).hexdigest()
    return f"p-{digest[:12]}"


def poem_from_record(record: dict) -> Poem:
    if not isinstance(record, dict):
        raise ValueError("record is not a JSON object")
    for key in ("title", "poet", "lines"):
        if key not in record:
            raise ValueError(f"missing field {key!r}")
    raw_lines = record["lines"]
    if not isinstance(raw_lines, list) or not all(isinstance(x, str) for x in raw_lines):
        raise ValueError("'lines' must be a list of strings")
    lines, breaks = split_stanzas(raw_lines)
    if not lines:
        raise ValueError("poem has no non-empty lines")
    title = normalize_text(str(record["title"]))
    poet = normalize_text(str(record["poet"]))
    gold = record.get("gold_segments")
    segments = None
    if gold is not None:
        segments = tuple(
            GoldSegment(int(g["start"]), int(g["end"]), EmotionLabel.parse(g["emotion"]))
            for g in gold
        )
        _check_segments(segments, len(lines))
    return Poem(
        id=str(record.get("id") or stable_poem_id(title, poet)),
        title=title,
        poet=poet,
        theme=normalize_text(str(record.get("theme", ""))),
        protagonist=normalize_text(str(record.get("protagonist") or "")),
        lines=tuple(lines),
        gold_segments=segments,
        stanza_breaks=tuple(breaks),
    )


def _segment_problems(segments: Sequence[GoldSegment], n_lines: int) -> list[Issue]:
    issues = []
    cursor = 0
    for k, seg in enumerate(segments):
        loc = f"gold_segments[{k}]"
        if seg.end <= seg.start:
            issues.append(Issue("segment_empty", f"empty range [{seg.start},{seg.end})", loc))
            continue
        if seg.start > cursor:
            issues.append(Issue("segment_gap", f"lines [{cursor},{seg.start}) not covered", loc))
        elif seg.start < cursor:
            issues.append(Issue("segment_overlap", f"range starts at {seg.start}, before {cursor}", loc))
        cursor = max(cursor, seg.end)
    if cursor < n_lines:
        issues.append(Issue("segment_gap", f"lines [{cursor},{n_lines}) not covered", "gold_segments"))
    elif cursor > n_lines:
        issues.append(Issue("segment_overflow", f"segments end at {cursor} > {n_lines} lines", "gold_segments"))
    return issues


def _check_segments(segments: Sequence[GoldSegment], n_lines: int) -> None:
    problems = _segment_problems(segments, n_lines)
    if problems:
        raise ValueError("; ".join(p.message for p in problems))


def parse_corpus(
    stream: Union[IO[bytes], IO[str], bytes, str],
    errors: list[ParseError] | None = None,
) -> list[Poem]:
    """Parse a JSON-lines corpus.

    Bad records are skipped and described in ``errors`` (when given); the
    remaining poems keep their input order. Duplicate ids and duplicate
    (title, poet) pairs count as bad records.
    """
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8")
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    sink = errors if errors is not None else []
    poems: list[Poem] = []
    seen_ids: set[str] = set()
    seen_keys: set[tuple[str, str]] = set()
    for number, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        if not raw.strip():
            continue
        try:
            poem = poem_from_record(json.loads(raw))
        except (ValueError, KeyError, TypeError) as exc:
            sink.append(ParseError(number, str(exc)))
            continue
        if poem.id in seen_ids:
            sink.append(ParseError(number, f"duplicate id {poem.id!r}"))
            continue
        key = (poem.title.lower(), poem.poet.lower())
        if key in seen_keys:
            sink.append(ParseError(number, f"duplicate record {poem.title!r} by {poem.poet!r}"))
            continue
        seen_ids.add(poem.id)
        seen_keys.add(key)
        poems.append(poem)
    return poems


def load_corpus(path, errors: list[ParseError] | None = None) -> list[Poem]:
    with open(path, "rb") as fh:
        return parse_corpus(fh, errors)


def poem_to_record(poem: Poem) -> dict:
    record = {
        "id": poem.id,
        "title": poem.title,
        "poet": poem.poet,
        "theme": poem.theme,
        "protagonist": poem.protagonist,
        "lines": _lines_with_breaks(poem),
    }
    if poem.gold_segments is not None:
        record["gold_segments"] = [
            {"start": g.start, "end": g.end, "emotion": g.emotion.value}
            for g in poem.gold_segments
        ]
    return record


def _lines_with_breaks(poem: Poem) -> list[str]:
    out: list[str] = []
    breaks = set(poem.stanza_breaks)
    for i, line in enumerate(poem.lines):
        if i in breaks:
            out.append("")
        out.append(line)
    return out


def serialize_corpus(poems: Iterable[Poem]) -> str:
    return "".join(
        json.dumps(poem_to_record(p), ensure_ascii=False) + "\n" for p in poems
    )


def validate_poem(poem: Poem) -> ValidationReport:
    issues: list[Issue] = []
    if not poem.title.strip():
        issues.append(Issue("empty_title", "title is empty", "title"))
    if not poem.poet.strip():
        issues.append(Issue("empty_poet", "poet is empty", "poet"))
    if not poem.lines:
        issues.append(Issue("no_lines", "poem has no lines", "lines"))
    for i, line in enumerate(poem.lines):
        loc = f"lines[{i}]"
        if not line.strip():
            issues.append(Issue("empty_line", "line is empty", loc))
        if _TAG_RE.search(line):
            issues.append(Issue("residual_html", f"HTML tag in {line!r}", loc))
        if normalize_text(line) != line and not _TAG_RE.search(line):
            issues.append(Issue("unnormalized_text", "stray whitespace or control characters", loc))
        if i and line == poem.lines[i - 1]:
            issues.append(Issue("duplicate_line", "repeats the previous line", loc, "warning"))
    for name in ("title", "poet"):
        if _TAG_RE.search(getattr(poem, name)):
            issues.append(Issue("residual_html", f"HTML tag in {name}", name))
    if poem.gold_segments is not None:
        for k, seg in enumerate(poem.gold_segments):
            if not isinstance(seg.emotion, EmotionLabel):
                try:
                    EmotionLabel.parse(seg.emotion)
                except ValueError:
                    issues.append(Issue("unknown_emotion", f"emotion {seg.emotion!r}", f"gold_segments[{k}]"))
        issues.extend(_segment_problems(poem.gold_segments, len(poem.lines)))
    return ValidationReport(poem.id, tuple(issues))


def corpus_stats(poems: Sequence[Poem]) -> CorpusStats:
    """Word counts cover the poem body only; titles are not counted."""
    if not poems:
        raise ValueError("corpus statistics are undefined for an empty corpus")
    counts = [p.word_count for p in poems]
    return CorpusStats(
        poem_count=len(poems),
        max_words=max(counts),
        min_words=min(counts),
        mean_words=fmean(counts),
        theme_count=len({normalize_text(p.theme).lower() for p in poems}),
        distinct_poets=len({normalize_text(p.poet) for p in poems}),
    )


def compare_to_reference(stats: CorpusStats, reference: CorpusStats = REFERENCE_STATS) -> dict:
    """Field-by-field differences from the published corpus statistics.

    The published mean is rounded to a whole word, so means within 0.5 of
    it count as matching.
    """
    diffs = {}
    for name in reference.__dataclass_fields__:
        ours, theirs = getattr(stats, name), getattr(reference, name)
        tol = 0.5 if name == "mean_words" else 0
        if abs(ours - theirs) > tol:
            diffs[name] = {"observed": ours, "expected": theirs}
    return diffs
