"""Multi-stage refinement of per-segment image descriptions.

Stage 1 asks the generator for a scene description of a segment; every later
stage feeds the poem and the previous description back and asks for a
deeper version. Each draft is scored by text-text cosine against the
segment (or the whole poem) and the loop stops once the score saturates.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from poemseq.cache import ResponseCache, cache_key
from poemseq.corpus import normalize_text
from poemseq.embedding import TextEmbedder, cosine
from poemseq.errors import ProviderError

logger = logging.getLogger(__name__)

TERMINATIONS = ("plateau", "max_iterations", "generator_failure")


class DescriptionGenerator(Protocol):
    def generate(self, prompt: str) -> str: ...


def _last_line(prompt: str) -> str:
    lines = [ln for ln in prompt.splitlines() if ln.strip()]
    return lines[-1] if lines else ""


class EchoGenerator:
    """Returns the last non-empty line of its prompt."""

    def __init__(self):
        self.calls = 0

    def generate(self, prompt: str) -> str:
        self.calls += 1
        return _last_line(prompt)

    def descriptor(self) -> dict:
        return {"kind": "echo"}


class SuffixGenerator:
    """Returns the last non-empty line of its prompt with ``suffix`` appended."""

    def __init__(self, suffix: str = "!"):
        self.suffix = suffix
        self.calls = 0

    def generate(self, prompt: str) -> str:
        self.calls += 1
        return _last_line(prompt) + self.suffix

    def descriptor(self) -> dict:
        return {"kind": "suffix", "suffix": self.suffix}


class ScriptedGenerator:
    """Replays a fixed list of replies, one per call."""

    def __init__(self, replies: Sequence[str]):
        self.replies = list(replies)
        self.calls = 0

    def generate(self, prompt: str) -> str:
        if self.calls >= len(self.replies):
            raise ProviderError("scripted generator exhausted", retryable=False)
        reply = self.replies[self.calls]
        self.calls += 1
        return reply

    def descriptor(self) -> dict:
        return {"kind": "scripted", "replies": self.replies}


_SECTION_RE = re.compile(r"^(Passage to illustrate|Current description):\s*$", re.MULTILINE)
_WORD_RE = re.compile(r"[A-Za-z']+")


def _sections(prompt: str) -> dict[str, str]:
    parts = _SECTION_RE.split(prompt)
    # parts = [preamble, header, body, header, body, ...]
    return {parts[i]: parts[i + 1].strip() for i in range(1, len(parts) - 1, 2)}


class TemplateStubGenerator:
    """Offline stand-in for an LLM that understands the bundled templates.

    Stage 1 describes the first line of the passage; each refinement appends
    up to ``words_per_stage`` passage words the description still lacks, so
    scores climb and then flatten once the passage is exhausted.
    """

    def __init__(self, words_per_stage: int = 3):
        self.words_per_stage = words_per_stage
        self.calls = 0

    def generate(self, prompt: str) -> str:
        self.calls += 1
        sections = _sections(prompt)
        passage = sections.get("Passage to illustrate") or _last_line(prompt)
        previous = sections.get("Current description")
        if previous is None:
            first = passage.splitlines()[0] if passage else ""
            return f"A painted scene: {first}"
        present = {w.lower() for w in _WORD_RE.findall(previous)}
        missing = []
        for w in _WORD_RE.findall(passage):
            if w.lower() not in present and w.lower() not in {m.lower() for m in missing}:
                missing.append(w)
        extra = missing[: self.words_per_stage]
        return previous if not extra else f"{previous.rstrip(' ,;:')}, {' '.join(extra)}"

    def descriptor(self) -> dict:
        return {"kind": "stub", "words_per_stage": self.words_per_stage}


def load_template(name_or_path: str) -> str:
    """Bundled template by name (``stage1_v1``) or a template file path."""
    path = Path(name_or_path)
    if path.suffix == ".txt" and path.exists():
        return path.read_text("utf-8")
    resource = resources.files("poemseq.data").joinpath("templates", f"{name_or_path}.txt")
    if not resource.is_file():
        raise FileNotFoundError(f"no template named {name_or_path!r}")
    return resource.read_text("utf-8")


def template_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class MsprConfig:
    plateau_epsilon: float = 0.005
    plateau_window: int = 3
    max_iterations: int = 8
    stage1_template: str = "stage1_v1"
    refine_template: str = "refine_v1"
    # "best": running best vs. best at window start; "previous": stage-to-stage deltas
    plateau_mode: str = "best"
    # "segment" or "poem": what drafts are scored against
    reference: str = "segment"
    retries: int = 2

    def __post_init__(self):
        if self.plateau_epsilon < 0:
            raise ValueError("plateau_epsilon must be >= 0")
        if self.plateau_window < 2:
            raise ValueError("plateau_window must be >= 2")
        if self.max_iterations < self.plateau_window + 1:
            raise ValueError("max_iterations must be >= plateau_window + 1")
        if self.plateau_mode not in ("best", "previous"):
            raise ValueError(f"unknown plateau_mode {self.plateau_mode!r}")
        if self.reference not in ("segment", "poem"):
            raise ValueError(f"unknown reference {self.reference!r}")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")

    @classmethod
    def from_dict(cls, data: Mapping) -> "MsprConfig":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    def templates(self) -> tuple[str, str]:
        return load_template(self.stage1_template), load_template(self.refine_template)

    def template_hashes(self) -> dict[str, str]:
        s1, rf = self.templates()
        return {"stage1": template_hash(s1), "refine": template_hash(rf)}


@dataclass(frozen=True)
class PromptDraft:
    segment_id: str
    stage: int
    text: str
    score: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RefinementTrace:
    segment_id: str
    drafts: list[PromptDraft] = field(default_factory=list)
    termination: str = "max_iterations"
    error: str | None = None

    @property
    def best(self) -> int | None:
        scored = [(d.score, -k) for k, d in enumerate(self.drafts) if d.score is not None]
        if not scored:
            return None
        return -max(scored)[1]

    @property
    def best_draft(self) -> PromptDraft | None:
        return None if self.best is None else self.drafts[self.best]

    def to_dict(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "drafts": [d.to_dict() for d in self.drafts],
            "best": self.best,
            "termination": self.termination,
            "error": self.error,
        }


class GeneratorFailure(ProviderError):
    pass


def _call_generator(generator, prompt: str, template_text: str, retries: int,
                    cache: ResponseCache | None) -> str:
    def live() -> str:
        last = None
        for attempt in range(retries + 1):
            try:
                text = normalize_text(generator.generate(prompt))
            except ProviderError as exc:
                last = exc
                logger.warning("generator call failed (attempt %d): %s", attempt + 1, exc)
                if not exc.retryable:
                    break
                continue
            if text:
                return text
            last = ProviderError("generator returned an empty description")
        raise GeneratorFailure(str(last), retryable=False)

    if cache is None:
        return live()
    key = cache_key(_descriptor(generator), template_hash(template_text), prompt)
    return cache.get_or_compute(key, live)


def _descriptor(provider) -> dict:
    describe = getattr(provider, "descriptor", None)
    return describe() if callable(describe) else {"class": type(provider).__name__}


def render(template: str, *, poem: str, segment: str, previous_description: str = "") -> str:
    return template.format(poem=poem, segment=segment, previous_description=previous_description)


def initial_description(
    segment_text: str,
    poem_context: str,
    generator: DescriptionGenerator,
    *,
    segment_id: str = "",
    template: str | None = None,
    retries: int = 2,
    cache: ResponseCache | None = None,
) -> PromptDraft:
    if not segment_text.strip():
        raise ValueError("segment text is empty")
    template = template if template is not None else load_template("stage1_v1")
    prompt = render(template, poem=poem_context, segment=segment_text)
    text = _call_generator(generator, prompt, template, retries, cache)
    return PromptDraft(segment_id, 1, text)


def refine_description(
    poem_text: str,
    previous: PromptDraft,
    generator: DescriptionGenerator,
    *,
    segment_text: str | None = None,
    template: str | None = None,
    retries: int = 2,
    cache: ResponseCache | None = None,
) -> PromptDraft:
    template = template if template is not None else load_template("refine_v1")
    prompt = render(
        template,
        poem=poem_text,
        segment=segment_text if segment_text is not None else poem_text,
        previous_description=previous.text,
    )
    text = _call_generator(generator, prompt, template, retries, cache)
    return PromptDraft(previous.segment_id, previous.stage + 1, text)


def score_alignment(reference_text: str, description: str, scorer: TextEmbedder) -> float:
    if not reference_text.strip() or not description.strip():
        raise ValueError("both texts must be non-empty")
    return cosine(scorer.embed_text(reference_text), scorer.embed_text(description))


def plateau_reached(scores: Sequence[float], epsilon: float, window: int = 3, mode: str = "best") -> bool:
    """Whether the newest score completes a plateau of ``window`` stages.

    ``best`` mode: the running best rose by less than ``epsilon`` between
    the first and the last stage of the window. ``previous`` mode: every
    stage-to-stage change inside the window is below ``epsilon``. The
    window must be preceded by at least one stage, so the earliest plateau
    is stage ``window + 1``.
    """
    k = len(scores)
    if k <= window:
        return False
    if mode == "best":
        return max(scores) - max(scores[: k - window + 1]) < epsilon
    return all(scores[j] - scores[j - 1] < epsilon for j in range(k - window + 1, k))


def replay_termination(scores: Sequence[float], cfg: MsprConfig) -> tuple[int, str]:
    """Stage and reason at which a score sequence stops the loop."""
    for k in range(1, min(len(scores), cfg.max_iterations) + 1):
        if plateau_reached(scores[:k], cfg.plateau_epsilon, cfg.plateau_window, cfg.plateau_mode):
            return k, "plateau"
        if k == cfg.max_iterations:
            return k, "max_iterations"
    raise ValueError("score sequence ends before the loop terminates")


def load_score_overrides(path) -> dict[tuple[str, int], float]:
    """Expert scores from a JSON list of ``{segment_id, stage, score}``."""
    items = json.loads(Path(path).read_text("utf-8"))
    return {(str(i["segment_id"]), int(i["stage"])): float(i["score"]) for i in items}


def run_mspr(
    segment_text: str,
    poem_text: str,
    generator: DescriptionGenerator,
    scorer: TextEmbedder,
    cfg: MsprConfig = MsprConfig(),
    *,
    segment_id: str = "",
    cache: ResponseCache | None = None,
    overrides: Mapping[tuple[str, int], float] | None = None,
) -> RefinementTrace:
    """Run the refinement loop for one segment.

    Scorer errors propagate; generator errors end the loop with
    ``generator_failure`` and the drafts produced so far.
    """
    stage1, refine = cfg.templates()
    reference = segment_text if cfg.reference == "segment" else poem_text
    trace = RefinementTrace(segment_id)
    scores: list[float] = []
    draft: PromptDraft | None = None
    for stage in range(1, cfg.max_iterations + 1):
        try:
            if draft is None:
                draft = initial_description(
                    segment_text, poem_text, generator, segment_id=segment_id,
                    template=stage1, retries=cfg.retries, cache=cache,
                )
            else:
                draft = refine_description(
                    poem_text, draft, generator, segment_text=segment_text,
                    template=refine, retries=cfg.retries, cache=cache,
                )
        except GeneratorFailure as exc:
            trace.termination = "generator_failure"
            trace.error = str(exc)
            return trace
        if overrides and (segment_id, stage) in overrides:
            score = overrides[(segment_id, stage)]
        else:
            score = score_alignment(reference, draft.text, scorer)
        draft = replace(draft, score=score)
        trace.drafts.append(draft)
        scores.append(score)
        if plateau_reached(scores, cfg.plateau_epsilon, cfg.plateau_window, cfg.plateau_mode):
            trace.termination = "plateau"
            return trace
    trace.termination = "max_iterations"
    return trace
