"""Request and response models for the HTTP API."""
from typing import Any, Dict, List, Optional

from pydantic import BaseModel


class CorpusInput(BaseModel):
    """A corpus given inline (``corpus_text``) or as a server-side path."""

    corpus_text: Optional[str] = None
    corpus_path: Optional[str] = None


class ParseErrorOut(BaseModel):
    line: int
    message: str


class StatsResponse(BaseModel):
    document: Dict[str, Any]
    parse_errors: List[ParseErrorOut] = []
    reference_differences: Dict[str, Any] = {}


class ValidateResponse(BaseModel):
    document: Dict[str, Any]
    parse_errors: List[ParseErrorOut] = []
    passed: bool


class SegmentRequest(CorpusInput):
    poem_id: str
    policy: Dict[str, Any] = {}
    providers: Dict[str, Dict[str, Any]] = {}


class RefineRequest(CorpusInput):
    poem_id: str
    segment: Optional[int] = None
    config: Dict[str, Any] = {}


class RefineResponse(BaseModel):
    poem_id: str
    template_hashes: Dict[str, str]
    traces: List[Dict[str, Any]]


class PromptIn(BaseModel):
    segment_id: str
    text: str


class GenerateRequest(BaseModel):
    poem_id: str = "poem"
    prompts: List[PromptIn]
    consistency: bool = True
    seed: int = 0
    width: int = 64
    height: int = 64
    style_directives: str = ""
    backend: Dict[str, Any] = {"kind": "toy"}
    output_dir: Optional[str] = None


class ArtifactOut(BaseModel):
    segment_id: str
    image_b64: Optional[str] = None
    description: str = ""
    meta: Dict[str, Any] = {}
    error: Optional[str] = None


class GenerateResponse(BaseModel):
    poem_id: str
    artifacts: List[ArtifactOut]
    sequence_path: Optional[str] = None


class EvaluateRequest(CorpusInput):
    poem_id: str
    sequence_dir: str
    approach: str = "poemtale"
    model: Optional[str] = None
    providers: Dict[str, Dict[str, Any]] = {}


class ReportRequest(BaseModel):
    runs: List[Dict[str, Any]] = []
    reference: bool = False


class ReportResponse(BaseModel):
    document: Dict[str, Any]
    text: str


class RunRequest(BaseModel):
    config: Dict[str, Any]
    base_dir: Optional[str] = None
    approach: Optional[str] = None
    seed: Optional[int] = None
    output_dir: Optional[str] = None


class RunResponse(BaseModel):
    exit_code: int
    output_dir: str
    manifest: Dict[str, Any]


# -- built-in stub providers, same wire format as the remote ones ---------

class AnnotateRequest(BaseModel):
    lines: List[str]


class AnnotateResponse(BaseModel):
    entities: List[List[Dict[str, str]]]
    emotions: List[Dict[str, Any]]


class ChatMessage(BaseModel):
    role: str
    content: str


class ChatRequest(BaseModel):
    model: str = "stub"
    messages: List[ChatMessage]
    temperature: float = 0.0
    seed: Optional[int] = None


class TextResponse(BaseModel):
    text: str


class EmbedTextRequest(BaseModel):
    text: str


class ImageIn(BaseModel):
    image_b64: str


class VectorResponse(BaseModel):
    vector: List[float]


class ImageGenRequest(BaseModel):
    prompt: str
    seed: int = 0
    width: int = 64
    height: int = 64
    consistent: bool = False
    reference_ids: List[str] = []


class ImageGenResponse(BaseModel):
    image_b64: str
    meta: Dict[str, Any] = {}
