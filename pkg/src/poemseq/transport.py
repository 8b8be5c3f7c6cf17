"""HTTP plumbing shared by the remote providers: JSON POST with retries and
record/replay cassettes.

A cassette is a JSON array of ``{"request_hash": ..., "response_text": ...}``
entries, where the hash covers method, path and canonical JSON body.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Any

import httpx

from poemseq.cache import canonical_json
from poemseq.errors import ProviderError

logger = logging.getLogger(__name__)


def request_hash(method: str, path: str, body: bytes) -> str:
    try:
        normalized = canonical_json(json.loads(body)) if body else ""
    except ValueError:
        normalized = body.decode("utf-8", "replace")
    blob = f"{method.upper()} {path}\n{normalized}"
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Cassette:
    def __init__(self, entries: dict[str, str] | None = None, path: str | os.PathLike | None = None):
        self.entries: dict[str, str] = dict(entries or {})
        self.path = Path(path) if path else None
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path) -> "Cassette":
        path = Path(path)
        entries = {}
        if path.exists():
            for item in json.loads(path.read_text("utf-8")):
                entries[item["request_hash"]] = item["response_text"]
        return cls(entries, path)

    def save(self, path=None) -> None:
        path = Path(path or self.path)
        items = [{"request_hash": k, "response_text": v} for k, v in sorted(self.entries.items())]
        path.write_text(json.dumps(items, indent=2, ensure_ascii=False) + "\n", "utf-8")

    def record(self, key: str, text: str) -> None:
        with self._lock:
            self.entries[key] = text


class CassetteTransport(httpx.BaseTransport):
    """Replays recorded responses; in record mode forwards misses to ``inner``."""

    def __init__(self, cassette: Cassette, inner: httpx.BaseTransport | None = None, record: bool = False):
        self.cassette = cassette
        self.inner = inner
        self.record_mode = record

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        body = request.read()
        key = request_hash(request.method, request.url.path, body)
        if key in self.cassette.entries:
            return httpx.Response(200, text=self.cassette.entries[key], request=request)
        if not self.record_mode or self.inner is None:
            return httpx.Response(
                599, json={"error": f"no cassette entry for {request.url.path} ({key[:12]})"}, request=request
            )
        response = self.inner.handle_request(request)
        response.read()
        if response.status_code == 200:
            self.cassette.record(key, response.text)
        return response


def post_json(
    client: httpx.Client,
    url: str,
    payload: Any,
    *,
    retries: int = 2,
    backoff: float = 0.0,
    headers: dict | None = None,
) -> tuple[dict, int]:
    """POST ``payload`` and decode the JSON reply.

    Returns ``(body, retries_used)``. Network errors, 429 and 5xx replies
    are retried; other 4xx replies fail at once. Exhausted retries raise a
    retryable :class:`ProviderError` so callers further up may try again.
    """
    last_error = None
    last_status = None
    for attempt in range(retries + 1):
        if attempt and backoff:
            time.sleep(backoff * 2 ** (attempt - 1))
        try:
            response = client.post(url, json=payload, headers=headers)
        except httpx.TransportError as exc:
            last_error, last_status = str(exc), None
            logger.warning("POST %s failed (attempt %d): %s", url, attempt + 1, exc)
            continue
        if response.status_code == 429 or response.status_code >= 500:
            last_error, last_status = f"HTTP {response.status_code}", response.status_code
            logger.warning("POST %s returned %d (attempt %d)", url, response.status_code, attempt + 1)
            continue
        if response.status_code >= 400:
            raise ProviderError(
                f"POST {url} returned {response.status_code}: {response.text[:200]}",
                retryable=False,
                status=response.status_code,
            )
        try:
            return response.json(), attempt
        except ValueError as exc:
            raise ProviderError(f"POST {url} returned invalid JSON: {exc}", retryable=False) from exc
    raise ProviderError(f"POST {url} failed after {retries + 1} attempts: {last_error}", status=last_status)


def auth_headers(token_env: str | None) -> dict:
    token = os.environ.get(token_env) if token_env else None
    return {"Authorization": f"Bearer {token}"} if token else {}


def make_client(endpoint: str, transport: httpx.BaseTransport | None = None, timeout: float = 60.0) -> httpx.Client:
    return httpx.Client(base_url=endpoint, transport=transport, timeout=timeout)
