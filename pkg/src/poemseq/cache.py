"""Content-addressed response cache.

Entries live at ``<cache_dir>/<key[:2]>/<key>.json`` and hold the key and
the JSON value. Writes go through a temporary file and ``os.replace`` so
concurrent writers of the same key leave one complete entry behind (last
writer wins). Unreadable or mismatched entries count as misses.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
from pathlib import Path
from typing import Any, Callable

logger = logging.getLogger(__name__)

_MISSING = object()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def cache_key(descriptor: Any, template_hash: str | None, payload: Any) -> str:
    blob = canonical_json({"provider": descriptor, "template": template_hash, "payload": payload})
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    def __init__(self, cache_dir):
        self.root = Path(cache_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def lookup(self, key: str) -> Any:
        """Cached value for ``key``, or ``None`` on a miss."""
        value = self._read(key)
        return None if value is _MISSING else value

    def _read(self, key: str) -> Any:
        path = self._path(key)
        try:
            entry = json.loads(path.read_text("utf-8"))
            if entry.get("key") != key or "value" not in entry:
                raise ValueError("key mismatch")
        except FileNotFoundError:
            return _MISSING
        except (ValueError, OSError, AttributeError) as exc:
            logger.warning("discarding corrupt cache entry %s: %s", path.name, exc)
            return _MISSING
        return entry["value"]

    def store(self, key: str, value: Any) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(canonical_json({"key": key, "value": value}))
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def get_or_compute(self, key: str, compute: Callable[[], Any]) -> Any:
        value = self._read(key)
        with self._lock:
            if value is _MISSING:
                self.misses += 1
            else:
                self.hits += 1
        if value is not _MISSING:
            return value
        value = compute()
        self.store(key, value)
        return value
