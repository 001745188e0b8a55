"""Chat-completion backends: an OpenAI-compatible HTTP client and an offline mock."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from pathlib import Path
from typing import Dict, List, Optional

import requests

log = logging.getLogger(__name__)

Messages = List[Dict[str, str]]


class BackendError(RuntimeError):
    def __init__(self, message: str, caption_id: Optional[str] = None):
        super().__init__(message if caption_id is None else f"[{caption_id}] {message}")
        self.caption_id = caption_id


class LLMBackend:
    """Base class. Subclasses implement ``_complete``; ``complete`` counts calls."""

    identity = "abstract"

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, messages: Messages) -> str:
        with self._lock:
            self.calls += 1
        return self._complete(messages)

    def _complete(self, messages: Messages) -> str:
        raise NotImplementedError


class HttpBackend(LLMBackend):
    """POSTs to ``{url}`` (an OpenAI-compatible ``/chat/completions`` endpoint)."""

    def __init__(self, url: Optional[str] = None, model: str = "gpt-3.5-turbo", api_key: Optional[str] = None,
                 max_retries: int = 3, timeout: float = 60.0, backoff: float = 1.0, temperature: float = 0.0):
        super().__init__()
        self.url = url or os.environ.get("APK_LLM_URL", "")
        if not self.url:
            raise BackendError("no LLM endpoint configured (set llm.url or APK_LLM_URL)")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("APK_LLM_KEY", "")
        self.max_retries = max_retries
        self.timeout = timeout
        self.backoff = backoff
        self.temperature = temperature
        self.session = requests.Session()

    @property
    def identity(self) -> str:
        return f"http:{self.url}:{self.model}:t={self.temperature}"

    def _complete(self, messages: Messages) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.model, "messages": messages, "temperature": self.temperature}
        last: Optional[Exception] = None
        for attempt in range(self.max_retries):
            try:
                resp = self.session.post(self.url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last = exc
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()["choices"][0]["message"]["content"] or ""
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise BackendError(f"malformed completion payload: {exc}") from exc
                last = BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                if 400 <= resp.status_code < 500 and resp.status_code != 429:
                    raise last
            log.warning("LLM request attempt %d/%d failed: %s", attempt + 1, self.max_retries, last)
            if attempt + 1 < self.max_retries:
                time.sleep(self.backoff * (2**attempt))
        raise BackendError(f"request failed after {self.max_retries} attempts: {last}")


# --------------------------------------------------------------------------
# offline mock

_DET = r"(?:a|an|the)"
_TRIPLET_IN_PROMPT = re.compile(r"Triplet:\s*[<(]\s*([^,<>()]+?)\s*,\s*([^,<>()]+?)\s*,\s*([^,<>()]+?)\s*[>)]")
_CAPTION_IN_PROMPT = re.compile(r"Caption:\s*(.*)")


def base_verb(inflected: str) -> str:
    w = inflected.lower()
    for suffix in ("shes", "ches", "sses", "xes", "zes"):
        if w.endswith(suffix):
            return w[:-2]
    return w[:-1] if w.endswith("s") else w


def gerund(verb: str) -> str:
    v = verb.lower()
    if v.endswith("ing"):
        return v
    if v.endswith("ie"):
        return v[:-2] + "ying"
    if v.endswith("e") and not v.endswith(("ee", "ye", "oe")):
        return v[:-1] + "ing"
    return v + "ing"


def extract_svo(caption: str):
    """Rule-based subject/verb/object extraction for simple declarative captions."""
    text = caption.strip().rstrip(".")
    words = text.split()
    # "<det> X ... is|are V-ing ... <last noun>", checked first since it would
    # otherwise fit the adjective pattern below with "is" as the noun
    lowered = [w.lower().strip(",;") for w in words]
    if lowered and lowered[0] in ("a", "an", "the") and len(lowered) >= 4:
        for i, w in enumerate(lowered[:-1]):
            if w in ("is", "are") and lowered[i + 1].endswith("ing"):
                return lowered[1], lowered[i + 1], lowered[-1]
    m = re.match(rf"^{_DET}\s+(\w+)\s+(\w+)\s+(\w+)\s+{_DET}\s+(\w+)\s+(\w+)$", text, re.I)
    if m:
        return m.group(2).lower(), base_verb(m.group(3)), m.group(5).lower()
    return None


class MockBackend(LLMBackend):
    """Deterministic stand-in for an LLM.

    Answers triplet requests with ``<subject, verb, object>`` and state requests
    with a fixed sentence template, by reading the caption/triplet the prompt
    carries in its final user message.
    """

    identity = "mock:svo-v1"

    def _complete(self, messages: Messages) -> str:
        query = messages[-1]["content"]
        trip = _TRIPLET_IN_PROMPT.search(query)
        if trip:
            s, a, o = (g.strip() for g in trip.groups())
            return f"the {s} is {gerund(a)} the {o}, changing its state"
        cap = _CAPTION_IN_PROMPT.search(query)
        svo = extract_svo(cap.group(1) if cap else query)
        if svo is None:
            return "none"
        return "<{}, {}, {}>".format(*svo)


# --------------------------------------------------------------------------
# disk cache


class ResponseCache:
    """Content-addressed directory of response files.

    Writes go to a temp file in the same directory and are renamed into place,
    so concurrent writers never expose partial files.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(*parts: str) -> str:
        h = hashlib.sha256()
        for p in parts:
            h.update(len(p.encode()).to_bytes(8, "little"))
            h.update(p.encode())
        return h.hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.txt"

    def get(self, key: str) -> Optional[str]:
        p = self._path(key)
        return p.read_text(encoding="utf-8") if p.exists() else None

    def put(self, key: str, value: str) -> None:
        p = self._path(key)
        p.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=p.parent, prefix=".tmp-")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(value)
        os.replace(tmp, p)


def template_fingerprint(template) -> str:
    return json.dumps(
        {"system": template.system_text, "examples": template.in_context_examples, "slot": template.user_slot},
        sort_keys=True,
    )
