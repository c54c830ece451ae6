"""Prompt templates and the LLM caption-enrichment client.

The client speaks a chat-completion style JSON protocol over HTTP. Results
are cached on disk, one text file per (image digest, template, model) key,
so re-runs and moved datasets never hit the network twice.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import httpx

log = logging.getLogger(__name__)

GENERATION_TEMPLATE = "a dermoscopic lesion photo of {category} for skin cancer diagnosis"
ENRICHMENT_TEMPLATE = (
    "Analyze this {category} dermatology image. Describe in medical terms and give a sentence. "
    "Use ICD-11 terminology and begin with 'a dermoscopic lesion photo of {category} for skin cancer diagnosis,...'"
)
TEMPLATES = {"enrich-v1": ENRICHMENT_TEMPLATE}


class LlmServiceError(RuntimeError):
    """The endpoint could not be reached or kept failing after retries."""


class RejectedResponseError(ValueError):
    """The endpoint answered, but the caption failed validation."""

    def __init__(self, message: str, text: str):
        super().__init__(message)
        self.text = text


def _require_category(category: str) -> str:
    if not isinstance(category, str) or not category.strip():
        raise ValueError("category must be a non-empty string")
    return category.strip()


def build_enrichment_prompt(category: str, template_id: str = "enrich-v1") -> str:
    return TEMPLATES[template_id].format(category=_require_category(category))


def build_generation_prompt(category: str) -> str:
    return GENERATION_TEMPLATE.format(category=_require_category(category))


def validate_caption(text: str, category: str) -> bool:
    """True iff ``text`` starts with the category's prefix and says more."""
    if not text or not category:
        return False
    prefix = GENERATION_TEMPLATE.format(category=category.strip()).lower()
    body = text.strip().strip("\"'").strip()
    if not body.lower().startswith(prefix):
        return False
    return bool(body[len(prefix) :].strip(" \t\n,.;:-'\"…"))


@dataclass(frozen=True)
class CaptionRequest:
    category: str
    image_ref: Union[str, Path, bytes, None] = None
    template_id: str = "enrich-v1"

    def image_bytes(self) -> Optional[bytes]:
        if self.image_ref is None:
            return None
        if isinstance(self.image_ref, bytes):
            return self.image_ref
        return Path(self.image_ref).read_bytes()


@dataclass(frozen=True)
class LlmClientConfig:
    """Endpoint settings. The token is read from ``token_env`` at call time."""

    endpoint: str = "https://api.openai.com"
    path: str = "/v1/chat/completions"
    model: str = "gpt-4o-mini"
    token_env: str = "LESIONSYNTH_LLM_TOKEN"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    cache_dir: Optional[Path] = None
    send_image: bool = True
    # dotted path into the response JSON; integers index lists
    response_path: str = "choices.0.message.content"
    max_concurrency: int = 4

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")


class CaptionCache:
    """One text file per key; writes are serialized per key."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    @staticmethod
    def key(image_digest: str, template_id: str, model: str) -> str:
        return hashlib.sha256(f"{image_digest}|{template_id}|{model}".encode()).hexdigest()

    def lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def get(self, key: str) -> Optional[str]:
        p = self.root / f"{key}.txt"
        return p.read_text(encoding="utf-8") if p.is_file() else None

    def put(self, key: str, text: str) -> None:
        p = self.root / f"{key}.txt"
        tmp = p.with_suffix(f".tmp{threading.get_ident()}")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, p)


def _dig(doc, path: str):
    cur = doc
    for part in path.split("."):
        cur = cur[int(part)] if isinstance(cur, list) else cur[part]
    return cur


@dataclass
class CaptionClient:
    config: LlmClientConfig
    transport: Optional[httpx.BaseTransport] = None
    calls: int = field(default=0, init=False)

    def __post_init__(self):
        self._cache = CaptionCache(self.config.cache_dir) if self.config.cache_dir else None
        self._count_lock = threading.Lock()

    def _payload(self, req: CaptionRequest, image: Optional[bytes]) -> dict:
        prompt = build_enrichment_prompt(req.category, req.template_id)
        content: list[dict] = [{"type": "text", "text": prompt}]
        if self.config.send_image and image is not None:
            url = "data:image/png;base64," + base64.b64encode(image).decode()
            content.append({"type": "image_url", "image_url": {"url": url}})
        return {"model": self.config.model, "messages": [{"role": "user", "content": content}]}

    def _post(self, payload: dict) -> str:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        url = self.config.endpoint.rstrip("/") + self.config.path
        last: Optional[Exception] = None
        with httpx.Client(timeout=self.config.timeout, transport=self.transport) as http:
            for attempt in range(self.config.max_retries + 1):
                with self._count_lock:
                    self.calls += 1
                try:
                    resp = http.post(url, json=payload, headers=headers)
                    if resp.status_code >= 500 or resp.status_code == 429:
                        raise httpx.HTTPStatusError(f"status {resp.status_code}", request=resp.request, response=resp)
                    resp.raise_for_status()
                    return str(_dig(resp.json(), self.config.response_path))
                except httpx.HTTPStatusError as exc:
                    last = exc
                    if exc.response is not None and 400 <= exc.response.status_code < 500 and exc.response.status_code != 429:
                        break
                except (httpx.TransportError, KeyError, IndexError, ValueError) as exc:
                    last = exc
                if attempt < self.config.max_retries and self.config.backoff > 0:
                    time.sleep(self.config.backoff * 2**attempt)
        raise LlmServiceError(f"caption request to {url} failed: {last}")

    def enrich(self, req: CaptionRequest, fallback: bool = False) -> str:
        _require_category(req.category)
        image = req.image_bytes()
        digest = hashlib.sha256(image if image is not None else f"category:{req.category}".encode()).hexdigest()
        key = CaptionCache.key(digest, req.template_id, self.config.model)
        if self._cache is not None:
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        try:
            text = self._post(self._payload(req, image)).strip().strip("\"'").strip()
            if not validate_caption(text, req.category):
                raise RejectedResponseError(f"caption does not start with the required prefix: {text[:80]!r}", text)
        except (LlmServiceError, RejectedResponseError) as exc:
            if not fallback:
                raise
            log.warning("caption fallback for %s: %s", req.category, exc)
            return build_generation_prompt(req.category)
        if self._cache is not None:
            with self._cache.lock(key):
                self._cache.put(key, text)
        return text

    def enrich_many(self, reqs: Sequence[CaptionRequest], fallback: bool = False) -> list[str]:
        with ThreadPoolExecutor(self.config.max_concurrency) as ex:
            return list(ex.map(lambda r: self.enrich(r, fallback), reqs))


def enrich_caption(
    req: CaptionRequest, client: LlmClientConfig, fallback: bool = False, transport=None
) -> str:
    """Enrich one caption; see :class:`CaptionClient` for batching."""
    return CaptionClient(client, transport=transport).enrich(req, fallback)
