import json
import threading

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lesionsynth.captions import (
    CaptionClient,
    CaptionRequest,
    LlmClientConfig,
    LlmServiceError,
    RejectedResponseError,
    build_enrichment_prompt,
    build_generation_prompt,
    enrich_caption,
    validate_caption,
)

GOOD = "a dermoscopic lesion photo of melanoma for skin cancer diagnosis, asymmetric pigmented macule (2C30)"


def _reply(text):
    return {"choices": [{"message": {"content": text}}]}


class Server:
    """Mock endpoint recording requests and replying with a fixed caption."""

    def __init__(self, text=GOOD, status=200, fail_first=0):
        self.text, self.status, self.fail_first = text, status, fail_first
        self.requests = []
        self._lock = threading.Lock()

    def __call__(self, request: httpx.Request):
        with self._lock:
            self.requests.append(request)
            n = len(self.requests)
        if n <= self.fail_first:
            return httpx.Response(503)
        if self.status != 200:
            return httpx.Response(self.status)
        return httpx.Response(200, json=_reply(self.text))

    @property
    def transport(self):
        return httpx.MockTransport(self)


def _cfg(tmp_path=None, **kw):
    kw.setdefault("backoff", 0.0)
    return LlmClientConfig(endpoint="http://llm.test", cache_dir=tmp_path, **kw)


class TestPrompts:
    def test_enrichment_template(self):
        assert build_enrichment_prompt("melanoma") == (
            "Analyze this melanoma dermatology image. Describe in medical terms and give a sentence. "
            "Use ICD-11 terminology and begin with 'a dermoscopic lesion photo of melanoma for skin cancer diagnosis,...'"
        )

    def test_enrichment_substitutes_twice(self):
        p = build_enrichment_prompt("nevus")
        assert p.count("nevus") == 2 and "melanoma" not in p

    def test_generation_prompt(self):
        assert build_generation_prompt("melanoma") == "a dermoscopic lesion photo of melanoma for skin cancer diagnosis"

    @given(c=st.text(alphabet="abcdefghijklmnopqrstuvwxyz_", min_size=3, max_size=20))
    def test_category_appears_once(self, c):
        # avoid categories that occur inside the fixed template words
        if c in "a dermoscopic lesion photo of  for skin cancer diagnosis":
            return
        assert build_generation_prompt(c).count(c) == 1

    @pytest.mark.parametrize("fn", [build_enrichment_prompt, build_generation_prompt])
    def test_empty_category(self, fn):
        with pytest.raises(ValueError):
            fn("")


class TestValidate:
    def test_valid(self):
        assert validate_caption(GOOD, "melanoma")

    def test_case_insensitive(self):
        assert validate_caption(GOOD.upper(), "melanoma")

    def test_wrong_category(self):
        assert not validate_caption(GOOD, "nevus")

    def test_prefix_only(self):
        assert not validate_caption(build_generation_prompt("melanoma"), "melanoma")
        assert not validate_caption(build_generation_prompt("melanoma") + ", ...", "melanoma")

    def test_missing_prefix(self):
        assert not validate_caption("The lesion shows irregular borders.", "melanoma")


class TestClient:
    def test_request_shape_and_token_from_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("LESIONSYNTH_LLM_TOKEN", "sekret")
        srv = Server()
        img = tmp_path / "x.png"
        img.write_bytes(b"\x89PNG fake")
        out = CaptionClient(_cfg(), srv.transport).enrich(CaptionRequest("melanoma", img))
        assert out == GOOD
        req = srv.requests[0]
        assert req.headers["authorization"] == "Bearer sekret"
        body = json.loads(req.content)
        kinds = [c["type"] for c in body["messages"][0]["content"]]
        assert kinds == ["text", "image_url"]
        assert body["messages"][0]["content"][0]["text"] == build_enrichment_prompt("melanoma")

    def test_text_only_mode(self, monkeypatch):
        monkeypatch.delenv("LESIONSYNTH_LLM_TOKEN", raising=False)
        srv = Server()
        CaptionClient(_cfg(send_image=False), srv.transport).enrich(CaptionRequest("melanoma", b"img"))
        body = json.loads(srv.requests[0].content)
        assert [c["type"] for c in body["messages"][0]["content"]] == ["text"]
        assert "authorization" not in srv.requests[0].headers

    def test_cache_hit_makes_no_calls(self, tmp_path):
        srv = Server()
        req = CaptionRequest("melanoma", b"same image bytes")
        first = CaptionClient(_cfg(tmp_path), srv.transport)
        a = first.enrich(req)
        second = CaptionClient(_cfg(tmp_path), srv.transport)
        b = second.enrich(req)
        assert a == b == GOOD
        assert second.calls == 0 and len(srv.requests) == 1

    def test_cache_keyed_by_content_not_path(self, tmp_path):
        srv = Server()
        p1, p2 = tmp_path / "a.png", tmp_path / "moved" / "b.png"
        p2.parent.mkdir()
        p1.write_bytes(b"pixels")
        p2.write_bytes(b"pixels")
        c = CaptionClient(_cfg(tmp_path / "cache"), srv.transport)
        c.enrich(CaptionRequest("melanoma", p1))
        c.enrich(CaptionRequest("melanoma", p2))
        assert len(srv.requests) == 1

    def test_rejected_response(self):
        srv = Server(text="The lesion shows irregular borders.")
        with pytest.raises(RejectedResponseError) as exc:
            CaptionClient(_cfg(), srv.transport).enrich(CaptionRequest("melanoma", b"x"))
        assert exc.value.text.startswith("The lesion")

    def test_retry_then_succeed(self):
        srv = Server(fail_first=2)
        c = CaptionClient(_cfg(max_retries=3), srv.transport)
        assert c.enrich(CaptionRequest("melanoma", b"x")) == GOOD
        assert c.calls == 3

    def test_client_error_not_retried(self):
        srv = Server(status=401)
        c = CaptionClient(_cfg(max_retries=3), srv.transport)
        with pytest.raises(LlmServiceError):
            c.enrich(CaptionRequest("melanoma", b"x"))
        assert c.calls == 1

    def test_unreachable_fallback(self):
        def boom(request):
            raise httpx.ConnectError("unreachable", request=request)

        cfg = _cfg(max_retries=1)
        out = enrich_caption(CaptionRequest("nevus", b"x"), cfg, fallback=True, transport=httpx.MockTransport(boom))
        assert out == build_generation_prompt("nevus")
        with pytest.raises(LlmServiceError):
            enrich_caption(CaptionRequest("nevus", b"x"), cfg, fallback=False, transport=httpx.MockTransport(boom))

    def test_fallback_not_cached(self, tmp_path):
        srv = Server(text="nope")
        c = CaptionClient(_cfg(tmp_path), srv.transport)
        c.enrich(CaptionRequest("melanoma", b"x"), fallback=True)
        assert not list(tmp_path.glob("*.txt"))

    def test_enrich_many_concurrent_idempotent(self, tmp_path):
        srv = Server()
        c = CaptionClient(_cfg(tmp_path, max_concurrency=4), srv.transport)
        reqs = [CaptionRequest("melanoma", f"img{i % 3}".encode()) for i in range(12)]
        out = c.enrich_many(reqs)
        assert out == [GOOD] * 12
        again = CaptionClient(_cfg(tmp_path), srv.transport)
        assert again.enrich_many(reqs) == out and again.calls == 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LlmClientConfig(timeout=0)
        with pytest.raises(ValueError):
            LlmClientConfig(max_concurrency=0)
