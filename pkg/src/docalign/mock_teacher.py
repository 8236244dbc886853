"""Deterministic stand-in for the teacher endpoint.

Recognizes the package's rendered prompts by their fixed phrasing and
answers with content derived purely from hashes of the request, so a
pipeline run against it is reproducible byte for byte. Serves two ways:
as an httpx handler for in-process tests, or as a real localhost HTTP
server for end-to-end runs. Noise flags plant malformed lines, duplicate
questions, and too-short questions so curation accounting can be checked
against exact expectations.

Special markers honored in inputs:
- a passage containing ``[no-values]`` fails the value filter;
- a passage containing ``[garble-verdict]`` makes the filter reply
  without a parseable YES/NO;
- a question containing ``[empty-answer]`` yields an empty completion;
- a judge query containing ``[garble]`` yields a reply with no verdict.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

_NEX_QUESTION = re.compile(r"come up with a set of (\d+) diverse questions")
_NEX_PREF = re.compile(r"develop (\d+) questions along with")
_PASSAGE = re.compile(r"\nPassage: (.*?)\n\n(?:Now, generate|Does the passage)", re.DOTALL)
_KEYWORD = re.compile(r"questions(?: and answers)? that test the (.*?) in the passage")
_CONTEXT = re.compile(r"-{21}\n(.*?)\n-{21}", re.DOTALL)
_QUERY = re.compile(r"\nQuery: (.*?)\nAnswer:", re.DOTALL)
_JUDGE_QUERY = re.compile(r"\nQuery: (.*?)\n\nResponse A:", re.DOTALL)
_RESPONSE_A = re.compile(r"\nResponse A: (.*?)\n\nResponse B:", re.DOTALL)
_RESPONSE_B = re.compile(r"\nResponse B: (.*?)\n\nJudge strictly", re.DOTALL)

DUPLICATE_QUESTION = "Which duty applies in every case here?"
SHORT_QUESTION = "Why?"


def _digest(*parts: str) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


class MockTeacherLogic:
    """Pure request -> response logic plus a transcript of payloads."""

    def __init__(
        self,
        inject_instruct_noise: bool = False,
        inject_pref_noise: bool = False,
        judge_policy: str = "hash",
        judge_marker: str | None = None,
        embed_dim: int = 8,
    ):
        if judge_policy not in ("hash", "first", "marker"):
            raise ValueError(f"unknown judge_policy: {judge_policy!r}")
        self.inject_instruct_noise = inject_instruct_noise
        self.inject_pref_noise = inject_pref_noise
        self.judge_policy = judge_policy
        self.judge_marker = judge_marker
        self.embed_dim = embed_dim
        self.requests: list[dict] = []
        self.fail_statuses: list[int] = []
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        with self._lock:
            return len(self.requests)

    def fail_next(self, statuses: list[int]) -> None:
        """Queue HTTP statuses to return (once each) before serving
        normally again."""
        with self._lock:
            self.fail_statuses.extend(statuses)

    # === HTTP-shaped entry point ===

    def http_handle(self, path: str, payload: dict) -> tuple[int, dict]:
        with self._lock:
            self.requests.append({"path": path, "payload": payload})
            if self.fail_statuses:
                status = self.fail_statuses.pop(0)
                return status, {"error": {"message": f"injected failure {status}"}}
        if path.endswith("/chat/completions"):
            return 200, self.complete(payload)
        if path.endswith("/embeddings"):
            return 200, self.embed(payload)
        return 404, {"error": {"message": f"no such endpoint: {path}"}}

    # === Chat completions ===

    def complete(self, payload: dict) -> dict:
        prompt = "\n".join(m["content"] for m in payload["messages"])
        seed = str(payload.get("seed", ""))
        if "diverse questions based on the below passage" in prompt:
            text = self._questions(prompt, seed)
        elif "faithful and unfaithful answers based on the following passage" in prompt:
            text = self._preferences(prompt, seed)
        elif prompt.startswith("Context information is below."):
            text = self._answer(prompt)
        elif prompt.startswith("You are reviewing a passage from a values document."):
            text = self._filter_verdict(prompt)
        elif prompt.startswith("You are an impartial judge"):
            text = self._judge(prompt)
        else:
            text = f"Echo: {prompt[-200:]}"
        return self._chat_body(payload, prompt, text)

    def _chat_body(self, payload: dict, prompt: str, text: str) -> dict:
        return {
            "id": "mock-" + _digest(prompt)[:16],
            "object": "chat.completion",
            "model": payload.get("model", "mock"),
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": text},
                    "finish_reason": "stop",
                }
            ],
            "usage": {
                "prompt_tokens": len(prompt.split()),
                "completion_tokens": len(text.split()),
                "total_tokens": len(prompt.split()) + len(text.split()),
            },
        }

    def _questions(self, prompt: str, seed: str) -> str:
        nex = int(_NEX_QUESTION.search(prompt).group(1))
        passage = _PASSAGE.search(prompt).group(1)
        keyword = _KEYWORD.search(prompt).group(1)
        tag = _digest(passage, seed)[:6]
        lines = []
        for i in range(nex):
            if self.inject_instruct_noise and i == nex - 2:
                lines.append(json.dumps({"question": DUPLICATE_QUESTION}))
            elif self.inject_instruct_noise and i == nex - 1:
                lines.append(json.dumps({"question": SHORT_QUESTION}))
            else:
                lines.append(
                    json.dumps(
                        {
                            "question": f"In scenario {tag}-{i}, how do the {keyword} "
                            "described in the passage apply?"
                        }
                    )
                )
        if self.inject_instruct_noise:
            lines.append('{"question": missing quotes}')
        return "\n".join(lines)

    def _preferences(self, prompt: str, seed: str) -> str:
        nex = int(_NEX_PREF.search(prompt).group(1))
        passage = _PASSAGE.search(prompt).group(1)
        keyword = _KEYWORD.search(prompt).group(1)
        tag = _digest(passage, seed)[:6]
        lines = []
        for i in range(nex):
            lines.append(
                json.dumps(
                    {
                        "question": f"Faced with case {tag}-{i}, what do the {keyword} "
                        "in the passage require?",
                        "faithful": f"For case {tag}-{i}, act as the passage directs and "
                        "honor its stated commitments.",
                        "unfaithful": f"For case {tag}-{i}, the passage does not apply, "
                        "so no particular conduct is required.",
                    }
                )
            )
        if self.inject_pref_noise:
            lines.append('{"question": "broken line"')
            lines.append(
                json.dumps(
                    {
                        "question": f"Is case {tag}-x ever ambiguous in practice?",
                        "faithful": "The same answer either way.",
                        "unfaithful": "The same answer either way.",
                    }
                )
            )
        return "\n".join(lines)

    def _answer(self, prompt: str) -> str:
        passage = _CONTEXT.search(prompt).group(1)
        query = _QUERY.search(prompt).group(1)
        if "[empty-answer]" in query:
            return ""
        tag = _digest(passage, query)[:6]
        return (
            f"According to the provided context [{tag}], the passage answers this by "
            "reaffirming its stated commitments and the conduct they require."
        )

    def _filter_verdict(self, prompt: str) -> str:
        passage = _PASSAGE.search(prompt).group(1)
        if "[garble-verdict]" in passage:
            return "It depends on interpretation."
        return "NO" if "[no-values]" in passage else "YES"

    def _judge(self, prompt: str) -> str:
        query = _JUDGE_QUERY.search(prompt).group(1)
        response_a = _RESPONSE_A.search(prompt).group(1)
        response_b = _RESPONSE_B.search(prompt).group(1)
        if "[garble]" in query:
            return "I cannot pick a winner between these two."
        if self.judge_policy == "first":
            winner = "A"
        elif self.judge_policy == "marker":
            if self.judge_marker and self.judge_marker in response_a:
                winner = "A"
            elif self.judge_marker and self.judge_marker in response_b:
                winner = "B"
            else:
                winner = "A"
        else:
            winner = "A" if int(_digest(query, response_a, response_b), 16) % 2 == 0 else "B"
        return f"Judged by the rubric, one response tracks the grounding better.\n[[{winner}]]"

    # === Embeddings ===

    def embed(self, payload: dict) -> dict:
        data = []
        for i, text in enumerate(payload["input"]):
            data.append({"index": i, "embedding": self._vector(text), "object": "embedding"})
        return {
            "object": "list",
            "model": payload.get("model", "mock"),
            "data": data,
            "usage": {"prompt_tokens": sum(len(t.split()) for t in payload["input"]), "completion_tokens": 0},
        }

    def _vector(self, text: str) -> list[float]:
        raw = hashlib.sha256(text.encode("utf-8")).digest()
        vec = [(raw[i] - 127.5) / 127.5 for i in range(self.embed_dim)]
        norm = sum(x * x for x in vec) ** 0.5
        return [x / norm for x in vec]


def httpx_handler(logic: MockTeacherLogic):
    """Adapter for httpx.MockTransport."""
    import httpx

    def handle(request: "httpx.Request") -> "httpx.Response":
        payload = json.loads(request.content.decode("utf-8"))
        status, body = logic.http_handle(request.url.path, payload)
        return httpx.Response(status, json=body)

    return handle


class MockTeacherServer:
    """Localhost HTTP server wrapping MockTeacherLogic for end-to-end
    runs over a real socket."""

    def __init__(self, logic: MockTeacherLogic | None = None, port: int = 0):
        self.logic = logic or MockTeacherLogic()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802 (http.server API)
                length = int(self.headers.get("Content-Length", 0))
                try:
                    payload = json.loads(self.rfile.read(length).decode("utf-8"))
                except json.JSONDecodeError:
                    status, body = 400, {"error": {"message": "bad JSON"}}
                else:
                    status, body = outer.logic.http_handle(self.path, payload)
                data = json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> str:
        self._thread.start()
        return self.base_url

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "MockTeacherServer":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
