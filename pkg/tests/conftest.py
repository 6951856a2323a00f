from __future__ import annotations

import hashlib
import json
import threading
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from dualchain.fixtures import generate_synthetic_corpus


@pytest.fixture(scope="session")
def synth():
    return generate_synthetic_corpus()


class StubServer:
    """Chat-completions style server on localhost.

    Every request body is recorded. Scripted ``(status, body)`` replies are
    served first-in first-out per path; once a queue is empty, chat replies
    echo the last text part and embeddings are a hash-seeded vector.
    """

    def __init__(self, dim: int = 8):
        self.dim = dim
        self.requests: list[tuple[str, dict, dict]] = []
        self.scripted: dict[str, deque] = {}
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                stub.requests.append((self.path, body, dict(self.headers)))
                queue = stub.scripted.get(self.path)
                if queue:
                    status, payload = queue.popleft()
                else:
                    status, payload = 200, stub.default(self.path, body)
                raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.01}, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}/v1"

    def script(self, path: str, *replies) -> None:
        self.scripted.setdefault(path, deque()).extend(replies)

    def default(self, path: str, body: dict):
        if path.endswith("/chat/completions"):
            parts = body["messages"][-1]["content"]
            text = [p["text"] for p in parts if p["type"] == "text"][-1]
            return {"choices": [{"message": {"role": "assistant", "content": f"echo: {text}"}}], "usage": {"total_tokens": 1}}
        if path.endswith("/embeddings"):
            seed = int.from_bytes(hashlib.sha256(body["input"][0].encode()).digest()[:8], "little")
            vec = np.random.default_rng(seed).standard_normal(self.dim)
            return {"data": [{"embedding": vec.tolist()}]}
        return {}

    def start(self):
        self.thread.start()
        return self

    def stop(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    server = StubServer().start()
    yield server
    server.stop()
