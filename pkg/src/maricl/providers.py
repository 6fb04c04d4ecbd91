"""LLM provider contract: scripted replay, HTTP backends, and call ledgering.

Every completion is ledgered (primary vs retry, with rough token estimates);
the ledger is the only mutable state and is lock-protected so agents may call
concurrently. The scripted provider replays a transcript file and is fully
deterministic; the recording wrapper writes the same transcript format during
live runs so any real session becomes a regression fixture.
"""
from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import requests

_RESPONSE_HEADER = re.compile(r"^### RESPONSE (\d+) ###$")


class ProviderError(RuntimeError):
    """Transport failure or transcript exhaustion."""


def estimate_tokens(text: str) -> int:
    # ~4 chars per token; billing-grade accuracy is a non-goal
    return max(1, len(text) // 4)


@dataclass
class CallLedger:
    primary_calls: int = 0
    retry_calls: int = 0
    prompt_tokens: int = 0
    response_tokens: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False,
                                  compare=False)

    def record(self, prompt: str, response: str, retry: bool) -> None:
        with self._lock:
            if retry:
                self.retry_calls += 1
            else:
                self.primary_calls += 1
            self.prompt_tokens += estimate_tokens(prompt)
            self.response_tokens += estimate_tokens(response)

    @property
    def total_calls(self) -> int:
        return self.primary_calls + self.retry_calls

    def as_dict(self) -> dict:
        return {"primary_calls": self.primary_calls,
                "retry_calls": self.retry_calls,
                "total_calls": self.total_calls,
                "prompt_tokens_est": self.prompt_tokens,
                "response_tokens_est": self.response_tokens}


class LlmProvider:
    """Contract: complete(prompt) -> response text, with a shared ledger."""

    def __init__(self):
        self.ledger = CallLedger()

    def complete(self, prompt: str, *, temperature: float = 0.7,
                 max_tokens: int = 2048, retry: bool = False) -> str:
        response = self._complete(prompt, temperature=temperature,
                                  max_tokens=max_tokens)
        self.ledger.record(prompt, response, retry)
        return response

    def _complete(self, prompt: str, *, temperature: float,
                  max_tokens: int) -> str:
        raise NotImplementedError


def parse_transcript(text: str) -> list[str]:
    """Split a transcript into ordered response blocks."""
    blocks: list[str] = []
    current: Optional[list[str]] = None
    for line in text.splitlines():
        if _RESPONSE_HEADER.match(line.strip()):
            if current is not None:
                blocks.append("\n".join(current).strip("\n"))
            current = []
        elif current is not None:
            current.append(line)
    if current is not None:
        blocks.append("\n".join(current).strip("\n"))
    return blocks


def format_transcript(responses: list[str]) -> str:
    parts = []
    for i, resp in enumerate(responses, start=1):
        parts.append(f"### RESPONSE {i} ###\n{resp.rstrip()}\n")
    return "\n".join(parts)


class ScriptedProvider(LlmProvider):
    """Deterministic provider consuming a fixed response sequence."""

    def __init__(self, responses: list[str] | None = None,
                 path: Optional[str | Path] = None):
        super().__init__()
        if responses is None:
            if path is None:
                raise ValueError("need responses or a transcript path")
            responses = parse_transcript(Path(path).read_text())
        self.responses = list(responses)
        self.cursor = 0

    def _complete(self, prompt: str, *, temperature: float,
                  max_tokens: int) -> str:
        if self.cursor >= len(self.responses):
            raise ProviderError(
                f"scripted transcript exhausted after {self.cursor} responses")
        out = self.responses[self.cursor]
        self.cursor += 1
        return out

    @property
    def remaining(self) -> int:
        return len(self.responses) - self.cursor


# default request/response field shapes; override per backend
DEFAULT_SHAPE = {
    "model_key": "model",
    "prompt_key": "prompt",
    "temperature_key": "temperature",
    "max_tokens_key": "max_tokens",
    "response_text_path": "text",
}


def _dig(payload, path: str):
    node = payload
    for part in path.split("."):
        if isinstance(node, list):
            node = node[int(part)]
        else:
            node = node[part]
    return node


class HttpProvider(LlmProvider):
    """Single JSON-object-over-POST chat backend.

    The wire shape is a flat mapping table so OpenAI-ish or bespoke endpoints
    both fit without code changes. Credentials come from the environment
    only; they are never persisted into artifacts.
    """

    def __init__(self, endpoint: str, model_id: str,
                 shape: Optional[dict] = None,
                 api_key: Optional[str] = None,
                 timeout: float = 60.0):
        super().__init__()
        self.endpoint = endpoint
        self.model_id = model_id
        self.shape = {**DEFAULT_SHAPE, **(shape or {})}
        self.api_key = api_key
        self.timeout = timeout

    def _complete(self, prompt: str, *, temperature: float,
                  max_tokens: int) -> str:
        body = {
            self.shape["model_key"]: self.model_id,
            self.shape["prompt_key"]: prompt,
            self.shape["temperature_key"]: temperature,
            self.shape["max_tokens_key"]: max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(self.endpoint, data=json.dumps(body),
                                 headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            payload = resp.json()
            return str(_dig(payload, self.shape["response_text_path"]))
        except (requests.RequestException, KeyError, IndexError,
                ValueError) as exc:
            raise ProviderError(f"provider call failed: {exc}") from exc


class RecordingProvider(LlmProvider):
    """Wraps a live provider and records its transcript for replay."""

    def __init__(self, inner: LlmProvider, path: str | Path):
        super().__init__()
        self.inner = inner
        self.path = Path(path)
        self.responses: list[str] = []

    def _complete(self, prompt: str, *, temperature: float,
                  max_tokens: int) -> str:
        out = self.inner._complete(prompt, temperature=temperature,
                                   max_tokens=max_tokens)
        self.responses.append(out)
        self.path.write_text(format_transcript(self.responses))
        return out
