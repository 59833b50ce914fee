"""Black-box victim oracles: (image, prompt) -> text, with exact query
accounting.

The toy retrieval victim is a deterministic stand-in that returns the bank
caption whose text embedding best matches the image embedding; it makes the
whole attack pipeline verifiable at desk scale.  The HTTP and subprocess
adapters speak a pinned JSON schema so real served models drop in without
code changes:

    request  {"image": "<base64 PNG bytes>", "prompt": "<text>"}
    response {"text": "<generated text>"}

One ``generate`` call is one query.  Served models are required to decode
deterministically (greedy or fixed seed); that contract is the adapter's,
not enforceable from here.
"""

from __future__ import annotations

import base64
import json
import subprocess
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import httpx
import numpy as np

from .encoders import ImageEncoder, TextEncoder
from .errors import VictimError
from .imagecore import PixelImage, decode_png, encode_png

DEFAULT_PROMPT_TEXT = "what is the content of this image?"


@dataclass(frozen=True)
class Prompt:
    """The fixed input text; attacks never manipulate it."""

    text: str = DEFAULT_PROMPT_TEXT

    def __post_init__(self):
        if not self.text.strip():
            raise VictimError("prompt text must be non-empty")


@dataclass
class QueryLedger:
    """Snapshot of victim usage; totals equal the sum over cases plus
    queries made with no case attribution."""

    total_queries: int = 0
    per_case_queries: dict[str, int] = field(default_factory=dict)


class VictimOracle(ABC):
    """Image-grounded text generator with black-box access only."""

    name: str = "victim"
    max_concurrency: int = 1

    def __init__(self):
        self._lock = threading.Lock()
        self._total = 0
        self._per_case: dict[str, int] = {}

    @abstractmethod
    def _generate(self, x: PixelImage, prompt: Prompt) -> str: ...

    def generate(self, x: PixelImage, prompt: Prompt, case_id: str | None = None) -> str:
        """One query: returns the generated text and increments the ledger."""
        text = self._generate(x, prompt)
        with self._lock:
            self._total += 1
            if case_id is not None:
                self._per_case[case_id] = self._per_case.get(case_id, 0) + 1
        return text

    def read_ledger(self) -> QueryLedger:
        with self._lock:
            return QueryLedger(self._total, dict(self._per_case))

    def reset_ledger(self) -> None:
        with self._lock:
            self._total = 0
            self._per_case.clear()


class ToyRetrievalVictim(VictimOracle):
    """Deterministic caption-retrieval victim over a fixed caption bank.

    Returns the caption whose (unit-norm) text embedding has maximal inner
    product with the image embedding; ties break to the lowest index, and
    the argmax is invariant to positive rescaling of the image embedding.
    """

    name = "toy-retrieval"

    def __init__(
        self,
        caption_bank: list[str],
        image_encoder: ImageEncoder,
        text_encoder: TextEncoder,
        max_concurrency: int = 8,
    ):
        super().__init__()
        if len(caption_bank) < 2:
            raise VictimError("caption bank needs at least 2 entries")
        if image_encoder.embed_dim != text_encoder.embed_dim:
            raise VictimError(
                f"encoder dims differ: image {image_encoder.embed_dim} "
                f"vs text {text_encoder.embed_dim}"
            )
        self.caption_bank = list(caption_bank)
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        self.max_concurrency = max_concurrency
        self._bank_matrix = np.stack(
            [text_encoder.encode(c).values for c in self.caption_bank]
        )

    def _generate(self, x: PixelImage, prompt: Prompt) -> str:
        scores = self._bank_matrix @ self.image_encoder.encode(x).values
        return self.caption_bank[int(np.argmax(scores))]  # argmax takes lowest index on ties


class RemoteHttpVictim(VictimOracle):
    """Adapter for a victim served over HTTP with the pinned JSON schema.

    Retries transport failures with exponential backoff (3 attempts by
    default), then raises VictimError.
    """

    def __init__(
        self,
        endpoint: str,
        name: str = "remote-http",
        max_concurrency: int = 4,
        retries: int = 3,
        backoff_seconds: float = 0.5,
        timeout: float = 60.0,
        client: httpx.Client | None = None,
    ):
        super().__init__()
        self.endpoint = endpoint
        self.name = name
        self.max_concurrency = max_concurrency
        self.retries = retries
        self.backoff_seconds = backoff_seconds
        self._client = client or httpx.Client(timeout=timeout)

    def _generate(self, x: PixelImage, prompt: Prompt) -> str:
        payload = {
            "image": base64.b64encode(encode_png(x)).decode("ascii"),
            "prompt": prompt.text,
        }
        last_error: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = self._client.post(self.endpoint, json=payload)
                resp.raise_for_status()
                body = resp.json()
                if "text" not in body:
                    raise VictimError(f"malformed victim response: {body!r}")
                return str(body["text"])
            except VictimError:
                raise
            except Exception as exc:  # transport or HTTP-status failure
                last_error = exc
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff_seconds * (2.0 ** attempt))
        raise VictimError(
            f"victim at {self.endpoint} unreachable after {self.retries} attempts: "
            f"{last_error}"
        )


class SubprocessVictim(VictimOracle):
    """Adapter for a victim behind a child process, one JSON request per
    line on stdin and one JSON response per line on stdout."""

    def __init__(self, argv: list[str], name: str = "subprocess"):
        super().__init__()
        self.name = name
        self.max_concurrency = 1  # single pipe, strictly sequential
        self._argv = list(argv)
        self._proc: subprocess.Popen | None = None
        self._io_lock = threading.Lock()

    def _ensure_proc(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self._argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        return self._proc

    def _generate(self, x: PixelImage, prompt: Prompt) -> str:
        request = json.dumps(
            {
                "image": base64.b64encode(encode_png(x)).decode("ascii"),
                "prompt": prompt.text,
            }
        )
        with self._io_lock:
            proc = self._ensure_proc()
            try:
                proc.stdin.write(request + "\n")
                proc.stdin.flush()
                line = proc.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                raise VictimError(f"subprocess victim pipe failed: {exc}") from exc
        if not line:
            raise VictimError("subprocess victim closed its stdout")
        try:
            body = json.loads(line)
            return str(body["text"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise VictimError(f"malformed subprocess response: {line!r}") from exc

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.terminate()
            self._proc.wait(timeout=5)


def generate(v: VictimOracle, x: PixelImage, prompt: Prompt, case_id: str | None = None) -> str:
    return v.generate(x, prompt, case_id=case_id)


def serve_stdio(victim: VictimOracle, stdin=None, stdout=None) -> None:
    """Serve a victim over stdin/stdout with the pinned line protocol.

    Loops until EOF.  Errors are reported as {"error": "..."} lines so the
    client can distinguish a bad request from a dead pipe.
    """
    import sys

    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
            image = decode_png(base64.b64decode(req["image"]), source="<request>")
            text = victim.generate(image, Prompt(req.get("prompt", DEFAULT_PROMPT_TEXT)))
            out = {"text": text}
        except Exception as exc:
            out = {"error": str(exc)}
        stdout.write(json.dumps(out) + "\n")
        stdout.flush()
