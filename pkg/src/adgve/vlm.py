"""Visual-question backends: remote HTTP endpoint, hash stub, oracle stub and transcript replay."""
from __future__ import annotations

import base64
import hashlib
import json
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

from .errors import BackendError, ConfigError, TransportError

MODES = ("remote", "hash_stub", "oracle_stub", "replay")
ORACLE_CONFIDENCE = 0.95


@dataclass
class QueryPayload:
    """One candidate-wise question about one visual input.

    ``frames`` are the frames shown; ``context`` is the frame span the input
    stands for (an ROI crop taken on a key frame represents its whole clip).
    Images are produced lazily by ``render`` so stubs never pay for pixels.
    """

    payload_id: str
    kind: str  # "image" or "clip"
    prompt: str
    check_id: str
    candidate: str
    frames: tuple[int, ...]
    context: tuple[int, ...] = ()
    render: Callable[[], list[bytes]] | None = field(default=None, repr=False, compare=False)

    def images(self) -> list[bytes]:
        return self.render() if self.render is not None else []


class Backend(Protocol):
    def query(self, payload: QueryPayload) -> str: ...


def format_answer(yes: bool, confidence: float) -> str:
    return f"{{'answer': {'Yes' if yes else 'No'}, 'confidence': {confidence:.2f}}}"


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class HashStub:
    """Answers with a confidence derived from a stable hash of the query identity."""

    pure = True

    def __init__(self, seed: int = 0):
        self.seed = seed

    def query(self, payload: QueryPayload) -> str:
        key = f"{self.seed}|{payload.check_id}|{payload.candidate}|{payload.payload_id}".encode("utf-8")
        digest = hashlib.sha256(key).digest()
        confidence = int.from_bytes(digest[:4], "big") / 0xFFFFFFFF
        return format_answer(digest[4] % 2 == 0, confidence)


class OracleStub:
    """Answers from planted violation windows.

    ``violations`` holds dicts with ``kind``, ``start`` and ``end`` (frame
    window, end exclusive). ``check_map`` maps a kind to (check_id, bad
    candidate); ``best`` maps check_id to its best candidate. A query is
    answered Yes on the bad candidate when a mapped violation overlaps the
    payload's context, otherwise Yes on the best candidate.
    """

    pure = True

    def __init__(
        self,
        violations: Sequence[Mapping],
        check_map: Mapping[str, tuple[str, str]],
        best: Mapping[str, str],
    ):
        self.violations = list(violations)
        self.check_map = dict(check_map)
        self.best = dict(best)

    def active_bad(self, check_id: str, frames: Sequence[int]) -> set[str]:
        if not frames:
            return set()
        lo, hi = min(frames), max(frames)
        bad = set()
        for v in self.violations:
            target = self.check_map.get(v["kind"])
            if target is None or target[0] != check_id:
                continue
            if v["start"] <= hi and lo < v["end"]:
                bad.add(target[1])
        return bad

    def query(self, payload: QueryPayload) -> str:
        bad = self.active_bad(payload.check_id, payload.context or payload.frames)
        expected = bad if bad else {self.best.get(payload.check_id)}
        return format_answer(payload.candidate in expected, ORACLE_CONFIDENCE)


class RemoteBackend:
    """POSTs ``{payload_id, prompt, images}`` as JSON and returns the body text."""

    def __init__(self, endpoint: str, timeout_s: float = 30.0):
        if not endpoint:
            raise ConfigError("vlm.endpoint is required in remote mode")
        self.endpoint = endpoint
        self.timeout_s = timeout_s

    def query(self, payload: QueryPayload) -> str:
        body = json.dumps(
            {
                "payload_id": payload.payload_id,
                "kind": payload.kind,
                "prompt": payload.prompt,
                "images": [base64.b64encode(img).decode("ascii") for img in payload.images()],
            }
        ).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout_s) as response:
                return response.read().decode("utf-8", errors="replace")
        except urllib.error.HTTPError as exc:
            raise BackendError(f"{self.endpoint} answered HTTP {exc.code}") from exc
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise TransportError(f"cannot reach {self.endpoint}: {exc}") from exc


class Transcript:
    """Thread-safe record of (payload_id -> response), written sorted for stable files."""

    def __init__(self):
        self._records: dict[str, dict] = {}
        self._lock = threading.Lock()

    def add(self, payload: QueryPayload, response: str) -> None:
        record = {
            "payload_id": payload.payload_id,
            "check_id": payload.check_id,
            "candidate": payload.candidate,
            "prompt_sha256": prompt_digest(payload.prompt),
            "response": response,
        }
        with self._lock:
            self._records[payload.payload_id] = record

    def __len__(self) -> int:
        return len(self._records)

    def dumps(self) -> str:
        with self._lock:
            return "".join(json.dumps(self._records[k], sort_keys=True) + "\n" for k in sorted(self._records))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


class Recording:
    """Wraps a backend and records every successful response."""

    def __init__(self, inner: Backend, transcript: Transcript):
        self.inner = inner
        self.transcript = transcript
        self.pure = getattr(inner, "pure", False)

    def query(self, payload: QueryPayload) -> str:
        response = self.inner.query(payload)
        self.transcript.add(payload, response)
        return response


class ReplayBackend:
    """Serves responses from a transcript; prompts must hash identically."""

    pure = True

    def __init__(self, path: str | Path):
        self.records: dict[str, dict] = {}
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"transcript {p} does not exist")
        for line in p.read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                self.records[rec["payload_id"]] = rec

    def query(self, payload: QueryPayload) -> str:
        rec = self.records.get(payload.payload_id)
        if rec is None:
            raise BackendError(f"no recorded response for {payload.payload_id}")
        if rec["prompt_sha256"] != prompt_digest(payload.prompt):
            raise BackendError(f"prompt changed since recording for {payload.payload_id}")
        return rec["response"]


def make_backend(cfg: Mapping, oracle_violations: Sequence[Mapping] | None = None, catalog=None) -> Backend:
    mode = cfg["vlm.mode"]
    if mode == "hash_stub":
        return HashStub(int(cfg["vlm.seed"]))
    if mode == "oracle_stub":
        from .prompts import load_catalog
        from .synth import VIOLATION_CHECKS

        catalog = catalog or load_catalog()
        best = {c.check_id: c.candidates[-1] for c in catalog.checks}
        return OracleStub(oracle_violations or (), VIOLATION_CHECKS, best)
    if mode == "remote":
        return RemoteBackend(cfg["vlm.endpoint"], float(cfg["vlm.timeout_s"]))
    if mode == "replay":
        return ReplayBackend(cfg["vlm.transcript_path"])
    raise ConfigError(f"unknown vlm.mode {mode!r}; expected one of {MODES}")
