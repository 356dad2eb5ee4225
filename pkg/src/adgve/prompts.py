"""Check catalog, candidate-wise prompting, answer parsing and confidence vectors."""
from __future__ import annotations

import hashlib
import json
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import BackendError, BackendUnavailable, ParseError, TemplateError, TransportError
from .vlm import Backend, QueryPayload

TOKEN = "[ANSWER]"
GROUPS = ("frame", "clip", "roi")
CATALOG_FILE = "catalog_v1.json"


@dataclass(frozen=True)
class CheckSpec:
    check_id: str
    group: str
    name: str
    template: str
    candidates: tuple[str, ...]  # worst -> best
    values: tuple[float, ...]
    evidence_kind: str
    target_challenges: tuple[str, ...]
    roi_source: str | None = None

    def fill(self, candidate: str) -> str:
        if self.template.count(TOKEN) != 1:
            raise TemplateError(f"{self.check_id}: template must contain {TOKEN} exactly once")
        return self.template.replace(TOKEN, candidate)


@dataclass(frozen=True)
class Catalog:
    version: str
    global_instruction: str
    checks: tuple[CheckSpec, ...]
    colors: dict
    feature_slots: dict
    checksum: str

    def group(self, name: str) -> list[CheckSpec]:
        return [c for c in self.checks if c.group == name]

    def get(self, check_id: str) -> CheckSpec:
        for c in self.checks:
            if c.check_id == check_id:
                return c
        raise KeyError(check_id)

    def dim(self, group: str) -> int:
        return sum(len(c.candidates) for c in self.group(group))


def catalog_from_bytes(raw: bytes) -> Catalog:
    doc = json.loads(raw.decode("utf-8"))
    checks = []
    for c in doc["checks"]:
        spec = CheckSpec(
            check_id=c["check_id"],
            group=c["group"],
            name=c["name"],
            template=c["template"],
            candidates=tuple(c["candidates"]),
            values=tuple(float(v) for v in c["values"]),
            evidence_kind=c["evidence_kind"],
            target_challenges=tuple(c["target_challenges"]),
            roi_source=c.get("roi_source"),
        )
        if spec.group not in GROUPS:
            raise TemplateError(f"{spec.check_id}: unknown group {spec.group!r}")
        if len(spec.candidates) < 2 or len(spec.values) != len(spec.candidates):
            raise TemplateError(f"{spec.check_id}: need >=2 candidates with one value each")
        spec.fill(spec.candidates[0])  # validates the token count
        checks.append(spec)
    return Catalog(
        version=str(doc["version"]),
        global_instruction=doc["global_instruction"],
        checks=tuple(checks),
        colors={k: tuple(v) for k, v in doc["colors"].items()},
        feature_slots=doc["feature_slots"],
        checksum=hashlib.sha256(raw).hexdigest(),
    )


@lru_cache(maxsize=4)
def load_catalog(path: str | None = None) -> Catalog:
    if path is None:
        raw = resources.files("adgve").joinpath("assets", CATALOG_FILE).read_bytes()
    else:
        raw = Path(path).read_bytes()
    return catalog_from_bytes(raw)


# --------------------------------------------------------------------------
# prompts and answers


@dataclass(frozen=True)
class VlmAnswer:
    answer: str  # "yes" or "no"
    confidence: float

    def yes_confidence(self) -> float:
        return self.confidence if self.answer == "yes" else 1.0 - self.confidence


def instantiate_prompts(spec: CheckSpec, summary_text: str, catalog: Catalog | None = None) -> list[tuple[str, str]]:
    """One ``(candidate, prompt)`` per candidate: instruction, summary and filled template."""
    catalog = catalog or load_catalog()
    if hasattr(summary_text, "rendered_text"):
        summary_text = summary_text.rendered_text
    return [(c, f"{catalog.global_instruction}\n\n{summary_text}\n\n{spec.fill(c)}") for c in spec.candidates]


_ANSWER_RE = re.compile(
    r"\{\s*['\"]answer['\"]\s*:\s*['\"]?(yes|no)['\"]?\s*,\s*['\"]confidence['\"]\s*:\s*([^\s,}]+)\s*\}",
    re.IGNORECASE,
)


def parse_response(text: str) -> VlmAnswer:
    m = _ANSWER_RE.search(text)
    if m is None:
        raise ParseError(f"no answer record in {text[:80]!r}")
    try:
        confidence = float(m.group(2))
    except ValueError as exc:
        raise ParseError(f"confidence {m.group(2)!r} is not a number") from exc
    if not math.isfinite(confidence):
        raise ParseError(f"confidence {m.group(2)!r} is not finite")
    return VlmAnswer(m.group(1).lower(), min(1.0, max(0.0, confidence)))


def normalize_confidences(conf: Sequence[float]) -> np.ndarray:
    c = np.asarray(conf, dtype=float)
    total = math.fsum(c)
    if total <= 0.0:
        return np.full(len(c), 1.0 / len(c))
    return c / total


def check_to_scalar(probs: Sequence[float], spec: CheckSpec) -> float:
    return float(min(1.0, max(0.0, math.fsum(p * v for p, v in zip(probs, spec.values)))))


# --------------------------------------------------------------------------
# running a catalog against a visual bundle


@dataclass
class CheckVector:
    check_id: str
    probs: np.ndarray
    scalar: float
    evidence_refs: tuple[str, ...]
    degraded: bool = False


@dataclass
class CheckResults:
    frame_probs: np.ndarray
    s_clip: np.ndarray
    clip_probs: np.ndarray
    vectors: list[CheckVector]
    degraded: bool
    no_roi: tuple[bool, ...]
    queries: int
    failures: int = 0
    frame_scalars: dict[str, float] = field(default_factory=dict)
    clip_scalars: dict[str, float] = field(default_factory=dict)


def _ask(backend: Backend, payload: QueryPayload, retries: int, backoff_s: float):
    """(yes-confidence or None, failure kind or None) after up to ``retries`` retries."""
    failure = None
    for attempt in range(retries + 1):
        try:
            return parse_response(backend.query(payload)).yes_confidence(), None
        except (TransportError, BackendError):
            failure = "transport"
        except ParseError:
            failure = "parse"
        if attempt < retries and failure == "transport" and backoff_s > 0:
            time.sleep(min(backoff_s * (2**attempt), 1.0))
    return None, failure


def run_checks(bundle, summaries: Mapping[str, str], backend: Backend, cfg: Mapping, catalog: Catalog | None = None) -> CheckResults:
    """Query every catalog check against its evidence and pool the answers.

    ``bundle`` provides ``key_frames`` (items), ``sub_clips`` (one item list
    per clip) and ``rois`` (check_id -> items); ``summaries`` maps each item's
    ``summary_key`` to its scene summary text.
    """
    catalog = catalog or load_catalog()
    jobs: list[tuple[CheckSpec, object, list[QueryPayload]]] = []

    def add(spec: CheckSpec, item) -> None:
        summary = summaries[item.summary_key]
        payloads = [
            QueryPayload(
                payload_id=f"{item.ref}:{spec.check_id}:{k}",
                kind=item.kind,
                prompt=prompt,
                check_id=spec.check_id,
                candidate=cand,
                frames=item.frames,
                context=item.context,
                render=item.render,
            )
            for k, (cand, prompt) in enumerate(instantiate_prompts(spec, summary, catalog))
        ]
        jobs.append((spec, item, payloads))

    for item in bundle.key_frames:
        for spec in catalog.group("frame"):
            add(spec, item)
    for clip_items in bundle.sub_clips:
        for item in clip_items:
            for spec in catalog.group("clip"):
                add(spec, item)
    for spec in catalog.group("roi"):
        for item in bundle.rois.get(spec.check_id, ()):
            add(spec, item)

    flat = [p for _, _, payloads in jobs for p in payloads]
    retries = int(cfg["vlm.retries"])
    backoff = float(cfg["vlm.backoff_s"])
    workers = max(1, int(cfg["vlm.max_inflight"]))
    if workers > 1 and len(flat) > 1 and not getattr(backend, "pure", False):
        with ThreadPoolExecutor(max_workers=workers) as pool:
            answers = list(pool.map(lambda p: _ask(backend, p, retries, backoff), flat))
    else:
        answers = [_ask(backend, p, retries, backoff) for p in flat]
    by_id = {p.payload_id: a for p, a in zip(flat, answers)}
    transport_failures = sum(1 for _, f in answers if f == "transport")
    if flat and transport_failures * 2 > len(flat):
        raise BackendUnavailable(f"{transport_failures} of {len(flat)} queries failed at the transport level")

    vectors: dict[tuple[str, str], CheckVector] = {}
    degraded_any = False
    failures = 0
    for spec, item, payloads in jobs:
        conf = [by_id[p.payload_id][0] for p in payloads]
        degraded = any(c is None for c in conf)
        failures += sum(1 for c in conf if c is None)
        if degraded:
            probs = np.full(len(conf), 1.0 / len(conf))
            degraded_any = True
        else:
            probs = normalize_confidences(conf)
        vectors[(spec.check_id, item.ref)] = CheckVector(
            spec.check_id, probs, check_to_scalar(probs, spec), (item.ref,), degraded
        )

    def mean_probs(spec: CheckSpec, items) -> np.ndarray:
        vs = [vectors[(spec.check_id, it.ref)].probs for it in items]
        if not vs:
            return np.full(len(spec.candidates), 1.0 / len(spec.candidates))
        return np.mean(vs, axis=0)

    frame_specs = catalog.group("frame")
    clip_specs = catalog.group("clip")
    roi_specs = catalog.group("roi")
    frame_probs = np.concatenate([mean_probs(s, bundle.key_frames) for s in frame_specs])
    all_sub = [it for items in bundle.sub_clips for it in items]
    clip_group = [mean_probs(s, all_sub) for s in clip_specs]
    roi_group = [mean_probs(s, bundle.rois.get(s.check_id, ())) for s in roi_specs]
    clip_probs = np.concatenate(clip_group + roi_group)
    s_clip = np.array(
        [
            float(np.mean([vectors[(s.check_id, it.ref)].scalar for it in items for s in clip_specs]))
            if items
            else 0.5
            for items in bundle.sub_clips
        ]
    )
    no_roi = tuple(not bundle.rois.get(s.check_id) for s in roi_specs)
    frame_scalars = {s.check_id: check_to_scalar(mean_probs(s, bundle.key_frames), s) for s in frame_specs}
    clip_scalars = {s.check_id: check_to_scalar(p, s) for s, p in zip(clip_specs + roi_specs, clip_group + roi_group)}
    return CheckResults(
        frame_probs=frame_probs,
        s_clip=s_clip,
        clip_probs=clip_probs,
        vectors=list(vectors.values()),
        degraded=degraded_any,
        no_roi=no_roi,
        queries=len(flat),
        failures=failures,
        frame_scalars=frame_scalars,
        clip_scalars=clip_scalars,
    )
