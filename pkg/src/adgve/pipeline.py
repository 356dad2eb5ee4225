"""End-to-end scoring, manifest filtering, ablations and batch reports."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .clips import split_clips
from .config import Config
from .errors import AdgveError, EmptyInput
from .fusion import (
    EVIDENCE_BITS,
    SLOTS,
    FeatureBundle,
    FusionModel,
    attention_aggregate,
    fuse,
    operand_blocks,
    safe_srcc,
    sigmoid,
    statistics_features,
)
from .geometry import LaneGeometry
from .kinematics import build_summary, tracklet_kinematics
from .lane import ego_proxy, key_frame_geometry, score_lanes, video_px_per_meter
from .prompts import Catalog, load_catalog, run_checks
from .render import build_bundle
from .scene import ScenePriors, load_annotation
from .synth import load_truth
from .vlm import Backend, Recording, Transcript, make_backend

log = logging.getLogger(__name__)

DEFAULT_MODEL_FILE = "default_model.txt"
MODULES = ("frame", "clip", "lane", "obj", "sem", "mot")
# operand blocks and evidence bits silenced when a module is dropped
MODULE_BLOCKS = {
    "frame": (("frame_probs",), ()),
    "clip": (("clip_probs", "S_clip"), ("degraded", "C1", "C2", "C3", "C4", "C5", "C6", "C7")),
    "lane": (("s_lane",), ("center", "solid", "cross")),
    "obj": (("object_stats",), ()),
    "sem": (("semantic_stats",), ()),
    "mot": (("motion_stats",), ()),
}


def zero_model(catalog: Catalog | None = None) -> FusionModel:
    """All-zero parameters sized to the catalog; scores every video 0.5."""
    catalog = catalog or load_catalog()
    n_frame = catalog.dim("frame")
    n_clip = catalog.dim("clip") + catalog.dim("roi")
    size = operand_blocks(n_frame, n_clip)["evidence_mask"].stop
    return FusionModel(np.zeros(SLOTS + 1), np.zeros(size), {}, catalog.checksum)


def load_default_model() -> FusionModel:
    text = resources.files("adgve").joinpath("assets", DEFAULT_MODEL_FILE).read_text(encoding="utf-8")
    return FusionModel.loads(text)


@dataclass
class Scored:
    """Everything computed for one video; ``record`` is the report line."""

    record: dict
    bundle: FeatureBundle | None = None
    label: float | None = None


def _nearest_geom(geoms: Mapping[int, LaneGeometry | None], frame: int) -> LaneGeometry | None:
    usable = [f for f, g in geoms.items() if g is not None]
    if not usable:
        return None
    return geoms[min(usable, key=lambda f: (abs(f - frame), f))]


def _external_features(cfg: Mapping, video_id: str) -> dict | None:
    path = cfg["features.path"]
    if not path:
        return None
    table = json.loads(Path(path).read_text(encoding="utf-8"))
    return table.get(video_id)


def extract_features(
    priors: ScenePriors,
    cfg: Mapping,
    backend: Backend,
    catalog: Catalog,
) -> tuple[FeatureBundle, dict]:
    """Run every stage up to (not including) fusion; returns the bundle and report fields."""
    meta = priors.meta
    clips = split_clips(meta.num_frames, int(cfg["pipeline.num_clips"]))
    keys = [c.key_frame for c in clips]
    geoms = key_frame_geometry(priors, keys, cfg)
    lanes = score_lanes(priors, keys, cfg, geoms)
    lane_w, ppm = video_px_per_meter(geoms, priors, cfg)
    nominal = float(cfg["lane.nominal_width_m"])
    ego = priors.ego_track or ego_proxy(meta.width, meta.height, meta.num_frames, lane_w)
    tracks = list(priors.tracklets) + [ego]

    mid_geom = _nearest_geom(geoms, meta.num_frames // 2)
    kin_video = [tracklet_kinematics(t, meta.fps, ppm, mid_geom, nominal) for t in tracks]
    kin_clips = []
    summaries = {}
    mot_clips = []
    for c in clips:
        geom = geoms.get(c.key_frame)
        kin = []
        for t in tracks:
            part = t.within(c.start, c.end)
            if part.boxes:
                kin.append(tracklet_kinematics(part, meta.fps, ppm, geom, nominal))
        kin_clips.append(kin)
        summaries[f"frame:{c.index}"] = build_summary(priors, geom, kin, c.key_frame, cfg).rendered_text
        summaries[f"clip:{c.index}"] = build_summary(priors, geom, kin, c, cfg).rendered_text
        mot_clips.append(statistics_features(priors, geom, kin, c)[2])

    bundle_v = build_bundle(priors, clips, cfg, [{k.track_id: k for k in kin} for kin in kin_clips], catalog)
    checks = run_checks(bundle_v, summaries, backend, cfg, catalog)
    object_stats, semantic_stats, motion_stats = statistics_features(priors, mid_geom, kin_video, None)

    external = _external_features(cfg, meta.video_id)
    if external:
        object_stats = np.asarray(external.get("object_stats", object_stats), dtype=float)
        semantic_stats = np.asarray(external.get("semantic_stats", semantic_stats), dtype=float)
        motion_stats = np.asarray(external.get("motion_stats", motion_stats), dtype=float)

    bits = {
        "center": lanes.no_evidence["center"],
        "solid": lanes.no_evidence["solid"],
        "cross": lanes.no_evidence["cross"],
        "degraded": checks.degraded,
    }
    bits.update({f"C{i + 1}": flag for i, flag in enumerate(checks.no_roi)})
    mask = np.array([1.0 if bits[name] else 0.0 for name in EVIDENCE_BITS])

    bundle = FeatureBundle(
        frame_probs=checks.frame_probs,
        clip_probs=checks.clip_probs,
        s_clip=checks.s_clip,
        s_lane=lanes.s_lane,
        object_stats=object_stats,
        semantic_stats=semantic_stats,
        motion_stats=motion_stats,
        evidence_mask=mask,
        motion_stats_clips=np.array(mot_clips),
    )
    fields = {
        "d_norm": lanes.d_norm,
        "s_center": lanes.s_center,
        "s_solid": lanes.s_solid,
        "s_cross": lanes.s_cross,
        "s_lane": lanes.s_lane,
        "frame_check_mean": float(np.mean(list(checks.frame_scalars.values()))),
        "clip_check_mean": float(np.mean(list(checks.clip_scalars.values()))),
        "check_scalars": {**checks.frame_scalars, **checks.clip_scalars},
        "queries": checks.queries,
        "flags": {
            **{f"no_evidence_{k}": v for k, v in lanes.no_evidence.items()},
            "degraded": checks.degraded,
            "ego_proxy": lanes.ego_proxy,
            "derived_boundaries": lanes.derived_boundaries,
            "no_roi": [f"C{i + 1}" for i, flag in enumerate(checks.no_roi) if flag],
            "external_features": bool(external),
        },
        "violations": sorted({v[0] for v in lanes.violations}),
        "violation_count": len(lanes.violations),
    }
    return bundle, fields


def model_checksum(model: FusionModel) -> str:
    return hashlib.sha256(model.dumps().encode("utf-8")).hexdigest()


def score_priors(
    priors: ScenePriors,
    cfg: Mapping,
    model: FusionModel,
    backend: Backend,
    threshold: float,
    catalog: Catalog | None = None,
) -> Scored:
    catalog = catalog or load_catalog()
    bundle, fields = extract_features(priors, cfg, backend, catalog)
    _, pooled = attention_aggregate(bundle.clip_inputs(), bundle.s_clip, model.u)
    score = fuse(bundle, model)
    record = {
        "video_id": priors.meta.video_id,
        "status": "ok",
        **fields,
        "S_clip": pooled,
        "S_overall": score,
        "threshold": threshold,
        "decision": "keep" if score > threshold else "drop",
        "human_score": priors.human_score,
        "config_checksum": Config(dict(cfg)).checksum() if not isinstance(cfg, Config) else cfg.checksum(),
        "catalog_checksum": catalog.checksum,
        "model_checksum": model_checksum(model),
    }
    return Scored(record, bundle, priors.human_score)


def _backend_for(cfg: Mapping, path: Path, catalog: Catalog, backend_factory) -> Backend:
    if backend_factory is not None:
        return backend_factory(path)
    truth = load_truth(path) if cfg["vlm.mode"] == "oracle_stub" else None
    return make_backend(cfg, truth.violations if truth else (), catalog)


def score_video(
    path: str | Path,
    cfg: Mapping,
    model: FusionModel | None = None,
    threshold: float | None = None,
    backend_factory: Callable[[Path], Backend] | None = None,
    catalog: Catalog | None = None,
) -> Scored:
    """Score one annotation file; errors become an error record instead of propagating."""
    path = Path(path)
    catalog = catalog or load_catalog()
    model = model or load_default_model()
    threshold = float(cfg["fusion.threshold"]) if threshold is None else threshold
    try:
        priors = load_annotation(path)
        backend = _backend_for(cfg, path, catalog, backend_factory)
        return score_priors(priors, cfg, model, backend, threshold, catalog)
    except (AdgveError, OSError, ValueError) as exc:
        log.warning("%s: %s", path.name, exc)
        return Scored(
            {
                "video_id": path.stem,
                "status": "error",
                "error": f"{type(exc).__name__}: {exc}",
                "decision": "drop",
                "threshold": threshold,
            }
        )


def score_many(
    paths: Sequence[Path],
    cfg: Mapping,
    model: FusionModel | None = None,
    threshold: float | None = None,
    jobs: int = 1,
    backend_factory=None,
) -> list[Scored]:
    """Score in parallel; results come back in input order."""
    catalog = load_catalog()
    model = model or load_default_model()
    record_to = cfg["vlm.record_path"] if cfg["vlm.mode"] != "replay" else ""
    transcript = Transcript() if record_to else None
    factory = backend_factory
    if transcript is not None:

        def factory(p):
            inner = backend_factory(p) if backend_factory else _backend_for(cfg, p, catalog, None)
            return Recording(inner, transcript)

    def one(p):
        return score_video(p, cfg, model, threshold, factory, catalog)

    if jobs > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, paths))
    else:
        results = [one(p) for p in paths]
    if transcript is not None:
        transcript.save(record_to)
    return results


def report_line(record: Mapping) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=False, default=_json_default)


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(type(value).__name__)


def write_reports(scored: Sequence[Scored], path: str | Path) -> None:
    Path(path).write_text("".join(report_line(s.record) + "\n" for s in scored), encoding="utf-8")


def exit_code(scored: Sequence[Scored]) -> int:
    errors = sum(1 for s in scored if s.record["status"] != "ok")
    if scored and errors == len(scored):
        return 3
    return 2 if errors else 0


# --------------------------------------------------------------------------
# filtering


def manifest_entries(manifest: str | Path) -> list[tuple[str, Path]]:
    """(line as written, resolved path) for each manifest entry."""
    manifest = Path(manifest)
    out = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        entry = line.strip()
        if entry and not entry.startswith("#"):
            p = Path(entry)
            out.append((entry, p if p.is_absolute() else manifest.parent / p))
    return out


@dataclass
class FilterResult:
    kept: list[str]
    scored: list[Scored]
    coverage: float


def filter_manifest(
    manifest: str | Path,
    threshold: float,
    cfg: Mapping,
    model: FusionModel | None = None,
    out_dir: str | Path | None = None,
    jobs: int = 1,
    backend_factory=None,
) -> FilterResult:
    """Keep entries with ``S_overall > threshold``, in input order."""
    entries = manifest_entries(manifest)
    scored = score_many([p for _, p in entries], cfg, model, threshold, jobs, backend_factory)
    kept = [line for (line, _), s in zip(entries, scored) if s.record["decision"] == "keep"]
    coverage = len(kept) / len(entries) if entries else 0.0
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "kept_manifest.txt").write_text("".join(k + "\n" for k in kept), encoding="utf-8")
        write_reports(scored, out / "reports.jsonl")
        (out / "coverage.txt").write_text(f"kept {len(kept)} of {len(entries)} coverage {coverage!r}\n", encoding="utf-8")
    return FilterResult(kept, scored, coverage)


def coverage_at(scores: Sequence[float], threshold: float) -> float:
    if not scores:
        return 0.0
    return sum(1 for s in scores if s > threshold) / len(scores)


# --------------------------------------------------------------------------
# ablations


def drop_modules(bundle: FeatureBundle, model: FusionModel, modules: Sequence[str]) -> float:
    """Fused score with the given modules' operand blocks and evidence bits zeroed."""
    _, pooled = attention_aggregate(bundle.clip_inputs(), bundle.s_clip, model.u)
    z = bundle.operand(pooled)
    blocks = bundle.blocks()
    mask_start = blocks["evidence_mask"].start
    for m in modules:
        names, bits = MODULE_BLOCKS[m]
        for name in names:
            z[blocks[name]] = 0.0
        for bit in bits:
            z[mask_start + EVIDENCE_BITS.index(bit)] = 0.0
    return float(sigmoid(z @ model.w))


@dataclass
class AblationTable:
    coverage: list[tuple[float, float]]
    srcc: list[tuple[str, float]]

    def lines(self) -> list[str]:
        out = ["section\tkey\tvalue"]
        out += [f"coverage\t{t!r}\t{c!r}" for t, c in self.coverage]
        out += [f"srcc\t{name}\t{v!r}" for name, v in self.srcc]
        return out


def ablate(
    scored: Sequence[Scored],
    model: FusionModel,
    thresholds: Sequence[float] = (0.1, 0.2, 0.3),
    drops: Sequence[str] = MODULES + ("all",),
) -> AblationTable:
    ok = [s for s in scored if s.bundle is not None]
    scores = [fuse(s.bundle, model) for s in ok]
    coverage = [(float(t), coverage_at(scores, t)) for t in thresholds]
    labelled = [s for s in ok if s.label is not None]
    labels = [s.label for s in labelled]
    rows = []
    if len(labelled) >= 2:
        rows.append(("none", safe_srcc([fuse(s.bundle, model) for s in labelled], labels)))
        for d in drops:
            mods = MODULES if d == "all" else (d,)
            rows.append((d, safe_srcc([drop_modules(s.bundle, model, mods) for s in labelled], labels)))
    return AblationTable(coverage, rows)


# --------------------------------------------------------------------------
# reports


HIST_BINS = 10


def histogram(values: Sequence[float], bins: int = HIST_BINS) -> list[tuple[float, float, int]]:
    """Counts over equal bins of [0, 1]; the last bin is closed."""
    counts = [0] * bins
    for v in values:
        k = min(bins - 1, max(0, int(math.floor(v * bins))))
        counts[k] += 1
    return [(k / bins, (k + 1) / bins, counts[k]) for k in range(bins)]


def read_reports(path: str | Path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise EmptyInput(f"{path} has no report lines")
    return [json.loads(ln) for ln in lines]


def summarize(records: Sequence[Mapping]) -> dict:
    if not records:
        raise EmptyInput("no report lines")
    ok = [r for r in records if r.get("status") == "ok"]
    scores = [r["S_overall"] for r in ok]
    flags: dict[str, int] = {}
    for r in ok:
        for name, value in r["flags"].items():
            if name == "no_roi":
                for check in value:
                    flags[f"no_roi_{check}"] = flags.get(f"no_roi_{check}", 0) + 1
            elif value:
                flags[name] = flags.get(name, 0) + 1
        for v in r.get("violations", ()):
            flags[f"violation_{v}"] = flags.get(f"violation_{v}", 0) + 1
    summary = {
        "videos": len(records),
        "scored": len(ok),
        "errors": len(records) - len(ok),
        "kept": sum(1 for r in records if r.get("decision") == "keep"),
        "mean_S_overall": float(np.mean(scores)) if scores else None,
        "mean_s_lane": float(np.mean([r["s_lane"] for r in ok])) if ok else None,
        "flags": dict(sorted(flags.items())),
    }
    labelled = [r for r in ok if r.get("human_score") is not None]
    if len(labelled) >= 2:
        summary["srcc_vs_human"] = safe_srcc([r["S_overall"] for r in labelled], [r["human_score"] for r in labelled])
    return summary


def write_report(reports_path: str | Path, out_dir: str | Path, figures: bool = True) -> dict:
    """Summary text, tabular plot data and (optionally) PNG figures for a reports file."""
    records = read_reports(reports_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(records)
    ok = [r for r in records if r.get("status") == "ok"]
    hists = {
        "S_overall": histogram([r["S_overall"] for r in ok]),
        "s_lane": histogram([r["s_lane"] for r in ok]),
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    for name, rows in hists.items():
        text = "bin_lo\tbin_hi\tcount\n" + "".join(f"{lo!r}\t{hi!r}\t{n}\n" for lo, hi, n in rows)
        (out / f"hist_{name}.tsv").write_text(text, encoding="utf-8")
    flag_rows = "flag\tcount\n" + "".join(f"{k}\t{v}\n" for k, v in summary["flags"].items())
    (out / "flags.tsv").write_text(flag_rows, encoding="utf-8")
    if figures and ok:
        from .plots import plot_histograms, plot_scatter

        plot_histograms(hists, out / "histograms.png")
        labelled = [r for r in ok if r.get("human_score") is not None]
        if labelled:
            plot_scatter(
                [r["human_score"] for r in labelled],
                [r["S_overall"] for r in labelled],
                records[0].get("threshold", 0.2),
                out / "score_vs_label.png",
            )
    return summary
