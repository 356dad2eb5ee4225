"""Feature pooling, clip attention, logistic score fusion, training and rank correlation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .clips import ClipRange
from .errors import DegenerateInput, DimensionError, InsufficientData, NonFiniteLoss, SchemaError
from .geometry import LaneGeometry, polyline_length
from .kinematics import Kinematics
from .render import polygon_mask
from .scene import MASK_CLASSES, ScenePriors

SLOTS = 16
EVIDENCE_BITS = ("center", "solid", "cross", "degraded", "C1", "C2", "C3", "C4", "C5", "C6", "C7")
MODEL_HEADER = "adgve-fusion 1"


# --------------------------------------------------------------------------
# statistics descriptors


def _pad(values: Sequence[float]) -> np.ndarray:
    out = np.zeros(SLOTS)
    out[: len(values)] = values
    return out


def _mean_var(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return 0.0, 0.0
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.var())


def _scope_frames(priors: ScenePriors, scope) -> list[int]:
    if scope is None:
        return list(range(priors.meta.num_frames))
    if isinstance(scope, ClipRange):
        return list(scope.frames())
    return [int(scope)]


def _key_frame(priors: ScenePriors, scope) -> int:
    if scope is None:
        return priors.meta.num_frames // 2
    if isinstance(scope, ClipRange):
        return scope.key_frame
    return int(scope)


def _iou_positive(a, b) -> bool:
    return a.x < b.x + b.w and b.x < a.x + a.w and a.y < b.y + b.h and b.y < a.y + a.h


def object_features(priors: ScenePriors, scope=None) -> np.ndarray:
    meta = priors.meta
    image_area = float(meta.width * meta.height)
    frames = set(_scope_frames(priors, scope))
    per_frame: dict[int, list] = {}
    for t in priors.tracklets:
        for b in t.boxes:
            if b.frame in frames:
                per_frame.setdefault(b.frame, []).append(b)
    boxes = [b for f in sorted(per_frame) for b in per_frame[f]]
    if not boxes:
        return np.zeros(SLOTS)
    n_frames = max(1, len(frames))
    counts = [sum(1 for b in boxes if b.cls == c) / n_frames / 10.0 for c in ("vehicle", "pedestrian", "cyclist")]
    area_mean, area_var = _mean_var([b.area / image_area for b in boxes])
    conf_mean = float(np.mean([b.conf for b in boxes]))
    aspect_mean = float(np.mean([b.w / b.h for b in boxes]))
    overlapping = 0
    for group in per_frame.values():
        for i, a in enumerate(group):
            if any(_iou_positive(a, b) for j, b in enumerate(group) if j != i):
                overlapping += 1
    return _pad(
        counts + [area_mean, area_var, conf_mean, aspect_mean, overlapping / len(boxes), len(boxes) / n_frames / 10.0]
    )


def semantic_features(priors: ScenePriors, geom: LaneGeometry | None, scope=None) -> np.ndarray:
    meta = priors.meta
    frame = _key_frame(priors, scope)
    areas = []
    lanes = 0
    for cls in MASK_CLASSES:
        union = np.zeros((meta.height, meta.width), dtype=bool)
        for m in priors.masks:
            if m.cls != cls:
                continue
            poly = m.polygon_at(frame)
            if poly is not None:
                union |= polygon_mask(poly, meta.width, meta.height)
                lanes += cls in ("ego_lane", "other_lane")
        areas.append(float(union.mean()))
    boundaries = geom.boundaries if geom is not None else ()
    length = sum(polyline_length(line) for line, _ in boundaries)
    solid = sum(1 for _, style in boundaries if style != "dashed")
    derived = 1.0 if geom is not None and geom.derived_boundaries else 0.0
    return _pad(
        areas
        + [
            length / (meta.width + meta.height) / 4.0,
            lanes / 4.0,
            solid / len(boundaries) if boundaries else 0.0,
            derived,
        ]
    )


def motion_features(kin: Sequence[Kinematics], num_frames: int, lengths: Mapping[int, int] | None = None) -> np.ndarray:
    """Heavy-tailed magnitudes enter as ``log1p`` so a single teleport cannot dominate."""
    agents = [k for k in kin if k.track_id >= 0 and not k.single_sample]
    ego = next((k for k in kin if k.track_id < 0), None)
    speed = _mean_var([math.log1p(k.mean_speed) for k in agents])
    heading = _mean_var([math.log1p(k.max_heading_change) for k in agents])
    drift = _mean_var([math.log1p(abs(k.lateral_drift)) for k in agents])
    rough = _mean_var([math.log1p(k.smoothness) for k in agents])
    lengths = lengths or {}
    length = _mean_var([lengths.get(k.track_id, 0) / max(1, num_frames) for k in kin if k.track_id >= 0])
    moving = [k.mean_speed >= 0.5 for k in agents]
    ego_vals = [0.0, 0.0, 0.0]
    if ego is not None and not ego.single_sample:
        ego_vals = [math.log1p(ego.mean_speed), math.log1p(abs(ego.lateral_drift)), math.log1p(ego.smoothness)]
    return _pad(
        [*speed, *heading, *drift, *rough, *length, float(np.mean(moving)) if moving else 0.0, *ego_vals]
    )


def statistics_features(
    priors: ScenePriors,
    geom: LaneGeometry | None,
    kin: Sequence[Kinematics],
    scope=None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(object_stats, semantic_stats, motion_stats) for a frame, a ClipRange, or the whole video (``None``)."""
    frames = set(_scope_frames(priors, scope))
    lengths = {t.track_id: sum(1 for b in t.boxes if b.frame in frames) for t in priors.tracklets}
    return (
        object_features(priors, scope),
        semantic_features(priors, geom, scope),
        motion_features(kin, len(frames), lengths),
    )


# --------------------------------------------------------------------------
# bundle, attention and fusion


@dataclass
class FeatureBundle:
    frame_probs: np.ndarray
    clip_probs: np.ndarray
    s_clip: np.ndarray  # (M,)
    s_lane: float
    object_stats: np.ndarray
    semantic_stats: np.ndarray
    motion_stats: np.ndarray
    evidence_mask: np.ndarray
    motion_stats_clips: np.ndarray  # (M, 16), per-clip motion descriptors for attention

    def clip_inputs(self) -> np.ndarray:
        """Attention inputs r_m = [motion_stats^m, s_clip^m], shape (M, 17)."""
        return np.column_stack([self.motion_stats_clips, self.s_clip])

    def operand(self, s_clip_pooled: float) -> np.ndarray:
        return np.concatenate(
            [
                self.frame_probs,
                self.clip_probs,
                [s_clip_pooled, self.s_lane],
                self.object_stats,
                self.semantic_stats,
                self.motion_stats,
                self.evidence_mask,
            ]
        )

    def blocks(self) -> dict[str, slice]:
        return operand_blocks(len(self.frame_probs), len(self.clip_probs), len(self.evidence_mask))

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() if not isinstance(v, float) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureBundle":
        return cls(
            **{k: (float(v) if k == "s_lane" else np.asarray(v, dtype=float)) for k, v in d.items()}
        )


def operand_blocks(n_frame: int, n_clip: int, n_mask: int = len(EVIDENCE_BITS)) -> dict[str, slice]:
    sizes = [
        ("frame_probs", n_frame),
        ("clip_probs", n_clip),
        ("S_clip", 1),
        ("s_lane", 1),
        ("object_stats", SLOTS),
        ("semantic_stats", SLOTS),
        ("motion_stats", SLOTS),
        ("evidence_mask", n_mask),
    ]
    out, start = {}, 0
    for name, size in sizes:
        out[name] = slice(start, start + size)
        start += size
    return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def attention_aggregate(r: np.ndarray, s_clip: Sequence[float], u: np.ndarray) -> tuple[np.ndarray, float]:
    """Softmax weights over clips from ``u . r_m`` and the weighted clip score."""
    r = np.atleast_2d(np.asarray(r, dtype=float))
    s = np.asarray(s_clip, dtype=float)
    u = np.asarray(u, dtype=float)
    if r.shape[0] < 1 or r.shape[0] != len(s) or r.shape[1] != len(u):
        raise DimensionError(f"r {r.shape}, s_clip {s.shape}, u {u.shape} are inconsistent")
    alpha = _softmax(r @ u)
    return alpha, float(alpha @ s)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass
class FusionModel:
    u: np.ndarray
    w: np.ndarray
    hyper: dict = field(default_factory=dict)
    catalog_checksum: str = ""
    report: dict = field(default_factory=dict)

    def dumps(self) -> str:
        lines = [MODEL_HEADER, f"catalog {self.catalog_checksum or '-'}"]
        for k in sorted(self.hyper):
            lines.append(f"hyper.{k} {self.hyper[k]!r}")
        for k in sorted(self.report):
            lines.append(f"report.{k} {self.report[k]!r}")
        lines.append("u " + " ".join(repr(float(v)) for v in self.u))
        lines.append("w " + " ".join(repr(float(v)) for v in self.w))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "FusionModel":
        lines = text.splitlines()
        if not lines or lines[0].strip() != MODEL_HEADER:
            raise SchemaError("model", f"expected header {MODEL_HEADER!r}")
        u = w = None
        hyper, report = {}, {}
        checksum = ""
        for line in lines[1:]:
            if not line.strip():
                continue
            key, _, rest = line.partition(" ")
            if key == "catalog":
                checksum = "" if rest == "-" else rest
            elif key == "u":
                u = np.array([float(v) for v in rest.split()])
            elif key == "w":
                w = np.array([float(v) for v in rest.split()])
            elif key.startswith("hyper."):
                hyper[key[6:]] = _literal(rest)
            elif key.startswith("report."):
                report[key[7:]] = _literal(rest)
            else:
                raise SchemaError("model", f"unknown line {key!r}")
        if u is None or w is None:
            raise SchemaError("model", "missing u or w")
        return cls(u, w, hyper, checksum, report)

    @classmethod
    def load(cls, path: str | Path) -> "FusionModel":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _literal(text: str):
    if text == "None":
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip("'\"")


def fuse(bundle: FeatureBundle, model: FusionModel) -> float:
    _, pooled = attention_aggregate(bundle.clip_inputs(), bundle.s_clip, model.u)
    z = bundle.operand(pooled)
    if len(z) != len(model.w):
        raise DimensionError(f"operand has {len(z)} entries, model expects {len(model.w)}")
    return float(sigmoid(z @ model.w))


# --------------------------------------------------------------------------
# training


@dataclass
class _Stacked:
    R: np.ndarray  # (n, M, d)
    S: np.ndarray  # (n, M)
    Z: np.ndarray  # (n, D) with the pooled-clip slot left at 0
    slot: int


def _stack(bundles: Sequence[FeatureBundle]) -> _Stacked:
    try:
        R = np.stack([b.clip_inputs() for b in bundles])
        S = np.stack([np.asarray(b.s_clip, dtype=float) for b in bundles])
        Z = np.stack([b.operand(0.0) for b in bundles])
    except ValueError as exc:
        raise DimensionError("bundles differ in clip count or feature layout") from exc
    slot = bundles[0].blocks()["S_clip"].start
    return _Stacked(R, S, Z, slot)


def _pairs(y: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    diff = y[:, None] - y[None, :]
    i, j = np.nonzero(diff > margin)
    return i, j


def _forward(data: _Stacked, u: np.ndarray, w: np.ndarray):
    alpha = _softmax(data.R @ u)  # (n, M)
    pooled = (alpha * data.S).sum(axis=1)
    Z = data.Z.copy()
    Z[:, data.slot] = pooled
    scores = sigmoid(Z @ w)
    return alpha, pooled, Z, scores


def loss_and_grad(
    data: _Stacked,
    y: np.ndarray,
    u: np.ndarray,
    w: np.ndarray,
    rank_weight: float,
    pairs: tuple[np.ndarray, np.ndarray],
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean absolute error plus ``rank_weight`` times the mean pairwise logistic loss, with gradients."""
    n = len(y)
    alpha, pooled, Z, scores = _forward(data, u, w)
    resid = scores - y
    loss = float(np.abs(resid).mean())
    d_scores = np.sign(resid) / n
    i, j = pairs
    if rank_weight and len(i):
        margin = scores[i] - scores[j]
        loss += rank_weight * float(np.logaddexp(0.0, -margin).mean())
        coef = -rank_weight * sigmoid(-margin) / len(i)
        np.add.at(d_scores, i, coef)
        np.add.at(d_scores, j, -coef)
    d_logit = d_scores * scores * (1.0 - scores)
    grad_w = Z.T @ d_logit
    # d pooled / d u = sum_m alpha_m (s_m - pooled) r_m
    d_pooled = d_logit * w[data.slot]
    weights = alpha * (data.S - pooled[:, None])  # (n, M)
    grad_u = np.einsum("n,nm,nmd->d", d_pooled, weights, data.R)
    return loss, grad_u, grad_w


def srcc(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman correlation: Pearson correlation of mid-ranks."""
    if len(a) != len(b) or len(a) < 2:
        raise DimensionError("srcc needs two sequences of equal length >= 2")
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    ca = ra - ra.mean()
    cb = rb - rb.mean()
    saa = math.fsum(ca * ca)
    sbb = math.fsum(cb * cb)
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateInput("srcc is undefined for a constant sequence")
    return max(-1.0, min(1.0, math.fsum(ca * cb) / math.sqrt(saa * sbb)))


def safe_srcc(a, b) -> float:
    try:
        return srcc(a, b)
    except DegenerateInput as exc:
        return exc.value


DEFAULT_HYPER = {"lr": 0.01, "epochs": 2000, "rank_weight": 1.0, "pair_margin": 0.05, "holdout": 0.2, "seed": 0}


def train_fusion(
    bundles: Sequence[FeatureBundle],
    labels: Sequence[float],
    hyper: Mapping | None = None,
    catalog_checksum: str = "",
) -> FusionModel:
    """Full-batch gradient descent on MAE plus a pairwise ranking loss.

    A seeded ``holdout`` fraction is kept aside (when at least two videos
    remain on each side) and reported as held-out SRCC.
    """
    h = dict(DEFAULT_HYPER)
    h.update(hyper or {})
    y = np.asarray(labels, dtype=float)
    if len(bundles) != len(y) or len(y) < 2:
        raise InsufficientData("need at least two labelled videos")
    if np.any((y < 0) | (y > 1)) or not np.all(np.isfinite(y)):
        raise InsufficientData("labels must lie in [0, 1]")
    rng = np.random.default_rng(int(h["seed"]))
    order = rng.permutation(len(y))
    n_hold = int(round(float(h["holdout"]) * len(y)))
    if n_hold < 2 or len(y) - n_hold < 2:
        n_hold = 0
    hold, train = np.sort(order[:n_hold]), np.sort(order[n_hold:])

    data = _stack([bundles[i] for i in train])
    y_train = y[train]
    pairs = _pairs(y_train, float(h["pair_margin"]))
    dim_u = data.R.shape[2]
    u = np.zeros(dim_u)
    w = rng.normal(0.0, 0.01, data.Z.shape[1])
    lr = float(h["lr"])
    loss = math.nan
    # divergence is detected below, so numpy's own overflow warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(int(h["epochs"])):
            loss, gu, gw = loss_and_grad(data, y_train, u, w, float(h["rank_weight"]), pairs)
            bad = not (math.isfinite(loss) and np.all(np.isfinite(gu)) and np.all(np.isfinite(gw)))
            if bad or not (np.all(np.isfinite(u)) and np.all(np.isfinite(w))):
                raise NonFiniteLoss(f"loss diverged ({loss}); lower the learning rate (now {lr})")
            u -= lr * gu
            w -= lr * gw
    with np.errstate(over="ignore", invalid="ignore"):
        final, _, _ = loss_and_grad(data, y_train, u, w, float(h["rank_weight"]), pairs)
    if not math.isfinite(final):
        raise NonFiniteLoss(f"loss diverged ({final}); lower the learning rate (now {lr})")
    model = FusionModel(u, w, h, catalog_checksum)
    report = {"final_loss": final, "train_size": int(len(train)), "holdout_size": int(n_hold)}
    if n_hold:
        preds = [fuse(bundles[i], model) for i in hold]
        report["holdout_srcc"] = safe_srcc(preds, y[hold])
    model.report = report
    return model
