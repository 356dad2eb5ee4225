"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import math
import time

import numpy as np
import pytest

from adgve.cli import main
from adgve.clips import split_clips
from adgve.errors import ParseError
from adgve.fusion import _pairs, _stack, attention_aggregate, loss_and_grad, srcc, train_fusion
from adgve.geometry import LaneGeometry
from adgve.lane import key_frame_geometry, lane_centering_score, lane_obedience, score_lanes
from adgve.pipeline import coverage_at, filter_manifest, load_default_model, score_many
from adgve.prompts import instantiate_prompts, parse_response
from adgve.render import clip_box, crop_roi_detail, expand_box, RasterImage
from adgve.scene import Detection, Tracklet
from adgve.synth import VIOLATION_KINDS, gen_scenario, random_spec
from conftest import write_batch
from goldens import GOLDEN_DIR, build
from oracles import brute_srcc, central_difference, oracle_s_center, oracle_s_cross, oracle_s_solid, planted_labels, random_bundle
from test_prompts import CANDIDATE_COUNTS, CATALOG_SHA256


@pytest.fixture()
def verdict(capsys, request):
    """Call with (ok, detail); prints the criterion line and fails the test when not ok."""

    def report(ok: bool, detail: str) -> None:
        name = request.node.name.replace("test_", "", 1)
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail

    return report


def test_criterion_01_lane_oracles(cfg, verdict):
    start = time.perf_counter()
    worst = 0.0
    kinds = set()
    for seed in range(200):
        spec = random_spec(seed)
        kinds |= spec.kinds()
        priors, _ = gen_scenario(spec)
        keys = [c.key_frame for c in split_clips(priors.meta.num_frames, 8)]
        geoms = key_frame_geometry(priors, keys, cfg)
        s = score_lanes(priors, keys, cfg, geoms)
        oc = oracle_s_center(priors, geoms, float(cfg["lane.alpha"]))
        if oc is None:
            assert s.no_evidence["center"]
        else:
            worst = max(worst, abs(oc[1] - s.s_center))
        worst = max(worst, abs(oracle_s_solid(priors, geoms)[0] - s.s_solid))
        worst = max(worst, abs(oracle_s_cross(priors, geoms)[0] - s.s_cross))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 30 and kinds == set(VIOLATION_KINDS)
    verdict(ok, f"max |diff| {worst:.2e} over 200 scenes, {len(kinds)}/7 kinds, {elapsed:.1f}s")


def test_criterion_02_closed_forms(verdict):
    width = 20.0
    geom = LaneGeometry(0, (((50.0, -100.0), (50.0, 200.0)),), (), width, width / 3.5)
    x = 50.0 + width * math.log(2)
    track = Tracklet(1, "vehicle", (Detection(0, x - 5, 50.0, 10.0, 10.0, "vehicle"),))
    d, s = lane_centering_score([track], {0: geom}, alpha=1.0)
    lane = lane_obedience((0.5, 1.0, 1.0), (0.4, 0.3, 0.3))
    ok = abs(d - math.log(2)) <= 1e-12 and abs(s - 0.5) <= 1e-12 and abs(lane - 0.8) <= 1e-12
    verdict(ok, f"s_center {s!r}, s_lane {lane!r}")


def test_criterion_03_attention_and_gradients(catalog, verdict):
    rng = np.random.default_rng(0)
    sum_err = 0.0
    for _ in range(1000):
        m, d = int(rng.integers(1, 12)), int(rng.integers(1, 18))
        alpha, _ = attention_aggregate(rng.normal(0, 3, (m, d)), rng.uniform(0, 1, m), rng.normal(0, 3, d))
        sum_err = max(sum_err, abs(alpha.sum() - 1.0))
    alpha, pooled = attention_aggregate(np.ones((4, 17)), [0.1, 0.4, 0.6, 0.9], rng.normal(size=17))
    uniform = bool(np.all(alpha == 0.25)) and pooled == 0.5
    grad_err = 0.0
    for seed in range(10):
        prng = np.random.default_rng(100 + seed)
        bundles = [random_bundle(prng, catalog) for _ in range(12)]
        y = prng.uniform(0, 1, 12)
        data, pairs = _stack(bundles), _pairs(y, 0.05)
        u, w = prng.normal(0, 0.5, 17), prng.normal(0, 0.1, 126)
        _, gu, gw = loss_and_grad(data, y, u, w, 1.0, pairs)
        nu = central_difference(lambda x: loss_and_grad(data, y, x, w, 1.0, pairs)[0], u)
        nw = central_difference(lambda x: loss_and_grad(data, y, u, x, 1.0, pairs)[0], w)
        a, n = np.concatenate([gu, gw]), np.concatenate([nu, nw])
        grad_err = max(grad_err, float(np.abs(a - n).max() / np.abs(n).max()))
    ok = sum_err <= 1e-12 and uniform and grad_err < 1e-4
    verdict(ok, f"max |sum alpha - 1| {sum_err:.1e}, uniform exact {uniform}, max relative grad error {grad_err:.1e}")


def test_criterion_04_planted_recovery(catalog, verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    bundles = [random_bundle(rng, catalog) for _ in range(200)]
    labels = planted_labels(bundles, rng.normal(0, 1.0, 126))
    model = train_fusion(bundles, labels, {"lr": 1.0, "epochs": 2000})
    elapsed = time.perf_counter() - start
    value = model.report["holdout_srcc"]
    verdict(value >= 0.9 and elapsed < 60, f"held-out SRCC {value:.3f} on {model.report['holdout_size']} videos, {elapsed:.1f}s")


def test_criterion_05_planted_separation(separation_batch, oracle_cfg, verdict):
    manifest, clean = separation_batch
    result = filter_manifest(manifest, 0.2, oracle_cfg, load_default_model())
    scores = [s.record["S_overall"] for s in result.scored]
    detail = f"kept {len(result.kept)}/20; max violating {max(scores[:8]):.3f}, min clean {min(scores[8:]):.3f}"
    verdict(result.kept == clean, detail)


def test_criterion_06_threshold_monotonicity(tmp_path, oracle_cfg, verdict):
    model = load_default_model()
    rows = []
    for b in range(5):
        manifest = write_batch(tmp_path / f"b{b}", [random_spec(8000 + 12 * b + i) for i in range(12)])
        scored = score_many([manifest.parent / n for n in manifest.read_text().split()], oracle_cfg, model)
        scores = [s.record["S_overall"] for s in scored]
        rows.append([coverage_at(scores, t) for t in (0.1, 0.2, 0.3)])
    ok = all(r[0] >= r[1] >= r[2] for r in rows)
    verdict(ok, "coverage at 0.1/0.2/0.3: " + "; ".join("/".join(f"{c:.2f}" for c in r) for r in rows))


def test_criterion_07_catalog_fidelity(catalog, verdict):
    counts = {c.check_id: len(c.candidates) for c in catalog.checks} == CANDIDATE_COUNTS
    a1 = catalog.get("A1").template == "This is a [ANSWER] driving image."
    prefix = catalog.global_instruction.startswith("You are a careful driving-scene evaluator")
    prompt = instantiate_prompts(catalog.get("A1"), "s", catalog)[-1][1]
    filled = prompt.endswith("This is a well-exposed driving image.")
    parsed = parse_response("{'answer': Yes, 'confidence': 0.85}")
    accepts = (parsed.answer, parsed.confidence) == ("yes", 0.85)
    try:
        parse_response("I cannot decide.")
        rejects = False
    except ParseError:
        rejects = True
    checksum = catalog.checksum == CATALOG_SHA256
    ok = counts and a1 and prefix and filled and accepts and rejects and checksum
    verdict(ok, f"20 checks {counts}, templates {a1 and filled}, instruction {prefix}, checksum {checksum}, parser {accepts and rejects}")


def test_criterion_08_srcc(verdict):
    rng = np.random.default_rng(0)
    worst, checked = 0.0, 0
    while checked < 1000:
        n = int(rng.integers(2, 40))
        a = rng.integers(0, 8, n).astype(float)
        b = rng.integers(0, 8, n).astype(float)
        if len(set(a)) < 2 or len(set(b)) < 2:
            continue
        worst = max(worst, abs(srcc(a, b) - brute_srcc(a, b)))
        checked += 1
    v = rng.normal(size=50)
    reversed_ok = srcc(np.arange(10), np.arange(10)[::-1]) == -1.0
    verdict(worst <= 1e-12 and reversed_ok, f"max |diff| {worst:.1e} over 1000 vectors with ties, reversed exact {reversed_ok}")


def test_criterion_09_determinism(tmp_path, verdict):
    out = tmp_path / "scenes"
    assert main(["gen-synthetic", "--count", "5", "--seed", "600", "--out", str(out)]) == 0
    files = [str(out / n) for n in (out / "manifest.txt").read_text().split()]
    runs = []
    for i in range(2):
        assert main(["score", *files, "--vlm-mode", "oracle_stub", "--out", str(tmp_path / f"o{i}.jsonl")]) == 0
        assert main(["score", *files, "--seed", "4", "--record", str(tmp_path / f"t{i}.jsonl"), "--out", str(tmp_path / f"h{i}.jsonl")]) == 0
    for i in range(2):
        replay = ["score", *files, "--seed", "4", "--vlm-mode", "replay", "--transcript", str(tmp_path / "t0.jsonl")]
        assert main([*replay, "--out", str(tmp_path / f"r{i}.jsonl")]) == 0
    for stem in ("o", "h", "t", "r"):
        runs.append((tmp_path / f"{stem}0.jsonl").read_bytes() == (tmp_path / f"{stem}1.jsonl").read_bytes())
    verdict(all(runs), f"identical report files: oracle {runs[0]}, hash stub {runs[1]}, transcript {runs[2]}, replay {runs[3]}")


def test_criterion_10_rendering(verdict):
    expand = expand_box((10, 10, 20, 20), 0.25) == (5.0, 5.0, 30.0, 30.0)
    clipped = clip_box(expand_box((0, 0, 10, 10), 0.25), 100, 100) == (0.0, 0.0, 12.5, 12.5)
    crop = crop_roi_detail(RasterImage.blank(100, 100, (200, 200, 200)), (20, 20, 40, 40), 0.0, (200, 100))
    lit = np.flatnonzero(crop.image.pixels.any(axis=2).any(axis=0))
    bars = abs(int(lit[0]) - (199 - int(lit[-1]))) <= 1
    fresh = build()
    golden = all(fresh[n] == (GOLDEN_DIR / n).read_bytes() for n in ("key_boxed.ppm", "renders.sha256"))
    ok = expand and clipped and bars and golden
    verdict(ok, f"expand {expand}, clip {clipped}, letterbox bars {bars}, golden renders {golden}")
