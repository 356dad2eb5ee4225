import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adgve.errors import DegenerateInput, DimensionError, InsufficientData, NonFiniteLoss, SchemaError
from adgve.fusion import (
    FeatureBundle,
    FusionModel,
    _pairs,
    _stack,
    attention_aggregate,
    fuse,
    loss_and_grad,
    operand_blocks,
    sigmoid,
    srcc,
    statistics_features,
    train_fusion,
)
from adgve.scene import parse_annotation
from conftest import doc_bytes, minimal_doc
from oracles import brute_srcc, central_difference, planted_labels, random_bundle

OPERAND = 126


def _zero_model(u_dim=17, w=None):
    return FusionModel(np.zeros(u_dim), np.zeros(OPERAND) if w is None else w)


# --------------------------------------------------------------------------
# statistics descriptors


def test_empty_scene_descriptors(catalog):
    priors = parse_annotation(doc_bytes(minimal_doc(tracks=[])))
    obj, sem, mot = statistics_features(priors, None, [], None)
    slots = catalog.feature_slots["object_stats"]
    for name in ("count_vehicle", "count_pedestrian", "count_cyclist", "area_mean", "conf_mean", "count_total"):
        assert obj[slots.index(name)] == 0.0
    assert not sem.any() and not mot.any()
    assert obj.shape == sem.shape == mot.shape == (16,)


def test_area_mean_slot(catalog):
    # 20 x 16 box on a 100 x 80 image covers 4%
    doc = minimal_doc()
    doc["tracks"][0]["boxes"][0].update(w=20, h=16)
    obj, _, _ = statistics_features(parse_annotation(doc_bytes(doc)), None, [], None)
    assert obj[catalog.feature_slots["object_stats"].index("area_mean")] == pytest.approx(0.04, abs=1e-12)
    assert obj[catalog.feature_slots["object_stats"].index("conf_mean")] == 1.0


def test_slot_maps_are_sixteen_wide(catalog):
    for name in ("object_stats", "semantic_stats", "motion_stats"):
        assert len(catalog.feature_slots[name]) == 16


# --------------------------------------------------------------------------
# attention


def test_attention_identical_inputs_is_uniform():
    r = np.tile([0.3, -1.2, 2.0], (4, 1))
    alpha, pooled = attention_aggregate(r, [0.1, 0.2, 0.3, 0.8], np.array([0.5, 1.0, -2.0]))
    np.testing.assert_array_equal(alpha, np.full(4, 0.25))
    assert pooled == pytest.approx(0.35, abs=1e-15)


def test_attention_zero_u_is_uniform():
    rng = np.random.default_rng(0)
    alpha, _ = attention_aggregate(rng.normal(size=(5, 3)), rng.uniform(size=5), np.zeros(3))
    np.testing.assert_array_equal(alpha, np.full(5, 0.2))


def test_attention_two_clip_example():
    alpha, pooled = attention_aggregate(np.array([[0.0], [math.log(3)]]), [0.0, 1.0], np.array([1.0]))
    np.testing.assert_allclose(alpha, [0.25, 0.75], atol=1e-15)
    assert pooled == pytest.approx(0.75, abs=1e-15)


def test_attention_dimension_errors():
    with pytest.raises(DimensionError):
        attention_aggregate(np.zeros((3, 2)), [0, 0, 0], np.zeros(3))
    with pytest.raises(DimensionError):
        attention_aggregate(np.zeros((3, 2)), [0, 0], np.zeros(2))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10), st.integers(1, 5), st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_attention_sums_to_one_and_is_shift_invariant(m, d, seed, shift):
    rng = np.random.default_rng(seed)
    r = rng.normal(0, 5, (m, d))
    u = rng.normal(0, 5, d)
    s = rng.uniform(0, 1, m)
    alpha, pooled = attention_aggregate(r, s, u)
    assert abs(alpha.sum() - 1.0) <= 1e-12 and (alpha > 0).all()
    assert s.min() - 1e-12 <= pooled <= s.max() + 1e-12
    # adding a constant logit to every clip leaves the weights unchanged
    k = int(np.argmax(np.abs(u)))
    moved = r.copy()
    moved[:, k] += shift / u[k]
    np.testing.assert_allclose(attention_aggregate(moved, s, u)[0], alpha, atol=1e-9)


# --------------------------------------------------------------------------
# fusion


def test_operand_layout():
    blocks = operand_blocks(23, 42)
    assert [(k, v.start, v.stop) for k, v in blocks.items()] == [
        ("frame_probs", 0, 23), ("clip_probs", 23, 65), ("S_clip", 65, 66), ("s_lane", 66, 67),
        ("object_stats", 67, 83), ("semantic_stats", 83, 99), ("motion_stats", 99, 115), ("evidence_mask", 115, 126),
    ]


def test_zero_weights_give_one_half(catalog):
    bundle = random_bundle(np.random.default_rng(0), catalog)
    assert fuse(bundle, _zero_model()) == 0.5


def test_fuse_monotone_in_positive_weight(catalog):
    bundle = random_bundle(np.random.default_rng(1), catalog)
    bundle.s_lane = 1.0
    slot = bundle.blocks()["s_lane"].start
    prev = -1.0
    for weight in (0.0, 0.5, 1.0, 2.0, 4.0):
        w = np.zeros(OPERAND)
        w[slot] = weight
        value = fuse(bundle, _zero_model(w=w))
        assert value > prev
        prev = value


def test_fuse_dimension_error(catalog):
    bundle = random_bundle(np.random.default_rng(2), catalog)
    with pytest.raises(DimensionError):
        fuse(bundle, FusionModel(np.zeros(17), np.zeros(OPERAND - 1)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, OPERAND - 1), st.floats(0.01, 3.0))
def test_fuse_strictly_monotone_in_operand(catalog, seed, slot, weight):
    rng = np.random.default_rng(seed)
    bundle = random_bundle(rng, catalog)
    if slot == bundle.blocks()["S_clip"].start:
        return  # pooled clip score is not a free entry
    w = rng.normal(0, 0.3, OPERAND)
    w[slot] = weight
    model = FusionModel(rng.normal(0, 0.3, 17), w)
    base = fuse(bundle, model)
    z = bundle.operand(0.0)
    if abs(z @ w) > 30:
        return  # saturated in double precision
    name = next(k for k, v in bundle.blocks().items() if v.start <= slot < v.stop)
    bumped = FeatureBundle(**{k: (np.array(v, copy=True) if isinstance(v, np.ndarray) else v) for k, v in bundle.__dict__.items()})
    if name == "s_lane":
        bumped.s_lane += 0.1
    else:
        getattr(bumped, name)[slot - bundle.blocks()[name].start] += 0.1
    assert fuse(bumped, model) > base


def test_sigmoid_reparameterization_preserves_decisions(catalog):
    rng = np.random.default_rng(3)
    scores = [fuse(random_bundle(rng, catalog), FusionModel(rng.normal(0, 0.2, 17), rng.normal(0, 0.2, OPERAND))) for _ in range(30)]
    tau = 0.5
    logit = lambda p: math.log(p / (1 - p))  # noqa: E731
    assert [s > tau for s in scores] == [logit(s) > logit(tau) for s in scores]


def test_model_roundtrip(tmp_path, catalog):
    rng = np.random.default_rng(4)
    model = FusionModel(rng.normal(size=17), rng.normal(size=OPERAND), {"lr": 0.5, "epochs": 3}, catalog.checksum, {"final_loss": 0.25})
    path = tmp_path / "m.txt"
    model.save(path)
    back = FusionModel.load(path)
    assert back.u.tobytes() == model.u.tobytes() and back.w.tobytes() == model.w.tobytes()
    assert back.hyper == model.hyper and back.report == model.report and back.catalog_checksum == catalog.checksum
    assert back.dumps() == model.dumps()
    with pytest.raises(SchemaError):
        FusionModel.loads("not a model\n")


def test_bundle_dict_roundtrip(catalog):
    bundle = random_bundle(np.random.default_rng(5), catalog)
    back = FeatureBundle.from_dict(bundle.to_dict())
    assert back.operand(0.3).tobytes() == bundle.operand(0.3).tobytes()


# --------------------------------------------------------------------------
# training


def _objective(catalog, seed, n=12):
    rng = np.random.default_rng(seed)
    bundles = [random_bundle(rng, catalog) for _ in range(n)]
    y = rng.uniform(0, 1, n)
    data = _stack(bundles)
    pairs = _pairs(y, 0.05)
    u = rng.normal(0, 0.5, 17)
    w = rng.normal(0, 0.1, OPERAND)
    return data, y, u, w, pairs


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(catalog, seed):
    data, y, u, w, pairs = _objective(catalog, seed)
    _, gu, gw = loss_and_grad(data, y, u, w, 1.0, pairs)
    nu = central_difference(lambda x: loss_and_grad(data, y, x, w, 1.0, pairs)[0], u)
    nw = central_difference(lambda x: loss_and_grad(data, y, u, x, 1.0, pairs)[0], w)
    analytic = np.concatenate([gu, gw])
    numeric = np.concatenate([nu, nw])
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric).max(), 1e-12)
    assert rel.max() < 1e-4


def test_constant_labels_without_ranking(catalog):
    rng = np.random.default_rng(6)
    bundles = [random_bundle(rng, catalog) for _ in range(20)]
    model = train_fusion(bundles, [0.5] * 20, {"rank_weight": 0.0, "lr": 0.05, "epochs": 300, "holdout": 0.0})
    mae = np.mean([abs(fuse(b, model) - 0.5) for b in bundles])
    assert mae < 0.05


def test_training_is_deterministic(catalog):
    rng = np.random.default_rng(7)
    bundles = [random_bundle(rng, catalog) for _ in range(30)]
    y = rng.uniform(0, 1, 30)
    a = train_fusion(bundles, y, {"epochs": 50, "lr": 0.5})
    b = train_fusion(bundles, y, {"epochs": 50, "lr": 0.5})
    assert a.u.tobytes() == b.u.tobytes() and a.w.tobytes() == b.w.tobytes()
    assert a.dumps() == b.dumps()


def test_planted_recovery(catalog):
    rng = np.random.default_rng(8)
    bundles = [random_bundle(rng, catalog) for _ in range(200)]
    w_star = rng.normal(0, 1.0, OPERAND)
    y = planted_labels(bundles, w_star)
    model = train_fusion(bundles, y, {"lr": 1.0, "epochs": 2000}, catalog.checksum)
    assert model.report["holdout_size"] == 40
    assert model.report["holdout_srcc"] >= 0.9


def test_training_errors(catalog):
    rng = np.random.default_rng(9)
    bundles = [random_bundle(rng, catalog) for _ in range(4)]
    with pytest.raises(InsufficientData):
        train_fusion(bundles[:1], [0.5])
    with pytest.raises(InsufficientData):
        train_fusion(bundles, [0.1, 0.2, 1.5, 0.3])
    with pytest.raises(NonFiniteLoss):
        train_fusion(bundles, [0.1, 0.9, 0.2, 0.8], {"lr": float("inf"), "epochs": 3, "holdout": 0.0})


# --------------------------------------------------------------------------
# rank correlation


def test_srcc_examples():
    assert srcc([1, 2, 3, 4, 5], [1, 3, 2, 5, 4]) == pytest.approx(0.8, abs=1e-12)
    assert srcc([1, 2, 3], [10, 20, 30]) == 1.0
    assert srcc([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0


def test_srcc_degenerate():
    with pytest.raises(DegenerateInput) as exc:
        srcc([1, 1, 1], [1, 2, 3])
    assert exc.value.value == 0.0
    with pytest.raises(DimensionError):
        srcc([1], [1])


def test_srcc_matches_brute_force_with_ties():
    rng = np.random.default_rng(10)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        a = rng.integers(0, 6, n).astype(float)
        b = rng.integers(0, 6, n).astype(float)
        if len(set(a)) < 2 or len(set(b)) < 2:
            continue
        assert abs(srcc(a, b) - brute_srcc(a, b)) <= 1e-12
        assert srcc(a, -a) == -1.0
