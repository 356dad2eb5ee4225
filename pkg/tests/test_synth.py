from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adgve.clips import split_clips
from adgve.errors import SpecError
from adgve.lane import score_lanes
from adgve.scene import parse_annotation, serialize, validate_priors
from adgve.synth import (
    TAXONOMY,
    VIOLATION_CHECKS,
    VIOLATION_KINDS,
    ScenarioSpec,
    Violation,
    factor_distribution,
    fill_template,
    gen_instructions,
    gen_scenario,
    is_conflicting,
    load_truth,
    random_spec,
    write_scenario,
)


def _keys(priors):
    return [c.key_frame for c in split_clips(priors.meta.num_frames, 8)]


# --------------------------------------------------------------------------
# scenes


def test_same_seed_same_bytes(tmp_path):
    spec = random_spec(42, violated=True)
    a = write_scenario(*gen_scenario(spec), tmp_path / "a")
    b = write_scenario(*gen_scenario(spec), tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    assert load_truth(a).to_json() == load_truth(b).to_json()


def test_different_seeds_differ():
    assert serialize(gen_scenario(random_spec(1))[0]) != serialize(gen_scenario(random_spec(2))[0])


def test_solid_cross_on_chosen_segments(cfg):
    spec = ScenarioSpec(seed=0, layout="two_lane", T=11, num_vehicles=1, violations=(Violation("solid_cross", segments=(3, 7)),))
    priors, truth = gen_scenario(spec)
    scores = score_lanes(priors, _keys(priors), cfg)
    assert truth.expected["s_solid"] == pytest.approx(0.8, abs=1e-12)
    assert scores.s_solid == pytest.approx(truth.expected["s_solid"], abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_generated_scenes_are_valid(seed):
    priors, truth = gen_scenario(random_spec(seed))
    assert validate_priors(priors).ok
    back = parse_annotation(serialize(priors))
    assert serialize(back) == serialize(priors)
    assert truth.kinds() == {v.kind for v in random_spec(seed).violations}


@pytest.mark.parametrize("seed", range(500, 540))
def test_expected_scores_are_exact(cfg, seed):
    priors, truth = gen_scenario(random_spec(seed))
    scores = score_lanes(priors, _keys(priors), cfg)
    assert abs(scores.s_solid - truth.expected["s_solid"]) <= 1e-9
    assert abs(scores.s_cross - truth.expected["s_cross"]) <= 1e-9
    if truth.expected["s_center"] is not None:
        assert abs(scores.s_center - truth.expected["s_center"]) <= 1e-9


def test_every_kind_is_mapped(catalog):
    assert set(TAXONOMY) == set(VIOLATION_KINDS) == set(VIOLATION_CHECKS)
    for kind, (check_id, bad) in VIOLATION_CHECKS.items():
        spec = catalog.get(check_id)
        assert bad in spec.candidates and bad != spec.candidates[-1]


def test_random_specs_cover_every_kind():
    seen = set()
    for seed in range(200):
        seen |= random_spec(seed).kinds()
    assert seen == set(VIOLATION_KINDS)


@pytest.mark.parametrize(
    "spec",
    [
        ScenarioSpec(seed=0, layout="roundabout"),
        ScenarioSpec(seed=0, T=4),
        ScenarioSpec(seed=0, violations=(Violation("meteor"),)),
        ScenarioSpec(seed=0, layout="straight", violations=(Violation("solid_cross", segments=(1,)),)),
        ScenarioSpec(seed=0, layout="two_lane", violations=(Violation("non_yield"),)),
        ScenarioSpec(seed=0, violations=(Violation("off_center_drift", magnitude=0.9),)),
        ScenarioSpec(seed=0, violations=(Violation("jerky_ego", magnitude=5.0),)),
        ScenarioSpec(seed=0, violations=(Violation("flicker"), Violation("flicker"))),
        ScenarioSpec(seed=0, violations=(Violation("flicker", start=10, end=5),)),
        ScenarioSpec(seed=0, num_vehicles=9),
    ],
)
def test_out_of_range_specs(spec):
    with pytest.raises(SpecError):
        gen_scenario(spec)


def test_spec_from_dict():
    spec = ScenarioSpec.from_dict(
        {"seed": 3, "layout": "crosswalk", "violations": [{"kind": "non_yield", "encounters": 4, "violating": [0]}]}
    )
    _, truth = gen_scenario(spec)
    assert truth.expected["encounters"] == 4 and truth.expected["violating_encounters"] == 1
    assert truth.expected["s_cross"] == 0.75


# --------------------------------------------------------------------------
# instructions


def test_template_example():
    factors = {"E": "urban", "W": "sunny", "B": "braking", "D": "roadwork cones"}
    assert fill_template(0, factors, surface=False) == (
        "In the driver’s front–camera view of a urban under sunny, the ego vehicle braking while the scene shows roadwork cones."
    )
    assert fill_template(0, factors) == (
        "In the driver’s front–camera view of an urban street under sunny skies, the ego vehicle brakes while the scene shows roadwork cones."
    )


def test_no_duplicates():
    texts = [i.text for i in gen_instructions(150, seed=0)]
    assert len(texts) == len(set(texts)) == 150
    assert gen_instructions(150, seed=0) == gen_instructions(150, seed=0)


def test_no_conflicting_combinations():
    for ins in gen_instructions(2000, seed=1):
        assert not is_conflicting({"E": ins.E, "W": ins.W, "B": ins.B, "D": ins.D})
    assert is_conflicting({"E": "urban", "W": "night", "B": "braking", "D": "glare"})


def test_factor_histogram_matches_priors():
    # de-duplication rejects repeats of common combinations, so the sampler is measured without it
    n = 10_000
    ins = gen_instructions(n, seed=0, dedupe=False)
    for factor in "EWBD":
        values, p = factor_distribution(factor)
        counts = Counter(getattr(i, factor) for i in ins)
        for value, prob in zip(values, p):
            assert abs(counts[value] / n - prob) <= 0.02, (factor, value)


def test_prior_weights_are_three_two_one():
    values, p = factor_distribution("W")
    by = dict(zip(values, p))
    assert by["sunny"] / by["rainy"] == pytest.approx(1.5)
    assert by["rainy"] / by["snowy"] == pytest.approx(2.0)


def test_instruction_errors():
    with pytest.raises(SpecError):
        gen_instructions(0)
    with pytest.raises(SpecError):
        gen_instructions(50, seed=0, max_tries=10)
