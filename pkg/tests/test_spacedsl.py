import json

import numpy as np
import pytest

from treebo import spacedsl
from treebo.spacedsl import (
    SpaceError,
    deserialize_config,
    load_builtin_space,
    parse_space,
    sample,
    serialize_config,
)


@pytest.fixture(scope="module")
def spaces():
    return {
        name: load_builtin_space(name)
        for name in ("simulation", "simulation_bench", "svm", "xgboost", "cash", "nas")
    }


def test_fixture_subspace_counts(spaces):
    assert len(spaces["simulation"].subspaces) == 4
    assert len(spaces["svm"].subspaces) == 4
    assert len(spaces["xgboost"].subspaces) == 2
    assert len(spaces["cash"].subspaces) == 6


def test_svm_dimensions(spaces):
    dims = {tuple(s.decisions.values())[0]: s.dimension for s in spaces["svm"].subspaces}
    assert dims == {"linear": 2, "poly": 4, "sigmoid": 3, "rbf": 3}


def test_xgboost_dimensions(spaces):
    dims = sorted(s.dimension for s in spaces["xgboost"].subspaces)
    assert dims == [3, 10]


def test_nas_structural_subspaces(spaces):
    nas = spaces["nas"]
    assert [s.decisions["nums_block"] for s in nas.subspaces] == [4, 5, 6, 7]
    assert [s.dimension for s in nas.subspaces] == [29, 35, 41, 47]
    # replicated per-block slots carry indices 1..L
    sub = nas.subspaces[0]
    conv_idx = [s.index for s in sub.slots if s.name == "conv_op"]
    assert conv_idx == [1, 2, 3, 4]


def test_int_range_right_open():
    space = parse_space("x1:\n  type: int\n  range: [0...2]\n")
    spec = space.roots[0]
    assert spec.admissible_values() == [0, 1]


def test_identity_codes_bijection(spaces):
    for space in spaces.values():
        codes = sorted(space.id_codes.values())
        assert codes == list(range(1, space.n_names + 1))


def test_identity_codes_stable_across_reparses(spaces):
    again = parse_space(spaces["cash"].source_text)
    assert again.id_codes == spaces["cash"].id_codes


def test_shared_names_share_codes(spaces):
    svm = spaces["svm"]
    gammas = [
        (sub.id, slot)
        for sub in svm.subspaces
        for slot in sub.slots
        if slot.name == "gamma"
    ]
    assert len(gammas) == 3
    codes = {svm.id_codes[slot.name] for _, slot in gammas}
    assert len(codes) == 1


def test_father_rule_simulation(spaces):
    sim = spaces["simulation"]
    sub = sim.subspaces[0]  # x1=0, x2=0
    fathers = {s.name: s.father_name for s in sub.slots}
    assert fathers == {"x1": None, "r8": "x1", "x2": "x1", "x4": "x2"}
    codes = dict(zip([s.name for s in sub.slots], sub.father_codes.tolist()))
    assert codes["x1"] == 0
    assert codes["r8"] == sim.id_codes["x1"]
    assert codes["x4"] == sim.id_codes["x2"]


def test_single_flat_space_one_subspace():
    space = parse_space("a:\n  type: float\n  range: [0...1]\nb:\n  type: int\n  range: [0...5]\n")
    assert len(space.subspaces) == 1
    assert space.subspaces[0].dimension == 2


def test_sample_deterministic(spaces):
    a = sample(spaces["cash"], 3, 123)
    b = sample(spaces["cash"], 3, 123)
    assert a == b
    c = sample(spaces["cash"], 3, 124)
    assert c != a


def test_sample_dimension_matches_subspace(spaces):
    rng = np.random.default_rng(0)
    for space in spaces.values():
        for sub in space.subspaces:
            cfg = sample(space, sub.id, int(rng.integers(2**31)))
            assert len(cfg.tokens) == sub.dimension
            assert set(cfg.raw) == {s.key for s in sub.slots}


def test_sample_float_uniform_mean():
    space = parse_space("u:\n  type: float\n  range: [0...1]\n")
    vals = [sample(space, 1, seed).raw["u"] for seed in range(10_000)]
    assert abs(np.mean(vals) - 0.5) < 0.02


def test_int_sampling_never_hits_upper_bound():
    rng = np.random.default_rng(7)
    for _ in range(50):
        lo = int(rng.integers(-10, 10))
        hi = lo + int(rng.integers(1, 12))
        space = parse_space(f"k:\n  type: int\n  range: [{lo}...{hi}]\n")
        draws = {sample(space, 1, s).raw["k"] for s in range(200)}
        assert max(draws) < hi
        assert min(draws) >= lo


def test_invalid_subspace_id(spaces):
    with pytest.raises(SpaceError):
        sample(spaces["svm"], 9, 0)


def test_normalize_float_upper_bound():
    spec = spacedsl.HyperparamSpec("C", "float", lo=0.001, hi=1000)
    assert spacedsl.normalize_value(spec, 1000) == 1.0


def test_normalize_choice_ordinal():
    spec = spacedsl.HyperparamSpec("kernel", "choice", choices=("linear", "poly", "sigmoid", "rbf"))
    assert spacedsl.normalize_value(spec, "sigmoid") == pytest.approx(2 / 3)


def test_normalize_int_uses_full_width():
    spec = spacedsl.HyperparamSpec("k", "int", lo=4, hi=8)
    assert spacedsl.normalize_value(spec, 5) == pytest.approx(0.25)


def test_normalize_powerint2_uses_exponent():
    spec = spacedsl.HyperparamSpec("batch", "powerint2", lo=5, hi=8)
    assert spacedsl.normalize_value(spec, 64) == pytest.approx(1 / 3)
    with pytest.raises(SpaceError):
        spacedsl.normalize_value(spec, 65)


def test_normalize_out_of_range():
    spec = spacedsl.HyperparamSpec("x", "float", lo=0.0, hi=1.0)
    with pytest.raises(SpaceError):
        spacedsl.normalize_value(spec, 1.5)


def test_serialize_round_trip(spaces):
    for space in spaces.values():
        for sub in space.subspaces:
            cfg = sample(space, sub.id, sub.id * 17)
            back = deserialize_config(serialize_config(cfg), space)
            assert back == cfg


def test_serialize_is_canonical(spaces):
    cfg = sample(spaces["svm"], 2, 5)
    text = serialize_config(cfg)
    assert text == json.dumps(json.loads(text), sort_keys=True, separators=(",", ":"))


def test_deserialize_unknown_name(spaces):
    cfg = sample(spaces["svm"], 1, 5)
    payload = json.loads(serialize_config(cfg))
    payload["values"]["mystery"] = 1.0
    with pytest.raises(SpaceError):
        deserialize_config(json.dumps(payload), spaces["svm"])


def test_deserialize_out_of_range(spaces):
    cfg = sample(spaces["svm"], 1, 5)
    payload = json.loads(serialize_config(cfg))
    payload["values"]["C"] = 1e9
    with pytest.raises(SpaceError):
        deserialize_config(json.dumps(payload), spaces["svm"])


def test_deserialize_decision_mismatch(spaces):
    cfg = sample(spaces["svm"], 2, 5)
    payload = json.loads(serialize_config(cfg))
    payload["values"]["kernel"] = "rbf"
    with pytest.raises(SpaceError):
        deserialize_config(json.dumps(payload), spaces["svm"])


def test_syntax_error_reports_position():
    with pytest.raises(SpaceError, match="line"):
        parse_space("x1:\n  type: choice\n  range: {0, 1\n")


def test_unknown_kind_rejected():
    with pytest.raises(SpaceError, match="unknown kind"):
        parse_space("x1:\n  type: lograndom\n  range: [0...1]\n")


def test_submodule_key_not_in_choice_range():
    doc = (
        "x1:\n  type: choice\n  range: {0, 1}\n  submodule:\n"
        "    2:\n      y:\n        type: float\n        range: [0...1]\n"
    )
    with pytest.raises(SpaceError, match="not in the choice range"):
        parse_space(doc)


def test_empty_range_rejected():
    with pytest.raises(SpaceError, match="empty range"):
        parse_space("x1:\n  type: int\n  range: [3...3]\n")


def test_duplicate_sibling_names_rejected():
    doc = "x1:\n  type: int\n  range: [0...2]\nx1:\n  type: int\n  range: [0...2]\n"
    with pytest.raises(SpaceError, match="duplicate key"):
        parse_space(doc)


def test_float_submodule_rejected():
    doc = (
        "x1:\n  type: float\n  range: [0...1]\n  submodule:\n"
        "    0:\n      y:\n        type: float\n        range: [0...1]\n"
    )
    with pytest.raises(SpaceError, match="may carry a submodule"):
        parse_space(doc)
