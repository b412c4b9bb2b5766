import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langshift.errors import InvalidInputError, UnknownKeyError
from langshift.geometry import LanguageVectorTable, ShiftArea, compute_language_vectors
from langshift.intervention import (
    ShiftPlan,
    batch_hooks,
    build_hooks,
    dominant_like_layers,
    shift_backward,
    shift_toward,
)
from langshift.repstore import sentence_vectors
from langshift.toymodel import BOS, ModelConfig, forward_with_hooks, init_params
from test_repstore import make_dump


def table(num_layers=6, d=4, languages=(0, 1, 2), seed=0):
    rng = np.random.default_rng(seed)
    return LanguageVectorTable(tuple(languages), num_layers,
                               {lang: rng.normal(size=(num_layers, d)) for lang in languages})


def area(l_to, l_bk):
    return ShiftArea(l_to, l_bk, 0.3, tuple(range(l_to, l_bk + 1)), True)


def test_shift_examples():
    np.testing.assert_array_equal(
        shift_toward(np.array([[1.0, 2.0, 3.0]]), np.full(3, 0.5), np.array([1.0, 0.0, -1.0])),
        [[1.5, 1.5, 1.5]])
    h = np.arange(6.0).reshape(2, 3)
    v = np.array([1.0, -2.0, 0.25])
    np.testing.assert_array_equal(shift_toward(h, v, v), h)
    np.testing.assert_array_equal(shift_backward(h, v, v), h)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(1, 16), st.integers(0, 2**31 - 1))
def test_round_trip_and_rearrangement(n, d, seed):
    rng = np.random.default_rng(seed)
    h, v_l, v_d = rng.normal(size=(n, d)) * 10, rng.normal(size=d) * 10, rng.normal(size=d) * 10
    shifted = shift_toward(h, v_l, v_d)
    assert np.abs(shift_backward(shifted, v_d, v_l) - h).max() <= 1e-12
    np.testing.assert_allclose(shifted.mean(axis=0), h.mean(axis=0) - v_l + v_d, atol=1e-12)
    back = shift_backward(h, v_d, v_l)
    np.testing.assert_allclose(back + v_d - v_l, h, atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        shift_toward(np.zeros((2, 3)), np.zeros(4), np.zeros(3))
    with pytest.raises(InvalidInputError):
        shift_backward(np.zeros((2, 3)), np.zeros(3), np.zeros(2))


def test_plan_invariants():
    t = table()
    with pytest.raises(InvalidInputError):
        ShiftArea(3, 3, 0.3, (3,), True)
    with pytest.raises(InvalidInputError):
        ShiftPlan(0, area(2, 7), t)
    with pytest.raises(InvalidInputError):
        ShiftPlan(9, area(2, 4), t)


def test_hooks_for_dominant_and_non_dominant():
    plan = ShiftPlan(0, area(4, 6), table())
    assert build_hooks(plan, 0) == []
    hooks = build_hooks(plan, 1)
    assert [(h.layer, h.name) for h in hooks] == [(4, "shift_toward"), (6, "shift_backward")]
    h = np.ones((1, 2, 4))
    t = plan.vector_table
    np.testing.assert_allclose(hooks[0].transform(h), h - t.get(1, 4) + t.get(0, 4), atol=0)
    np.testing.assert_allclose(hooks[1].transform(h), h - t.get(0, 6) + t.get(1, 6), atol=0)
    with pytest.raises(UnknownKeyError):
        build_hooks(plan, 7)


def test_disabled_plan_warns_and_installs_nothing():
    plan = ShiftPlan(0, area(2, 3), table(), enabled=False)
    with pytest.warns(RuntimeWarning):
        assert build_hooks(plan, 1) == []
    assert batch_hooks(plan, [1, 2]) == []


def test_batch_hooks_match_per_language_hooks():
    plan = ShiftPlan(0, area(2, 4), table())
    h = np.random.default_rng(1).normal(size=(3, 5, 4))
    langs = [1, 0, 2]
    mixed = batch_hooks(plan, langs)
    for hook_index in range(2):
        out = mixed[hook_index].transform(h)
        for b, lang in enumerate(langs):
            single = build_hooks(plan, lang)
            expected = single[hook_index].transform(h[b:b + 1]) if single else h[b:b + 1]
            np.testing.assert_allclose(out[b:b + 1], expected, atol=1e-15)
    assert batch_hooks(plan, [0, 0]) == []


def test_plan_json(tmp_path):
    plan = ShiftPlan(0, area(2, 4), table())
    text = plan.to_json(tmp_path / "plan.json")
    data = json.loads((tmp_path / "plan.json").read_text())
    assert data == json.loads(text)
    assert (data["L_to"], data["L_bk"], data["enabled"]) == (2, 4, True)
    assert set(data["vector_checksums"]) == {"0", "1", "2"}


def test_hooks_in_model_forward():
    cfg = ModelConfig(vocab_size=20, num_layers=5, hidden_dim=4, num_heads=1, max_positions=8)
    params = init_params(cfg, 0)
    plan = ShiftPlan(0, area(2, 4), table(num_layers=5))
    toks = np.array([[BOS, 5, 6, 7]])
    plain = forward_with_hooks(params, toks)
    hooked = forward_with_hooks(params, toks, build_hooks(plan, 1))
    np.testing.assert_array_equal(hooked.hidden[0], plain.hidden[0])
    np.testing.assert_array_equal(hooked.pre_hook[2], plain.hidden[1])
    t = plan.vector_table
    np.testing.assert_allclose(hooked.hidden[1], plain.hidden[1] - t.get(1, 2) + t.get(0, 2), atol=1e-14)
    dom = forward_with_hooks(params, toks, build_hooks(plan, 0))
    np.testing.assert_array_equal(dom.logits, plain.logits)


def test_centroid_coincidence_on_calibration():
    dump = make_dump([0, 1], 3, 5, 40, seed=4)
    t = compute_language_vectors(dump)
    layers = dominant_like_layers(dump, t, 1, 0)
    for i, shifted in enumerate(layers, start=1):
        off = dump.block(1, i)[1]
        pooled = np.array([shifted[off[j]:off[j + 1]].mean(axis=0) for j in range(len(off) - 1)])
        assert np.linalg.norm(pooled.mean(axis=0) - t.get(0, i)) <= 1e-10
        assert sentence_vectors(dump, 1, i).shape == pooled.shape
