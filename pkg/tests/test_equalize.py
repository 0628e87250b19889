import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairprobe.decorrelation import Cluster, ClusterModel
from fairprobe.domain import FEMALE, GENUINE, IMPOSTOR, MALE
from fairprobe.equalize import (
    Assignment, Combination, Insufficient, SamplingParams, SamplingProbe, SplitStore, derive_rng,
    equalize, filter_comparisons, plan_sizes, sample, template_mask,
)
from fairprobe.metrics import EvalResult, OperatingPoint

from conftest import make_store, make_table


def test_assignment_and_combination_encoding():
    assert Assignment("Bangs", 1).encode() == "Bangs=+1"
    c = Combination([Assignment("Eyewear", 1), Assignment("Bangs", -1)])
    assert c.encode() == "Bangs=-1;Eyewear=+1"
    assert Combination.decode(c.encode()) == c
    assert Combination().encode() == ""
    with pytest.raises(ValueError):
        Combination([Assignment("Bangs", 1), Assignment("Bangs", -1)])
    with pytest.raises(ValueError):
        Assignment("Bangs", 0)


@given(st.lists(st.tuples(st.sampled_from("ABCDEF"), st.sampled_from([1, -1])),
                unique_by=lambda t: t[0]))
def test_encoding_is_canonical(pairs):
    combo = Combination(Assignment(n, l) for n, l in pairs)
    rev = Combination(Assignment(n, l) for n, l in reversed(pairs))
    assert combo.encode() == rev.encode()
    assert Combination.decode(combo.encode()) == combo


# six templates: 0-2 male (ids p,p,q), 3-5 female (ids r,r,s); one attribute
HAND_LABELS = [1, 1, -1, 1, 0, 1]
HAND_ROWS = [
    (0, 1, 0.9, GENUINE, MALE), (0, 2, 0.1, IMPOSTOR, MALE), (1, 2, 0.2, IMPOSTOR, MALE),
    (3, 4, 0.8, GENUINE, FEMALE), (3, 5, 0.3, IMPOSTOR, FEMALE), (4, 5, 0.0, IMPOSTOR, FEMALE),
    (1, 0, 0.7, GENUINE, MALE), (5, 3, 0.4, IMPOSTOR, FEMALE),
]


def brute_filter(rows, labels, model, combo):
    req = {}
    for a in combo:
        for attr, inv in zip(model.cluster(a.cluster).members, model.cluster(a.cluster).inverted):
            req[attr] = -a.label if inv else a.label
    keep = []
    for k, (i, j, *_) in enumerate(rows):
        ok = True
        for attr, lab in req.items():
            if labels[i][attr] != lab or labels[j][attr] != lab:
                ok = False
        if ok:
            keep.append(k)
    return keep


def test_filter_hand_case():
    t = make_table(HAND_LABELS, [0, 0, 0, 1, 1, 1], list("ppqrrs"))
    store = make_store(HAND_ROWS)
    model = ClusterModel.singletons(t.attribute_names)
    combo = Combination([Assignment("a0", 1)])
    got = filter_comparisons(store, t, model, combo)
    expected = brute_filter(HAND_ROWS, t.labels.tolist(), model, combo)
    assert expected == [0, 4, 6, 7]
    assert got.score.tolist() == [HAND_ROWS[k][2] for k in expected]
    assert filter_comparisons(store, t, model, Combination()) is store


def test_inverted_member_requires_flipped_raw_label():
    t = make_table([[1, -1], [1, 1]], [0, 0], ["p", "q"])
    model = ClusterModel(t.attribute_names, (Cluster((0, 1), (False, True), "a0 + Not a1"),), 1)
    mask = template_mask(t, model.cluster("a0 + Not a1").required_raw_labels(1))
    assert mask.tolist() == [True, False]


def test_lambda_i_and_guards():
    assert math.floor(1000 / (1 / 5)) == 5000
    ok = plan_sizes({0: 3000, 1: 3000}, {0: 5000, 1: 5000}, 0.2, 1000, 3)
    assert ok is not None
    assert plan_sizes({0: 2997, 1: 3000}, {0: 10 ** 6, 1: 10 ** 6}, 0.2, 1000, 3) is None  # 999 per set
    assert plan_sizes({0: 3000, 1: 3000}, {0: 4999, 1: 10 ** 6}, 0.2, 1000, 3) is None


def test_hand_trace():
    sizes = plan_sizes({0: 10_000, 1: 4_000}, {0: 100_000, 1: 80_000}, 0.2, 1000, 3)
    assert (sizes.c_g, sizes.c_i, sizes.keep_all_impostors) == (1333, 6665, False)


def test_keep_all_impostors_branch():
    sizes = plan_sizes({0: 30_000, 1: 30_000}, {0: 20_000, 1: 25_000}, 0.2, 1000, 3)
    assert sizes.keep_all_impostors
    assert sizes.c_i == 20_000
    assert sizes.c_g == 4000


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 20_000), st.integers(0, 20_000), st.integers(0, 60_000),
       st.integers(0, 60_000), st.sampled_from([0.2, 0.25, 0.5, 1.0]), st.integers(1, 500),
       st.integers(1, 4), st.integers(0, 2 ** 32))
def test_sampling_invariants(gm, gf, im, if_, rho, lam, gamma, seed):
    gen, imp = {0: gm, 1: gf}, {0: im, 1: if_}
    sets = sample(gen, imp, rho, lam, gamma, seed)
    c_g_disjoint = min(gm, gf) // gamma
    lambda_i = math.floor(lam / rho)
    if c_g_disjoint < lam or min(im, if_) < lambda_i:
        assert sets is None
        return
    assert sets is not None
    for g in (0, 1):
        drawn = np.concatenate(sets.genuine[g])
        assert drawn.size == gamma * sets.c_g
        assert np.unique(drawn).size == drawn.size  # pairwise disjoint
        assert drawn.max() < gen[g]
        assert all(len(s) == sets.c_g for s in sets.genuine[g])
        assert all(len(s) == sets.c_i for s in sets.impostor[g])
        assert all(np.unique(s).size == s.size for s in sets.impostor[g])
    if c_g_disjoint / rho > min(im, if_):
        assert sets.c_i == min(im, if_)
        assert sets.c_g == math.floor(min(im, if_) * rho)
    else:
        assert sets.c_g == c_g_disjoint
        assert sets.c_i == math.floor(c_g_disjoint / rho)
    again = sample(gen, imp, rho, lam, gamma, seed)
    assert all(np.array_equal(x, y) for x, y in zip(sets.genuine[0], again.genuine[0]))


def test_derive_rng_independent_of_order():
    a = derive_rng(1, "x", 0).random()
    derive_rng(1, "y", 0).random()
    assert derive_rng(1, "x", 0).random() == a
    assert derive_rng(2, "x", 0).random() != a


def symmetric_store():
    # two identical populations; every genuine score equal, impostors shared
    ids, genders, rows = [], [], []
    for g in (MALE, FEMALE):
        base = len(ids)
        for person in range(30):
            ids += [f"{g}-{person}"] * 4
            genders += [g] * 4
        rng = np.random.default_rng(9)
        for person in range(30):
            m = [base + 4 * person + k for k in range(4)]
            rows += [(m[i], m[j], 0.9, GENUINE, g) for i in range(4) for j in range(i + 1, 4)]
        members = list(range(base, base + 120))
        pairs = [(i, j) for i in members for j in members if i < j and (i - base) // 4 != (j - base) // 4]
        pick = sorted(rng.choice(len(pairs), size=250, replace=False))
        scores = np.random.default_rng(10).normal(0, 0.1, 250)
        rows += [(pairs[k][0], pairs[k][1], float(s), IMPOSTOR, g) for k, s in zip(pick, scores)]
    labels = np.ones((len(ids), 1), dtype=np.int8)
    return make_table(labels, genders, ids), make_store(rows)


def test_equalize_symmetric_populations():
    t, s = symmetric_store()
    data = SplitStore(s, t)
    model = ClusterModel.singletons(t.attribute_names)
    # 180 genuine per gender; 250 impostors < 60 / 0.2, so every impostor is kept
    res = equalize(Combination([Assignment("a0", 1)]), data, model,
                   OperatingPoint(0.05), SamplingParams(0.2, 3, 20), seed=4)
    assert isinstance(res, EvalResult)
    assert abs(res.igarbe_mean - 1.0) < 1e-12
    assert res.retained_genuine == 360


def test_equalize_insufficient(small_data):
    _, t, s = small_data
    data = SplitStore(s, t)
    model = ClusterModel.singletons(t.attribute_names)
    combo = Combination([Assignment(n, 1) for n in t.attribute_names])
    res = equalize(combo, data, model, OperatingPoint(1e-3))
    assert isinstance(res, Insufficient)
    assert res.to_dict()["insufficient"] is True


def test_equalize_seed_determinism(small_data):
    _, t, s = small_data
    data = SplitStore(s, t)
    model = ClusterModel.singletons(t.attribute_names)
    combo = Combination([Assignment("attr_01", -1)])
    op = OperatingPoint(0.01)
    a = equalize(combo, data, model, op, seed=5)
    assert a == equalize(combo, data, model, op, seed=5)
    assert a != equalize(combo, data, model, op, seed=6)


def test_sampling_probe(small_data):
    _, t, s = small_data
    probe = SamplingProbe(SplitStore(s, t), OperatingPoint(0.01))
    c = Cluster((0,), (False,), "attr_00")
    assert probe(c, 1) and probe(c, -1)
    strict = SamplingProbe(SplitStore(s, t), OperatingPoint(1e-5))
    assert not strict(c, 1)
