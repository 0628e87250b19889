import json

import numpy as np
import pytest
from scipy.stats import norm

from fairprobe.decorrelation import cluster_attributes, pearson_matrix
from fairprobe.domain import FEMALE, GENUINE, DataError
from fairprobe.equalize import Assignment, SplitStore
from fairprobe.metrics import OperatingPoint
from fairprobe.search import SearchConfig, baseline
from fairprobe.decorrelation import ClusterModel
from fairprobe.synthetic import (
    CorrelatedGroup, PlantedRule, SyntheticConfig, expected_recovery, generate,
)


def test_symmetric_baseline_near_one(small_data):
    _, t, s = small_data
    res = baseline(SplitStore(s, t), ClusterModel.singletons(t.attribute_names),
                   SearchConfig(op=OperatingPoint(0.01)))
    assert res.igarbe_mean > 0.9


def test_planted_shift_measurable():
    cfg = SyntheticConfig(n_identities_per_gender=60, images_per_identity=15, n_attributes=3,
                          planted_rules=(PlantedRule("attr_01", 1, "F", 0.2),), seed=8)
    t, s = generate(cfg)
    col = t.column("attr_01")
    sel = (s.kind == GENUINE) & (s.gender == FEMALE)
    hit = sel & ((col[s.idx_a] == 1) | (col[s.idx_b] == 1))
    scores = s.score[hit]
    se = cfg.genuine_std / np.sqrt(scores.size)
    assert abs(scores.mean() - (cfg.genuine_mean - 0.2)) < 3 * se
    rest = s.score[sel & ~hit]
    assert abs(rest.mean() - cfg.genuine_mean) < 3 * cfg.genuine_std / np.sqrt(rest.size)


def test_requested_correlation_matches_monte_carlo():
    cfg = SyntheticConfig(n_identities_per_gender=1500, images_per_identity=4, n_attributes=2,
                          correlated_groups=(CorrelatedGroup(("attr_00", "attr_01"), 0.8),),
                          impostor_factor=0.01, seed=12)
    t, _ = generate(cfg)
    got = pearson_matrix(t).r[0, 1]
    # oracle: threshold a bivariate normal at the same quantiles
    rng = np.random.default_rng(99)
    z = rng.multivariate_normal([0, 0], [[1, 0.8], [0.8, 1]], size=200_000)
    lo = norm.ppf(1 - cfg.positive_rate - cfg.unclear_rate)
    hi = norm.ppf(1 - cfg.positive_rate)
    tern = np.where(z < lo, -1, np.where(z > hi, 1, 0))
    oracle = np.corrcoef(tern[:, 0], tern[:, 1])[0, 1]
    assert abs(got - oracle) < 0.1


def test_non_positive_definite_rejected():
    groups = (CorrelatedGroup(("attr_00", "attr_01"), 0.9), CorrelatedGroup(("attr_01", "attr_02"), 0.9),
              CorrelatedGroup(("attr_00", "attr_02"), -0.9))
    with pytest.raises(DataError):
        generate(SyntheticConfig(n_attributes=3, correlated_groups=groups))


def test_deterministic_fingerprints():
    cfg = SyntheticConfig(n_identities_per_gender=10, images_per_identity=5, seed=4)
    a = generate(cfg)[1].fingerprint
    assert a == generate(cfg)[1].fingerprint
    assert a != generate(SyntheticConfig(n_identities_per_gender=10, images_per_identity=5, seed=5))[1].fingerprint


def test_templates_ordered_by_gender_and_identity():
    t, s = generate(SyntheticConfig(n_identities_per_gender=3, images_per_identity=2, seed=0))
    assert t.gender.tolist() == [0] * 6 + [1] * 6
    assert t.identities[:2] == ("m00000", "m00001")
    s.validate(t)


def test_expected_recovery():
    one = SyntheticConfig(planted_rules=(PlantedRule("attr_03", 1, "F", 0.2),))
    assert expected_recovery(one) == {Assignment("attr_03", 1), Assignment("attr_03", -1)}
    two = SyntheticConfig(planted_rules=(PlantedRule("attr_03", 1, "F", 0.2),
                                         PlantedRule("attr_05", -1, "M", 0.1)))
    assert {a.cluster for a in expected_recovery(two)} == {"attr_03", "attr_05"}
    with pytest.raises(ValueError):
        expected_recovery(SyntheticConfig())


def test_expected_recovery_at_cluster_granularity():
    cfg = SyntheticConfig(n_identities_per_gender=50, images_per_identity=5, n_attributes=4,
                          correlated_groups=(CorrelatedGroup(("attr_01", "attr_02"), 0.9),),
                          planted_rules=(PlantedRule("attr_02", 1, "F", 0.2),), seed=3)
    t, _ = generate(cfg)
    model = cluster_attributes(t, 1)
    assert expected_recovery(cfg, model) == {Assignment("attr_01 + attr_02", 1),
                                             Assignment("attr_01 + attr_02", -1)}


def test_config_json_round_trip():
    cfg = SyntheticConfig(correlated_groups=(CorrelatedGroup(("attr_00", "attr_01"), -0.5, (1, -1)),),
                          planted_rules=(PlantedRule("attr_02", -1, "M", 0.1),),
                          gender_positive_rate={"attr_00": {"F": 0.2}})
    back = SyntheticConfig.from_json(json.dumps(cfg.to_dict()))
    assert back.to_dict() == cfg.to_dict()
    assert generate(back)[1].fingerprint == generate(cfg)[1].fingerprint


def test_invalid_config():
    with pytest.raises(ValueError):
        SyntheticConfig(positive_rate=0.6, unclear_rate=0.5)
    with pytest.raises(ValueError):
        SyntheticConfig(planted_rules=(PlantedRule("nope", 1, "F", 0.2),))
