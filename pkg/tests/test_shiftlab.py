import numpy as np
import pytest

from calshift.calib import CalibratedDetector, point_scores
from calshift.errors import ConfigurationError, ModeError
from calshift.nncore import DenseLayer, Model
from calshift.seeding import mix_seed
from calshift.shiftlab import (
    AttackBudget,
    attack_best_of,
    attack_dataset,
    attack_greedy_flip,
    attack_mimicry,
    dense_real_config,
    drebin_like_config,
    gen_dataset,
    gen_out_of_source,
    gen_temporal,
)


def linear_surrogate(weights, bias=0.0):
    model = Model(layers=[DenseLayer(weights=np.array([weights], dtype=float),
                                     bias=np.array([bias]), activation="identity")])
    return CalibratedDetector(kind="vanilla", members=[model])


# ---------------------------------------------------------------------------
# generators

def test_gen_dataset_bit_identical_for_same_seed():
    cfg = drebin_like_config(dimension=64, param_seed=3)
    a = gen_dataset(cfg, 50, seed=9)
    b = gen_dataset(cfg, 50, seed=9)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
    assert a.ids == b.ids
    c = gen_dataset(cfg, 50, seed=10)
    assert not np.array_equal(a.features, c.features)


def test_gen_dataset_prior_concentration():
    cfg = drebin_like_config(dimension=32, class_prior=0.5, param_seed=1)
    ds = gen_dataset(cfg, 10_000, seed=0)
    assert abs(ds.labels.mean() - 0.5) < 0.02


def test_gen_dataset_binary_mode_is_binary():
    cfg = drebin_like_config(dimension=32)
    ds = gen_dataset(cfg, 100, seed=1)
    assert np.isin(ds.features, (0.0, 1.0)).all()
    assert ds.mode == "binary-drebin-like"


def test_gen_dense_mode():
    cfg = dense_real_config(dimension=8, param_seed=2)
    ds = gen_dataset(cfg, 200, seed=2)
    assert ds.mode == "dense-real"
    assert not np.isin(ds.features, (0.0, 1.0)).all()


def test_out_of_source_zero_magnitude_identical():
    cfg = drebin_like_config(dimension=48, param_seed=4)
    base = gen_dataset(cfg, 80, seed=5)
    shifted = gen_out_of_source(cfg, 0.0, 80, seed=5)
    assert np.array_equal(base.features, shifted.features)
    assert np.array_equal(base.labels, shifted.labels)


def test_out_of_source_preserves_prior_and_labels():
    cfg = drebin_like_config(dimension=48, class_prior=0.3, param_seed=4)
    ds = gen_out_of_source(cfg, 0.2, 10_000, seed=6)
    assert set(np.unique(ds.labels)) <= {0, 1}
    assert abs(ds.labels.mean() - 0.3) < 0.02


def test_out_of_source_tv_distance_monotone_in_magnitude():
    cfg = drebin_like_config(dimension=64, param_seed=7)
    base = gen_dataset(cfg, 10_000, seed=8)
    base_rates = base.features.mean(axis=0)
    tvs = []
    for mag in (0.05, 0.15, 0.3):
        shifted = gen_out_of_source(cfg, mag, 10_000, seed=8)
        rates = shifted.features.mean(axis=0)
        tvs.append(float(np.abs(rates - base_rates).mean()))
    assert tvs[0] < tvs[1] < tvs[2]


def test_temporal_requires_drift():
    cfg = drebin_like_config(dimension=16)
    with pytest.raises(ConfigurationError):
        gen_temporal(cfg, 3, 10, seed=0)


def test_temporal_zero_drift_identically_distributed():
    cfg = drebin_like_config(dimension=32, param_seed=5, drift_rate=0.0)
    series = gen_temporal(cfg, 4, 5000, seed=11)
    rates = [ds.features.mean(axis=0) for ds in series]
    for r in rates[1:]:
        assert np.abs(r - rates[0]).mean() < 0.01  # sampling noise only


def test_temporal_month_zero_matches_gen_dataset_seed_derivation():
    cfg = drebin_like_config(dimension=32, param_seed=5, drift_rate=0.1)
    series = gen_temporal(cfg, 3, 40, seed=12)
    base = gen_dataset(cfg, 40, seed=mix_seed(12, "month", 0))
    assert np.array_equal(series[0].features, base.features)
    assert np.array_equal(series[0].labels, base.labels)
    assert series[0].months is not None and (series[0].months == 0).all()
    assert (series[2].months == 2).all()


def test_temporal_rates_move_monotonically():
    cfg = drebin_like_config(dimension=64, param_seed=6, drift_rate=0.02)
    series = gen_temporal(cfg, 11, 8000, seed=13)
    base = series[0].features.mean(axis=0)
    moved = [float(np.abs(s.features.mean(axis=0) - base).mean()) for s in series]
    assert moved[5] > moved[1]
    assert moved[10] > moved[5]


def test_detector_accuracy_degrades_under_drift():
    # end-to-end oracle: train on month 0, accuracy at month 12 drops
    from calshift.calib import train_detector, predict_dataset, mean_probs
    from calshift.dataset import split_dataset
    from calshift.nncore import TrainConfig

    worse = 0
    for seed in (1, 2, 3):
        cfg = drebin_like_config(dimension=64, param_seed=0, drift_rate=0.03)
        series = gen_temporal(cfg, 13, 800, seed=mix_seed(seed, "t"))
        data = split_dataset(series[0], seed=seed)
        det = train_detector("vanilla", data, TrainConfig(epochs=10, seed=seed), hidden=(32,))
        accs = []
        for ds in (series[0], series[12]):
            member, w = predict_dataset(det, ds.features)
            preds = (mean_probs(member, w) >= 0.5).astype(int)
            accs.append(float((preds == ds.labels).mean()))
        worse += accs[1] < accs[0]
    assert worse == 3


def test_drift_horizon_caps_progress():
    cfg = drebin_like_config(dimension=32, param_seed=6, drift_rate=0.05, drift_horizon=4)
    from calshift.shiftlab import drifted_config

    at4 = drifted_config(cfg, 4)
    at9 = drifted_config(cfg, 9)
    assert np.array_equal(at4.malware_params, at9.malware_params)


# ---------------------------------------------------------------------------
# attacks

def test_greedy_flip_budget_zero_unchanged():
    sur = linear_surrogate([1.0, -2.0, 0.5])
    x = np.array([1.0, 0.0, 0.0])
    out = attack_greedy_flip(x, AttackBudget(0, sur))
    assert np.array_equal(out, x)


def test_greedy_flip_constant_surrogate_unchanged():
    sur = linear_surrogate([0.0, 0.0, 0.0])  # constant 0.5 regardless of input
    x = np.array([1.0, 0.0, 0.0])
    out = attack_greedy_flip(x, AttackBudget(3, sur))
    assert np.array_equal(out, x)


def test_greedy_flip_picks_most_negative_weight_first():
    weights = [0.5, -3.0, -0.2, -1.0]
    sur = linear_surrogate(weights, bias=2.0)
    x = np.array([1.0, 0.0, 0.0, 0.0])
    # oracle: enumerate all single flips
    best = None
    for j in range(4):
        if x[j] == 0:
            cand = x.copy()
            cand[j] = 1.0
            s = float(point_scores(sur, cand)[0])
            if best is None or s < best[1]:
                best = (j, s)
    out = attack_greedy_flip(x, AttackBudget(1, sur))
    assert out[best[0]] == 1.0
    assert int(out.sum() - x.sum()) == 1


def test_greedy_flip_add_only_and_budget_respected():
    rng = np.random.default_rng(4)
    sur = linear_surrogate(rng.normal(0, 1, 30), bias=1.0)
    x = (rng.random(30) < 0.3).astype(float)
    budget = AttackBudget(5, sur)
    out = attack_greedy_flip(x, budget)
    assert ((out - x) >= 0).all()  # add-only
    assert int(np.abs(out - x).sum()) <= 5


def test_greedy_flip_score_nonincreasing_trace():
    rng = np.random.default_rng(5)
    sur = linear_surrogate(rng.normal(0, 1, 20), bias=1.5)
    x = np.zeros(20)
    scores = [float(point_scores(sur, x)[0])]
    cur = x
    for flips in range(1, 6):
        nxt = attack_greedy_flip(x, AttackBudget(flips, sur))
        scores.append(float(point_scores(sur, nxt)[0]))
        cur = nxt
    assert all(b <= a + 1e-15 for a, b in zip(scores, scores[1:]))


def test_greedy_flip_rejects_nonbinary():
    sur = linear_surrogate([1.0, 1.0])
    with pytest.raises(ModeError):
        attack_greedy_flip(np.array([0.5, 0.0]), AttackBudget(1, sur))


def test_mimicry_self_pool_unchanged():
    sur = linear_surrogate([1.0, -1.0, 0.3])
    x = np.array([1.0, 0.0, 1.0])
    out = attack_mimicry(x, x[None, :], AttackBudget(3, sur))
    assert np.array_equal(out, x)


def test_mimicry_budget_zero_unchanged():
    sur = linear_surrogate([1.0, -1.0])
    x = np.array([1.0, 0.0])
    out = attack_mimicry(x, np.array([[0.0, 1.0]]), AttackBudget(0, sur))
    assert np.array_equal(out, x)


def test_mimicry_two_feature_hand_union():
    sur = linear_surrogate([2.0, -2.0])
    x = np.array([1.0, 0.0])
    template = np.array([[0.0, 1.0]])
    out = attack_mimicry(x, template, AttackBudget(2, sur))
    assert np.array_equal(out, np.array([1.0, 1.0]))  # hand union


def test_mimicry_picks_best_template():
    sur = linear_surrogate([1.0, -5.0, -0.5])
    x = np.array([1.0, 0.0, 0.0])
    pool = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    out = attack_mimicry(x, pool, AttackBudget(2, sur))
    assert np.array_equal(out, np.array([1.0, 1.0, 0.0]))


def test_mimicry_output_superset_of_input():
    rng = np.random.default_rng(6)
    sur = linear_surrogate(rng.normal(0, 1, 25))
    x = (rng.random(25) < 0.2).astype(float)
    pool = (rng.random((8, 25)) < 0.3).astype(float)
    out = attack_mimicry(x, pool, AttackBudget(10, sur))
    assert ((out - x) >= 0).all()


def test_mimicry_empty_pool_error():
    sur = linear_surrogate([1.0, 1.0])
    with pytest.raises(ConfigurationError):
        attack_mimicry(np.array([1.0, 0.0]), np.empty((0, 2)), AttackBudget(1, sur))


def test_best_of_never_worse_than_either():
    rng = np.random.default_rng(7)
    sur = linear_surrogate(rng.normal(0, 1, 20), bias=1.0)
    x = (rng.random(20) < 0.3).astype(float)
    pool = (rng.random((5, 20)) < 0.3).astype(float)
    budget = AttackBudget(6, sur)
    combined = attack_best_of(x, pool, budget)
    s = float(point_scores(sur, combined)[0])
    sg = float(point_scores(sur, attack_greedy_flip(x, budget))[0])
    sm = float(point_scores(sur, attack_mimicry(x, pool, budget))[0])
    assert s <= min(sg, sm) + 1e-15


def test_attack_dataset_keeps_only_malware_and_tags_meta():
    cfg = drebin_like_config(dimension=32, param_seed=8)
    ds = gen_dataset(cfg, 60, seed=14)
    sur = linear_surrogate(np.zeros(32))
    out = attack_dataset(ds, AttackBudget(2, sur), method="greedy")
    assert (out.labels == 1).all()
    assert out.meta["attack"] == "greedy"
    assert len(out) == int((ds.labels == 1).sum())
