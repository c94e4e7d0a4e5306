import numpy as np
import pytest

from bcflsim.data import WindowConfig, generate_patient, split_dataset
from bcflsim import learners as L
from bcflsim.fedavg import GlobalModel, LocalUpdate, aggregate, local_updates, round_seed, run_fedavg

CFG = WindowConfig(24, 6)


def _pv(values):
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    # a linear ParamVector of matching length: L*C+1 = n -> use dims (n-1, 1)
    return L.ParamVector(values, "linear", ((n - 1), 1))


def test_aggregate_single_update_is_identity():
    pv = _pv([1.0, -2.0, 3.0])
    out = aggregate([LocalUpdate(1, 1, pv, 17)])
    assert np.array_equal(out.values, pv.values)


def test_aggregate_weighted_mean_hand_value():
    # 0 with weight 1/4 and 4 with weight 3/4 -> 3
    a = LocalUpdate(1, 1, _pv([0.0, 0.0]), 1)
    b = LocalUpdate(2, 1, _pv([4.0, 4.0]), 3)
    out = aggregate([a, b])
    assert np.allclose(out.values, [3.0, 3.0])


def test_aggregate_identical_updates_any_weights():
    pv = _pv([2.5, -1.0, 0.5])
    ups = [LocalUpdate(i, 2, pv, n) for i, n in ((1, 1), (2, 10), (3, 99))]
    out = aggregate(ups)
    assert np.allclose(out.values, pv.values, rtol=0, atol=1e-15)


def test_aggregate_weights_sum_to_one():
    rng = np.random.default_rng(1)
    ns = [int(n) for n in rng.integers(1, 1000, size=9)]
    total = sum(ns)
    weights = [n / total for n in ns]
    assert abs(sum(weights) - 1.0) < 1e-12


def test_aggregate_convex_hull_property():
    rng = np.random.default_rng(2)
    ups = [LocalUpdate(i, 1, _pv(rng.normal(size=5)), int(rng.integers(1, 50))) for i in range(6)]
    out = aggregate(ups)
    stacked = np.stack([u.params.values for u in ups])
    assert np.all(out.values >= stacked.min(axis=0) - 1e-12)
    assert np.all(out.values <= stacked.max(axis=0) + 1e-12)


def test_aggregate_permutation_invariance():
    rng = np.random.default_rng(3)
    ups = [LocalUpdate(i, 1, _pv(rng.normal(size=8)), int(rng.integers(1, 50))) for i in range(7)]
    a = aggregate(ups)
    b = aggregate(list(reversed(ups)))
    assert np.allclose(a.values, b.values, rtol=0, atol=1e-12)


def test_aggregate_rejects_empty_mixed_arch_mixed_round():
    with pytest.raises(ValueError):
        aggregate([])
    lin = LocalUpdate(1, 1, _pv([0.0, 1.0]), 1)
    other = LocalUpdate(2, 1, L.init_model("nnpg", CFG, 0).params, 1)
    with pytest.raises(ValueError):
        aggregate([lin, LocalUpdate(2, 2, _pv([0.0, 1.0]), 1)])
    with pytest.raises(ValueError):
        aggregate([lin, other])


def test_local_update_requires_positive_samples():
    with pytest.raises(ValueError):
        LocalUpdate(1, 1, _pv([0.0, 1.0]), 0)


def _hospitals(n, days=8, seed=5):
    out = []
    pid = 1
    for k in range(1, n + 1):
        series = [generate_patient(pid + i, days, seed) for i in range(2)]
        pid += 2
        out.append(split_dataset(series, CFG, split_seed=seed + k, hospital_id=k))
    return out


HYPER = L.Hyperparams(learning_rate=1e-3, weight_decay=4e-4, epochs=2, batch_size=256,
                      max_batches_per_epoch=2)


def test_run_fedavg_single_hospital_single_round_equals_train_local():
    (hosp,) = _hospitals(1)
    model = run_fedavg([hosp], "linear", CFG, HYPER, rounds=1, init_seed=3, train_seed=7)
    template = L.init_model("linear", CFG, 3)
    expected = L.train_local(
        template, hosp.train, hosp.val, HYPER, round_seed(7, 1, hosp.hospital_id),
        target_scale=hosp.target_scale,
    )
    assert np.array_equal(model.params.values, expected.params.values)
    assert model.round == 1


def test_run_fedavg_zero_lr_returns_initial_model():
    hosps = _hospitals(2)
    h0 = L.Hyperparams(learning_rate=0.0, weight_decay=0.0, epochs=1, batch_size=256,
                       max_batches_per_epoch=1)
    model = run_fedavg(hosps, "linear", CFG, h0, rounds=3, init_seed=3, train_seed=7)
    assert np.array_equal(model.params.values, L.init_model("linear", CFG, 3).params.values)


def test_run_fedavg_two_hospitals_matches_hand_sequenced_oracle():
    """Explicit train -> mean -> train -> mean, bit-exact under shared seeds."""
    h1, h2 = _hospitals(2)
    template = L.init_model("linear", CFG, 3)

    def step(global_params, r):
        locals_ = []
        for hosp in (h1, h2):
            p = L.set_params(template, global_params)
            trained = L.train_local(
                p, hosp.train, hosp.val, HYPER, round_seed(7, r, hosp.hospital_id),
                target_scale=hosp.target_scale,
            )
            locals_.append((trained.params.values, hosp.n_train))
        n = h1.n_train + h2.n_train
        mixed = (h1.n_train / n) * locals_[0][0] + (h2.n_train / n) * locals_[1][0]
        return L.ParamVector(mixed, "linear", template.dims)

    g1 = step(template.params, 1)
    g2 = step(g1, 2)

    model = run_fedavg([h1, h2], "linear", CFG, HYPER, rounds=2, init_seed=3, train_seed=7)
    assert np.array_equal(model.params.values, g2.values)


def test_parallel_and_serial_updates_agree():
    hosps = _hospitals(3)
    template = L.init_model("linear", CFG, 3)
    serial = local_updates(hosps, template.params, template, HYPER, 7, 1, max_workers=1)
    threaded = local_updates(hosps, template.params, template, HYPER, 7, 1, max_workers=3)
    for a, b in zip(serial, threaded):
        assert a.participant_id == b.participant_id
        assert np.array_equal(a.params.values, b.params.values)


def test_aggregation_matches_brute_force_oracle():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n_up = int(rng.integers(1, 11))
        width = int(rng.integers(2, 101))
        ups = [
            LocalUpdate(i, 1, _pv(rng.normal(size=width)), int(rng.integers(1, 500)))
            for i in range(n_up)
        ]
        total = sum(u.n_k for u in ups)
        brute = sum(u.n_k * u.params.values for u in ups) / total
        out = aggregate(ups)
        assert np.max(np.abs(out.values - brute)) < 1e-12
