import numpy as np
import pytest

from bayesfed import seeds
from bayesfed.active import (
    ActiveConfig,
    ClientPools,
    _acquire_positions,
    predictive_entropy,
    run_active_loop,
    select_batch,
    write_curve_csv,
)
from bayesfed.data import gen_synthetic
from bayesfed.distill import DistillConfig
from bayesfed.federation import FederationConfig
from bayesfed.models import ModelSpec
from bayesfed.sgld import SgldConfig


TEACHER = ModelSpec(input_dim=2, hidden=(4,), classes=3, role="teacher")
STUDENT = ModelSpec(input_dim=2, hidden=(5,), classes=3, role="student")


def test_predictive_entropy_values():
    assert predictive_entropy(np.array([0.0, 1.0, 0.0])) == 0.0
    assert predictive_entropy(np.full(4, 0.25)) == pytest.approx(np.log(4.0), abs=1e-12)
    assert predictive_entropy(np.array([0.5, 0.5])) == pytest.approx(np.log(2.0), abs=1e-12)


def test_select_batch_basics():
    assert list(select_batch(np.array([0.1, 0.9, 0.5]), 2)) == [1, 2]
    assert list(select_batch(np.array([0.3, 0.3, 0.3]), 2)) == [0, 1]
    assert sorted(select_batch(np.array([0.1, 0.9, 0.5]), 3)) == [0, 1, 2]
    assert sorted(select_batch(np.array([0.1, 0.9]), 10)) == [0, 1]
    assert select_batch(np.array([0.1, 0.9]), 0).size == 0


def test_select_batch_tie_positions_interleaved():
    scores = np.array([0.5, 0.9, 0.5, 0.9, 0.1])
    assert list(select_batch(scores, 3)) == [1, 3, 0]


def make_pools(k=2, rows=30, labeled=6, seed=0):
    data = gen_synthetic(classes=3, dim=2, per_class=k * rows, spread=0.6, seed=seed)
    out = []
    for i in range(k):
        lo = i * rows
        feats = data.features[lo : lo + rows]
        labs = data.labels[lo : lo + rows]
        out.append(
            ClientPools(
                id=i,
                features=feats,
                labels=labs,
                labeled_idx=np.arange(labeled),
                pool_idx=np.arange(labeled, rows),
            )
        )
    return out, data


def test_pools_validation():
    feats = np.zeros((10, 2))
    labs = np.zeros(10, dtype=np.int64)
    with pytest.raises(ValueError, match="overlap"):
        ClientPools(0, feats, labs, np.array([0, 1]), np.array([1, 2]))
    with pytest.raises(ValueError, match="labeled"):
        ClientPools(0, feats, labs, np.array([], dtype=np.int64), np.arange(10))
    with pytest.raises(ValueError, match="out of range"):
        ClientPools(0, feats, labs, np.array([0]), np.array([10]))


def test_acquire_moves_and_conserves():
    pools, _ = make_pools()
    p = pools[0]
    before = set(p.labeled_idx) | set(p.pool_idx)
    p.acquire(np.array([0, 3]))  # pool positions -> absolute rows 6 and 9
    assert set(p.labeled_idx) == {0, 1, 2, 3, 4, 5, 6, 9}
    assert (set(p.labeled_idx) | set(p.pool_idx)) == before
    assert len(p.history) == 1 and list(p.history[0]) == [6, 9]


def test_random_acquisition_ignores_scores():
    pools, _ = make_pools()
    p = pools[0]
    probs_a = np.full((len(p.pool_idx), 3), 1 / 3)
    rng = lambda: seeds.stream(7, seeds.PURPOSE_ACTIVE, 1, 0)
    picked_a = _acquire_positions(p, "random", 5, probs_a, rng())
    picked_b = _acquire_positions(p, "random", 5, None, rng())
    assert np.array_equal(picked_a, picked_b)
    assert picked_a.size == 5


def test_acquired_count_is_min_of_budget_and_pool():
    pools, _ = make_pools(labeled=6, rows=10)  # pool of 4
    p = pools[0]
    rng = seeds.stream(7, seeds.PURPOSE_ACTIVE, 1, 0)
    assert _acquire_positions(p, "random", 99, None, rng).size == 4


def quick_cfgs():
    fed = FederationConfig(rounds=1, local_epochs=1)
    sgld = SgldConfig(step_size=1e-3, burn_in=0, minibatch_size=8)
    return fed, sgld, DistillConfig(step_size=0.2)


def run_loop(acquisition="entropy", rounds=2, budget=4, seed=5, labeled=6, rows=30):
    pools, _ = make_pools(labeled=labeled, rows=rows)
    test = gen_synthetic(classes=3, dim=2, per_class=15, spread=0.6, seed=99)
    fed, sgld, dist = quick_cfgs()
    return run_active_loop(
        pools,
        TEACHER,
        STUDENT,
        ActiveConfig(rounds=rounds, budget=budget, acquisition=acquisition),
        fed,
        sgld,
        dist,
        test.features,
        test.labels,
        seed=seed,
    )


def test_loop_curve_growth():
    out = run_loop(rounds=2, budget=4, labeled=6)
    assert [r["active_round"] for r in out.curve] == [0, 1, 2]
    assert [r["labeled_per_client"] for r in out.curve] == [6.0, 10.0, 14.0]
    for row in out.curve:
        assert row["acquisition"] == "entropy" and row["seed"] == 5
        assert 0.0 <= row["test_accuracy"] <= 1.0
    for p in out.pools:
        p.check_invariants()
        assert len(p.history) == 2


def test_loop_zero_rounds_single_row():
    out = run_loop(rounds=0)
    assert len(out.curve) == 1
    assert out.curve[0]["labeled_per_client"] == 6.0


def test_loop_stops_on_exhaustion():
    # pool of 4 per client, budget 10: first acquisition drains everything
    out = run_loop(rounds=3, budget=10, labeled=6, rows=10)
    assert [r["active_round"] for r in out.curve] == [0, 1]
    assert out.curve[1]["labeled_per_client"] == 10.0
    for p in out.pools:
        assert len(p.pool_idx) == 0


def test_loop_deterministic():
    a = run_loop(seed=11)
    b = run_loop(seed=11)
    assert a.curve == b.curve
    assert a.models.teacher.tobytes() == b.models.teacher.tobytes()
    for pa, pb in zip(a.pools, b.pools):
        assert np.array_equal(pa.labeled_idx, pb.labeled_idx)


def test_loop_fedavg_mode_runs():
    pools, _ = make_pools()
    test = gen_synthetic(classes=3, dim=2, per_class=15, spread=0.6, seed=99)
    fed = FederationConfig(rounds=1, local_epochs=1, client_mode="fedavg")
    sgld = SgldConfig(step_size=1e-3, burn_in=0, minibatch_size=8)
    out = run_active_loop(
        pools, TEACHER, STUDENT,
        ActiveConfig(rounds=1, budget=3), fed, sgld, DistillConfig(step_size=0.2),
        test.features, test.labels, seed=1,
    )
    assert len(out.curve) == 2


def test_active_config_validation():
    with pytest.raises(ValueError):
        ActiveConfig(rounds=-1, budget=5)
    with pytest.raises(ValueError):
        ActiveConfig(rounds=1, budget=0)
    with pytest.raises(ValueError, match="acquisition"):
        ActiveConfig(rounds=1, budget=5, acquisition="margin")


def test_curve_csv_layout(tmp_path):
    rows = [
        {"active_round": 0, "labeled_per_client": 6.0, "acquisition": "entropy",
         "seed": 5, "test_accuracy": 0.8125},
        {"active_round": 1, "labeled_per_client": 10.0, "acquisition": "entropy",
         "seed": 5, "test_accuracy": 0.875},
    ]
    path = tmp_path / "curve.csv"
    write_curve_csv(path, rows)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "active_round,labeled_per_client,acquisition,seed,test_accuracy"
    assert lines[1] == "0,6.0,entropy,5,0.8125"
    assert lines[2] == "1,10.0,entropy,5,0.875"
