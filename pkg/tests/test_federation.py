import numpy as np
import pytest

from bayesfed import seeds
from bayesfed.autodiff import NumericError
from bayesfed.data import gen_synthetic
from bayesfed.distill import DistillConfig
from bayesfed.federation import (
    ClientState,
    FederationConfig,
    GlobalModels,
    ProtocolError,
    SwaConfig,
    aggregate_average,
    aggregate_distill,
    build_ensemble,
    client_update,
    fit_param_gaussian,
    init_global,
    pseudo_label,
    run_federated,
    swa_distill,
)
from bayesfed.models import (
    ModelSpec,
    init_params,
    log_joint,
    log_joint_grad,
    predict_proba,
)
from bayesfed.sgld import SgldConfig


TEACHER = ModelSpec(input_dim=3, hidden=(4,), classes=3, role="teacher")
STUDENT = ModelSpec(input_dim=3, hidden=(5,), classes=3, role="student")


def small_clients(k=3, n=24, seed=11):
    data = gen_synthetic(classes=3, dim=3, per_class=max(40, k * n), spread=0.5, seed=seed)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(k):
        idx = rng.choice(data.features.shape[0], size=n, replace=False)
        out.append(ClientState(id=i, features=data.features[idx], labels=data.labels[idx]))
    return out


def fresh_globals(seed=5):
    return GlobalModels(
        teacher=init_global(TEACHER, seed, seeds.PURPOSE_TEACHER_INIT),
        student=init_global(STUDENT, seed, seeds.PURPOSE_STUDENT_INIT),
    )


# ---- weighted average ----------------------------------------------------


def test_average_hand_value():
    a = np.array([0.0, 8.0])
    b = np.array([4.0, 0.0])
    out = aggregate_average([a, b], [1, 3])
    assert np.array_equal(out, np.array([3.0, 2.0]))


def test_average_identical_inputs_bitwise():
    m = np.array([0.1, -0.2, 0.7])
    out = aggregate_average([m.copy(), m.copy(), m.copy()], [3, 1, 9])
    assert out.tobytes() == m.tobytes()
    out[0] = 99.0
    assert m[0] == 0.1  # returned a copy, not an alias


def test_average_validation():
    with pytest.raises(ValueError):
        aggregate_average([], [])
    with pytest.raises(ValueError):
        aggregate_average([np.zeros(2)], [0])
    with pytest.raises(ProtocolError):
        aggregate_average([np.zeros(2), np.zeros(3)], [1, 1])


def test_gaussian_fit_hand_values():
    mean, std = fit_param_gaussian([np.array([0.0]), np.array([4.0])], [1, 1])
    assert mean[0] == 2.0 and std[0] == 2.0
    mean, std = fit_param_gaussian([np.array([0.0]), np.array([4.0])], [1, 3])
    assert mean[0] == 3.0
    assert std[0] == pytest.approx(np.sqrt(3.0), rel=0, abs=0)


def test_gaussian_fit_single_client_zero_std():
    m = np.array([1.0, -2.0, 0.5])
    mean, std = fit_param_gaussian([m], [7])
    assert np.array_equal(mean, m)
    assert np.all(std == 0.0)


def test_ensemble_membership():
    rng = seeds.stream(0, seeds.PURPOSE_SERVER, 1, 0)
    mean = np.array([1.0, 2.0])
    clients = [np.array([0.0, 0.0]), np.array([2.0, 4.0])]
    ens = build_ensemble(mean, np.array([0.0, 0.0]), clients, 4, rng)
    assert len(ens) == 4 + 1 + 2
    for member in ens[:5]:  # zero std collapses draws onto the mean
        assert np.array_equal(member, mean)
    assert np.array_equal(ens[5], clients[0]) and np.array_equal(ens[6], clients[1])


def test_pseudo_label_rows_sum_to_one():
    rng = np.random.default_rng(3)
    ens = [init_params(TEACHER, np.random.default_rng(i)) for i in range(4)]
    X = rng.normal(size=(9, 3))
    probs = pseudo_label(TEACHER, ens, X)
    assert probs.shape == (9, 3)
    assert np.all(np.abs(probs.sum(axis=1) - 1.0) < 1e-12)
    single = pseudo_label(TEACHER, ens[:1], X)
    assert np.array_equal(single, predict_proba(TEACHER, ens[0], X))


# ---- swa distillation ----------------------------------------------------


def test_swa_zero_epochs_returns_init():
    init = init_params(STUDENT, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    X = np.random.default_rng(2).normal(size=(8, 3))
    t = np.full((8, 3), 1.0 / 3.0)
    out = swa_distill(STUDENT, init, X, t, SwaConfig(epochs=0), rng)
    assert out.tobytes() == init.tobytes()


def test_swa_no_snapshots_returns_init():
    init = init_params(STUDENT, np.random.default_rng(0))
    X = np.random.default_rng(2).normal(size=(8, 3))
    t = np.full((8, 3), 1.0 / 3.0)
    cfg = SwaConfig(epochs=3, start=5, step_size=0.1, batch_size=4)
    out = swa_distill(STUDENT, init, X, t, cfg, np.random.default_rng(1))
    assert out.tobytes() == init.tobytes()


def _replay_sgd_epochs(spec, init, X, t, cfg, rng):
    """Reference loop mirroring the swa inner SGD, returning end-of-epoch weights."""
    from bayesfed.distill import alignment_value_and_grad

    w = init.copy()
    snaps = []
    for _ in range(cfg.epochs):
        order = rng.permutation(X.shape[0])
        for b in range(int(np.ceil(X.shape[0] / cfg.batch_size))):
            batch = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            _, g = alignment_value_and_grad(spec, w, t[batch], X[batch], 0.0)
            w = w + cfg.step_size * g
        snaps.append(w.copy())
    return snaps


def test_swa_two_snapshots_exact_mean():
    init = init_params(STUDENT, np.random.default_rng(7))
    gen = np.random.default_rng(8)
    X = gen.normal(size=(12, 3))
    raw = gen.random(size=(12, 3))
    t = raw / raw.sum(axis=1, keepdims=True)
    cfg = SwaConfig(epochs=2, start=1, every=1, step_size=0.05, batch_size=5)
    out = swa_distill(STUDENT, init, X, t, cfg, np.random.default_rng(9))
    w1, w2 = _replay_sgd_epochs(STUDENT, init, X, t, cfg, np.random.default_rng(9))
    assert out.tobytes() == ((w1 + w2) / 2.0).tobytes()


def test_swa_snapshot_cadence():
    # epochs=6, start=2, every=2 -> snapshots at epochs 2, 4, 6
    init = init_params(STUDENT, np.random.default_rng(7))
    gen = np.random.default_rng(8)
    X = gen.normal(size=(10, 3))
    raw = gen.random(size=(10, 3))
    t = raw / raw.sum(axis=1, keepdims=True)
    cfg = SwaConfig(epochs=6, start=2, every=2, step_size=0.05, batch_size=4)
    out = swa_distill(STUDENT, init, X, t, cfg, np.random.default_rng(4))
    snaps = _replay_sgd_epochs(STUDENT, init, X, t, cfg, np.random.default_rng(4))
    picked = [snaps[1], snaps[3], snaps[5]]
    avg = picked[0].copy()
    for k, s in enumerate(picked[1:], start=2):
        avg = avg * ((k - 1) / k) + s * (1.0 / k)
    assert out.tobytes() == avg.tobytes()


def test_distill_aggregation_degenerate_equals_average():
    rng = np.random.default_rng(0)
    models = [init_params(TEACHER, np.random.default_rng(i)) for i in range(3)]
    weights = [10, 30, 20]
    X = rng.normal(size=(6, 3))
    out = aggregate_distill(
        TEACHER, models, weights, X, 0, SwaConfig(epochs=0), np.random.default_rng(1)
    )
    assert out.tobytes() == aggregate_average(models, weights).tobytes()


def test_distill_aggregation_requires_pool():
    models = [np.zeros(TEACHER.param_count)]
    with pytest.raises(ValueError, match="unlabeled"):
        aggregate_distill(
            TEACHER, models, [1], np.zeros((0, 3)), 2, SwaConfig(), np.random.default_rng(0)
        )


# ---- client update -------------------------------------------------------


def test_client_update_zero_epochs_is_identity():
    client = small_clients(k=1)[0]
    g = fresh_globals()
    res = client_update(
        client,
        g,
        TEACHER,
        STUDENT,
        0,
        SgldConfig(step_size=1e-3),
        DistillConfig(step_size=0.1),
        1e-4,
        seeds.stream(0, seeds.PURPOSE_CLIENT, 0, 1),
    )
    assert res.teacher.tobytes() == g.teacher.tobytes()
    assert res.student.tobytes() == g.student.tobytes()
    expect = log_joint(TEACHER, g.teacher, client.features, client.labels, 1e-4)
    assert res.map_log_joint == expect
    assert res.n == client.n and res.local_epochs == 0


def test_client_update_within_burn_in_keeps_initial_map():
    client = small_clients(k=1)[0]
    g = fresh_globals()
    cfg = SgldConfig(step_size=1e-4, burn_in=10_000, minibatch_size=8)
    res = client_update(
        client, g, TEACHER, STUDENT, 2, cfg, DistillConfig(step_size=0.1), 1e-4,
        seeds.stream(0, seeds.PURPOSE_CLIENT, 0, 1),
    )
    # every step stays inside burn-in: MAP is the broadcast model, student untouched
    assert res.teacher.tobytes() == g.teacher.tobytes()
    assert res.student.tobytes() == g.student.tobytes()


def test_client_update_fedavg_matches_manual_sgd():
    client = small_clients(k=1, n=20)[0]
    g = fresh_globals()
    cfg = SgldConfig(step_size=2e-3, minibatch_size=7, burn_in=0)
    res = client_update(
        client, g, TEACHER, STUDENT, 2, cfg, DistillConfig(step_size=0.1), 1e-4,
        seeds.stream(3, seeds.PURPOSE_CLIENT, 0, 1), mode="fedavg",
    )
    assert res.student is None

    rng = seeds.stream(3, seeds.PURPOSE_CLIENT, 0, 1)
    theta = g.teacher.copy()
    for _ in range(2):
        order = rng.permutation(20)
        for b in range(3):
            batch = order[b * 7 : (b + 1) * 7]
            _, grad = log_joint_grad(
                TEACHER, theta, client.features[batch], client.labels[batch], 1e-4, n_total=20
            )
            theta = theta + 0.5 * cfg.step_size * grad
    assert res.teacher.tobytes() == theta.tobytes()
    assert res.map_log_joint == log_joint(TEACHER, theta, client.features, client.labels, 1e-4)


def test_client_update_improves_map_and_moves_student():
    client = small_clients(k=1, n=40)[0]
    g = fresh_globals()
    cfg = SgldConfig(step_size=5e-3, burn_in=4, minibatch_size=10, map_eval_every=1)
    init_lj = log_joint(TEACHER, g.teacher, client.features, client.labels, 1e-4)
    res = client_update(
        client, g, TEACHER, STUDENT, 15, cfg, DistillConfig(step_size=0.3), 1e-4,
        seeds.stream(1, seeds.PURPOSE_CLIENT, 0, 1),
    )
    assert res.map_log_joint > init_lj
    assert res.student.tobytes() != g.student.tobytes()


def test_client_update_sample_hook_counts():
    client = small_clients(k=1, n=20)[0]
    g = fresh_globals()
    cfg = SgldConfig(step_size=1e-4, burn_in=3, minibatch_size=5)  # 4 steps/epoch
    seen = []
    client_update(
        client, g, TEACHER, STUDENT, 3, cfg, DistillConfig(step_size=0.1), 1e-4,
        seeds.stream(1, seeds.PURPOSE_CLIENT, 0, 1), sample_hook=lambda s: seen.append(s.copy()),
    )
    assert len(seen) == 3 * 4 - 3  # total steps minus burn-in
    assert all(s.shape == (TEACHER.param_count,) for s in seen)


def test_client_update_numeric_error_names_client():
    client = small_clients(k=1)[0]
    client = ClientState(id=7, features=client.features, labels=client.labels)
    g = fresh_globals()
    cfg = SgldConfig(step_size=1e300, minibatch_size=8, burn_in=0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericError, match="client 7"):
            client_update(
                client, g, TEACHER, STUDENT, 2, cfg, DistillConfig(step_size=0.0), 1e-4,
                seeds.stream(1, seeds.PURPOSE_CLIENT, 7, 1),
            )


def test_client_update_rejects_wrong_length():
    client = small_clients(k=1)[0]
    g = fresh_globals()
    bad = GlobalModels(teacher=g.teacher[:-1].copy(), student=g.student)
    with pytest.raises(ProtocolError, match="client 0 teacher"):
        client_update(
            client, bad, TEACHER, STUDENT, 1, SgldConfig(step_size=1e-3),
            DistillConfig(step_size=0.1), 1e-4, np.random.default_rng(0),
        )


# ---- orchestrator --------------------------------------------------------


def run_small(threads=1, aggregator="average", client_mode="fedppd", seed=42, rounds=2):
    clients = small_clients(k=3, n=24, seed=9)
    test = gen_synthetic(classes=3, dim=3, per_class=30, spread=0.5, seed=10)
    unlabeled = gen_synthetic(classes=3, dim=3, per_class=10, spread=0.5, seed=12).features
    fed = FederationConfig(
        rounds=rounds,
        local_epochs=2,
        aggregator=aggregator,
        client_mode=client_mode,
        extra_samples=2,
        swa=SwaConfig(epochs=2, start=1, batch_size=16),
    )
    return run_federated(
        clients,
        TEACHER,
        STUDENT,
        fed,
        SgldConfig(step_size=1e-3, burn_in=2, minibatch_size=8),
        DistillConfig(step_size=0.2),
        test.features,
        test.labels,
        seed=seed,
        unlabeled=unlabeled,
        threads=threads,
    )


def _strip_wall(records):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in records]


@pytest.mark.parametrize("aggregator", ["average", "distill"])
def test_run_deterministic_across_thread_counts(aggregator):
    a = run_small(threads=1, aggregator=aggregator)
    b = run_small(threads=3, aggregator=aggregator)
    assert a.models.teacher.tobytes() == b.models.teacher.tobytes()
    assert a.models.student.tobytes() == b.models.student.tobytes()
    assert _strip_wall(a.records) == _strip_wall(b.records)


def test_run_record_shape():
    out = run_small()
    assert len(out.records) == 2
    rec = out.records[0]
    assert set(rec) == {"round", "per_client", "server", "wall_ms"}
    assert rec["round"] == 1
    assert [c["id"] for c in rec["per_client"]] == [0, 1, 2]
    assert all(set(c) == {"id", "n", "map_log_joint", "local_epochs"} for c in rec["per_client"])
    srv = rec["server"]
    assert set(srv) == {"aggregator", "test_acc_teacher", "test_acc_student", "ece", "brier"}
    assert srv["aggregator"] == "average"
    assert 0.0 <= srv["test_acc_student"] <= 1.0
    assert rec["wall_ms"] > 0


def test_run_fedavg_has_no_student_metrics():
    out = run_small(client_mode="fedavg")
    for rec in out.records:
        assert rec["server"]["test_acc_student"] is None
    # student side never trained: still the seeded initialization
    assert out.models.student.tobytes() == init_global(STUDENT, 42, seeds.PURPOSE_STUDENT_INIT).tobytes()


def test_run_distill_needs_pool():
    clients = small_clients(k=2)
    test = gen_synthetic(classes=3, dim=3, per_class=10, spread=0.5, seed=10)
    fed = FederationConfig(rounds=1, local_epochs=1, aggregator="distill")
    with pytest.raises(ValueError, match="unlabeled"):
        run_federated(
            clients, TEACHER, STUDENT, fed,
            SgldConfig(step_size=1e-3), DistillConfig(step_size=0.1),
            test.features, test.labels, seed=0, unlabeled=None,
        )


def test_run_rejects_bad_client_ids():
    clients = small_clients(k=2)
    clients[1] = ClientState(id=0, features=clients[1].features, labels=clients[1].labels)
    test = gen_synthetic(classes=3, dim=3, per_class=10, spread=0.5, seed=10)
    fed = FederationConfig(rounds=1, local_epochs=1)
    with pytest.raises(ProtocolError, match="ids"):
        run_federated(
            clients, TEACHER, STUDENT, fed,
            SgldConfig(step_size=1e-3), DistillConfig(step_size=0.1),
            test.features, test.labels, seed=0,
        )


def test_run_zero_epochs_round_trip_is_identity():
    clients = small_clients(k=3, n=24, seed=9)
    test = gen_synthetic(classes=3, dim=3, per_class=10, spread=0.5, seed=10)
    fed = FederationConfig(rounds=3, local_epochs=0)
    out = run_federated(
        clients, TEACHER, STUDENT, fed,
        SgldConfig(step_size=1e-3), DistillConfig(step_size=0.1),
        test.features, test.labels, seed=21,
    )
    # every client returns the broadcast bitwise, so every round re-averages
    # identical vectors and the global models never move
    assert out.models.teacher.tobytes() == init_global(TEACHER, 21, seeds.PURPOSE_TEACHER_INIT).tobytes()
    assert out.models.student.tobytes() == init_global(STUDENT, 21, seeds.PURPOSE_STUDENT_INIT).tobytes()


def test_record_sink_receives_every_round():
    sunk = []
    clients = small_clients(k=2, n=16, seed=9)
    test = gen_synthetic(classes=3, dim=3, per_class=10, spread=0.5, seed=10)
    fed = FederationConfig(rounds=2, local_epochs=1)
    out = run_federated(
        clients, TEACHER, STUDENT, fed,
        SgldConfig(step_size=1e-3, burn_in=0, minibatch_size=8), DistillConfig(step_size=0.1),
        test.features, test.labels, seed=2, record_sink=sunk.append,
    )
    assert sunk == out.records
