import statistics
from dataclasses import replace

import numpy as np
import pytest

from starmoe import harness, moe
from starmoe.config import RunConfig
from starmoe.errors import InvalidStateError

SMALL = RunConfig(tasks=3, classes_per_task=2, input_dim=12, d=8, r=2, epochs=2, train_per_class=30,
                  test_per_class=10, separation=4.0, drift_samples=8)


def test_stream_deterministic_and_complete():
    a, b = harness.generate_stream(SMALL), harness.generate_stream(SMALL)
    for ta, tb in zip(a, b):
        assert ta.train_x.tobytes() == tb.train_x.tobytes()
        assert ta.test_y.tobytes() == tb.test_y.tobytes()
    labels = set().union(*(t.class_ids for t in a))
    assert len(labels) == SMALL.tasks * SMALL.classes_per_task
    gens = [g for t in a for g in t.generator_ids]
    assert sorted(gens) == list(range(6))


def test_default_stream_is_jointly_learnable():
    cfg = RunConfig()
    stream = harness.generate_stream(cfg)
    X = np.concatenate([t.train_x for t in stream])
    y = np.concatenate([t.train_y for t in stream])
    Xt = np.concatenate([t.test_x for t in stream])
    yt = np.concatenate([t.test_y for t in stream])
    n_cls = cfg.tasks * cfg.classes_per_task
    # least-squares linear classifier on one-hot targets (with bias)
    A = np.hstack([X, np.ones((len(X), 1))])
    W, *_ = np.linalg.lstsq(A, np.eye(n_cls)[y], rcond=None)
    pred = np.argmax(np.hstack([Xt, np.ones((len(Xt), 1))]) @ W, axis=1)
    assert np.mean(pred == yt) >= 0.95


def test_first_task_has_no_regularizers_and_records_anchors():
    stream = harness.generate_stream(SMALL)
    net = harness.build_network(SMALL)
    state = harness.new_state(net)
    harness.train_task(net, stream[0], state, SMALL)
    assert all(r["sara"] == 0.0 and r["acr"] == 0.0 and r["total"] == r["cur"] for r in state.loss_trace)
    assert [len(a) for a in state.anchors] == [2] * len(net.moe_layers)
    harness.train_task(net, stream[1], state, SMALL)
    assert [len(a) for a in state.anchors] == [4] * len(net.moe_layers)
    second = [r for r in state.loss_trace if r["task"] == 2]
    assert any(r["sara"] > 0 for r in second)
    assert all(r["acr"] == 0.0 for r in second)  # k = E = 2: every expert is always selected
    harness.train_task(net, stream[2], state, SMALL)
    assert any(r["acr"] > 0 for r in state.loss_trace if r["task"] == 3)
    assert state.data_access == [1, 2, 3]


def test_out_of_order_task_rejected():
    stream = harness.generate_stream(SMALL)
    net = harness.build_network(SMALL)
    with pytest.raises(InvalidStateError):
        harness.train_task(net, stream[1], harness.new_state(net), SMALL)


def test_training_step_leaves_frozen_weights_untouched():
    stream = harness.generate_stream(SMALL)
    net = harness.build_network(SMALL)
    state = harness.new_state(net)
    harness.train_task(net, stream[0], state, SMALL)
    before = {k: v.copy() for k, v in moe.named_weights(net).items()}
    for layer in net.layers:
        moe.expand_layer(layer, harness.SeededRng(0))
    moe.expand_classifier(net, 2, harness.SeededRng(1))
    state.weights = harness.star.uniform_weights(len(net.moe_layers))
    state.optimizer_state = {}
    trainable = set(moe.trainable_parameters(net))
    harness.training_step(net, stream[1].train_x[:8], stream[1].train_y[:8], state, SMALL, stream[1],
                          harness.SeededRng(2))
    after = moe.named_weights(net)
    for name, value in before.items():
        if name not in trainable:
            assert after[name].tobytes() == value.tobytes(), name


def test_baseline_toggle_equals_zero_lambdas():
    off = harness.run_experiment(replace(SMALL, sara_on=False, acr_on=False))
    zero = harness.run_experiment(replace(SMALL, lambda_sara=0.0, lambda_acr=0.0))
    assert [r["total"] for r in off.loss_trace] == [r["total"] for r in zero.loss_trace]
    assert off.accuracies == zero.accuracies


def test_evaluate():
    net = moe.init_network(2, 2, 1, 0, 1, 2, harness.SeededRng(0))
    net.classifier = np.array([[0.0, 0.0], [0.0, 0.0]])  # all-zero logits: ties go to class 0
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.0]])
    assert harness.evaluate(net, X, [0, 1, 0, 1]) == 50.0
    net.stem = np.eye(2)
    net.classifier = np.eye(2)
    assert harness.evaluate(net, [[1.0, 0.0], [0.0, 1.0]], [0, 1]) == 100.0
    with pytest.raises(ValueError):
        harness.evaluate(net, np.zeros((0, 2)), [])


def test_evaluate_matches_recount():
    m, net, _ = harness.run_experiment(SMALL, keep_network=True)
    stream = harness.generate_stream(SMALL)
    hits = total = 0
    for task in stream:
        for x, label in zip(task.test_x, task.test_y):
            logits, _ = moe.network_forward(x, net)
            best = 0
            for c in range(len(logits)):
                if logits[c] > logits[best]:
                    best = c
            hits += best == label
            total += 1
    assert m.last == 100.0 * hits / total


def test_run_experiment_metrics_and_determinism():
    a = harness.run_experiment(SMALL)
    b = harness.run_experiment(SMALL)
    assert abs(a.average - sum(a.accuracies) / len(a.accuracies)) <= 1e-12
    assert a.accuracies == b.accuracies
    assert [r.to_dict() for r in a.drift] == [r.to_dict() for r in b.drift]
    assert a.loss_trace == b.loss_trace
    assert all(r.bound_holds for r in a.drift)
    assert all(a.frozen_checks)
    assert a.drift[0].old_class_count == 0 and a.drift[-1].old_class_count == 4


def test_routing_mass_rows_sum_to_one():
    m = harness.run_experiment(SMALL)
    assert m.routing_mass.shape == (3, 3)
    np.testing.assert_allclose(m.routing_mass.sum(axis=1), 1.0, atol=1e-9)
    one = harness.run_experiment(replace(SMALL, tasks=1))
    np.testing.assert_allclose(one.routing_mass, [[1.0]], atol=1e-12)
    assert harness.later_expert_mass(np.array([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.2, 0.2, 0.6]])) == \
        pytest.approx(0.5 + 0.3)


def test_ablation_rows_and_medians():
    rows = harness.run_ablation(SMALL, variants=["full"], seeds=[3])
    assert len(rows) == 1
    plain = harness.run_experiment(SMALL.with_seed(3))
    assert rows[0].metrics.accuracies == plain.accuracies
    rows = harness.run_ablation(SMALL, variants=["baseline", "sara_only"], seeds=[0, 1, 2])
    assert [(r.label, r.sara_on, r.acr_on) for r in rows[:1]] == [("baseline", False, False)]
    assert {(r.label, r.sara_on, r.acr_on) for r in rows} == {("baseline", False, False),
                                                              ("sara_only", True, False)}
    med = harness.medians(rows)
    for (label, _), m in med.items():
        vals = sorted(r.metrics.last for r in rows if r.label == label)
        assert m["last_acc"] == vals[1] == statistics.median(vals)
    with pytest.raises(ValueError):
        harness.run_ablation(SMALL, variants=[], seeds=[0])


def test_ablation_parallel_matches_serial():
    serial = harness.run_ablation(SMALL, variants=["full"], seeds=[0, 1])
    parallel = harness.run_ablation(SMALL, variants=["full"], seeds=[0, 1], workers=2)
    assert [r.metrics.accuracies for r in serial] == [r.metrics.accuracies for r in parallel]


def test_sweep():
    rows = harness.run_sweep(SMALL, "lambda_sara", ["0.6"], seeds=[0])
    assert rows[0].metrics.accuracies == harness.run_experiment(SMALL.with_seed(0)).accuracies
    tiny = replace(SMALL, epochs=1, tasks=2)
    assert len(harness.run_sweep(tiny, "lambda_acr", [0.2, 0.4, 0.6, 1.0, 2.0], seeds=[0])) == 5
    with pytest.raises(ValueError):
        harness.run_sweep(SMALL, "lr", [0.1], seeds=[0])
    with pytest.raises(ValueError):
        harness.run_sweep(SMALL, "k", [1.5], seeds=[0])
    with pytest.raises(ValueError):
        harness.run_sweep(SMALL, "gamma", [2.0], seeds=[0])


def test_large_k_is_dense_gating():
    cfg = replace(SMALL, k=8)
    _, net, _ = harness.run_experiment(cfg, keep_network=True)
    x = harness.generate_stream(cfg)[0].test_x
    _, traces = moe.network_forward(x, net)
    for tr in traces:
        assert tr.K.all()
        np.testing.assert_allclose(tr.G, tr.P, atol=1e-12)


def test_expand_start_layer_freezes_prefix():
    cfg = replace(SMALL, layers=2, expand_start_layer=2)
    _, net, _ = harness.run_experiment(cfg, keep_network=True)
    assert net.moe_layers == [1]
    assert len(net.layers[0].experts) == 1 and net.layers[0].experts[0].frozen
    assert len(net.layers[1].experts) == 3
