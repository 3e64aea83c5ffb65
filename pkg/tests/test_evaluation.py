import numpy as np
import pytest
import torch
from scipy import stats
from sklearn.metrics import roc_auc_score

from graphmetro.evaluation import (
    EnvResult,
    discover_shifts,
    evaluate_environments,
    gating_accuracy,
    invariance_matrix,
    roc_auc,
    summarize_trials,
    welch_test,
)
from graphmetro.graph import split_dataset
from graphmetro.model import MoEConfig, MoEModel
from graphmetro.training import accuracy
from graphmetro.transforms import TransformSet

from conftest import random_graph, ring


def graph_split(n=40, seed=0):
    rng = np.random.default_rng(seed)
    return split_dataset([random_graph(rng, n=8, d=2, label=i % 2) for i in range(n)], (0.5, 0.25, 0.25), seed)


def moe(K=5, task="graph", seed=0):
    torch.manual_seed(seed)
    return MoEModel(MoEConfig(K=K, in_dim=2, num_classes=2, hidden_dim=4, num_layers=2, task_kind=task))


def constant_model():
    m = moe()
    with torch.no_grad():
        for p in m.classifier.parameters():
            p.zero_()
    return m


def test_constant_logits_on_balanced_labels():
    split = graph_split(n=400)
    res = evaluate_environments(constant_model(), split, TransformSet())
    n = len(split.test)
    frac0 = np.mean([g.graph_label == 0 for g in split.test])
    for r in res:
        # argmax of equal logits is class 0
        assert r.value == pytest.approx(frac0)
        assert abs(r.value - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_identity_environment_is_plain_test_accuracy():
    split = graph_split()
    m = moe()
    res = evaluate_environments(m, split, TransformSet(), seeds=(0, 1))
    assert len(res) == 28
    assert res[0].env_label == "0" and res[0].value == accuracy(m, split, "test")


def test_evaluation_is_deterministic():
    split = graph_split()
    m = moe()
    a = evaluate_environments(m, split, TransformSet(), seeds=(3,))
    b = evaluate_environments(m, split, TransformSet(), seeds=(3,))
    assert a == b


def test_node_task_environments():
    rng = np.random.default_rng(0)
    g = ring(30, x=rng.normal(size=(30, 2)), node_labels=np.arange(30) % 2)
    split = split_dataset(g, (0.6, 0.2, 0.2), 0)
    res = evaluate_environments(moe(task="node"), split, TransformSet())
    assert len(res) == 14 and all(0 <= r.value <= 1 for r in res)


def test_roc_auc_matches_sklearn(rng):
    s = rng.normal(size=200)
    y = (rng.random(200) < 0.4).astype(int)
    s[:20] = 0.0  # ties
    assert roc_auc(s, y) == pytest.approx(roc_auc_score(y, s), abs=1e-12)
    with pytest.raises(ValueError):
        roc_auc(s, np.arange(200) % 3)


def test_roc_auc_metric_needs_binary_task():
    split = graph_split()
    m = MoEModel(MoEConfig(K=5, in_dim=2, num_classes=3, hidden_dim=4, num_layers=1))
    with pytest.raises(ValueError, match="binary"):
        evaluate_environments(m, split, TransformSet(), metric="roc_auc")


def zero_strength_set():
    kinds = ["drop_edge", "drop_node", "add_edge", "noisy_node_feat"]
    return TransformSet.from_kinds(kinds, {k: (0.0, 0.0) for k in kinds})


def identical_experts(model):
    state = model.experts[0].state_dict()
    for e in model.experts:
        e.load_state_dict(state)
    return model


def test_identical_experts_give_exactly_zero_matrix():
    split = graph_split()
    ts = zero_strength_set()
    m = identical_experts(moe(K=ts.K))
    inv = invariance_matrix(m, split.test, ts, trials=3)
    assert np.array_equal(inv.I, np.zeros((ts.K, ts.K)))
    assert np.array_equal(inv.I_norm, np.zeros((ts.K, ts.K)))


def test_identical_experts_zero_matrix_node_task():
    rng = np.random.default_rng(0)
    g = ring(30, x=rng.normal(size=(30, 2)), node_labels=np.arange(30) % 2)
    g = split_dataset(g, (0.6, 0.2, 0.2), 0).graph
    ts = zero_strength_set()
    m = identical_experts(moe(K=ts.K, task="node"))
    assert np.array_equal(invariance_matrix(m, g, ts, trials=2).I, np.zeros((4, 4)))


def test_invariance_matrix_ranges_and_convergence():
    split = graph_split(n=80)
    ts = TransformSet()
    m = moe()
    a = invariance_matrix(m, split.test, ts, trials=100, seed=0)
    b = invariance_matrix(m, split.test, ts, trials=200, seed=0)
    assert (a.I >= 0).all()
    assert (a.I_norm >= 0).all() and (a.I_norm <= 1).all()
    assert np.all(np.abs(b.I - a.I) <= 0.05 * a.I)
    g = invariance_matrix(m, split.test, ts, trials=5, normalization="global_max").I_norm
    assert g.max() == 1.0


def test_invariance_matrix_errors():
    with pytest.raises(ValueError):
        invariance_matrix(moe(), [], TransformSet())


def test_silent_gate_has_known_multitask_accuracy():
    split = graph_split()
    m = moe()
    with torch.no_grad():
        m.gate_head.weight.zero_()
        m.gate_head.bias.fill_(-50.0)
    # every probe has one bit set out of six
    assert gating_accuracy(m, split.test, TransformSet()) == pytest.approx(5 / 6)


def test_discover_shifts_report():
    split = graph_split()
    rep = discover_shifts(moe(), split.test, TransformSet(), probes=split.test)
    assert rep.mean_probs.shape == (6,)
    assert ((rep.mean_probs >= 0) & (rep.mean_probs <= 1)).all()
    assert rep.component_names[0] == "identity"
    assert len(rep.ranking()) == 5 and 0 <= rep.gating_accuracy <= 1
    assert set(rep.to_dict()) == {"components", "mean_probs", "gating_accuracy"}


def with_moments(mean, std, n, rng):
    z = rng.normal(size=n)
    z = (z - z.mean()) / z.std(ddof=1)
    return mean + std * z


def test_welch_oracle(rng):
    a = with_moments(0.57, 0.02, 5, rng)
    b = with_moments(0.56, 0.03, 5, rng)
    va, vb = 0.02**2 / 5, 0.03**2 / 5
    t = 0.01 / np.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / 4 + vb**2 / 4)
    p = 2 * stats.t.sf(abs(t), df)
    got_t, got_p = welch_test(a, b)
    assert got_t == pytest.approx(t, abs=1e-6)
    assert got_p == pytest.approx(p, abs=1e-6)


def test_welch_identical_inputs():
    assert welch_test([0.5, 0.5, 0.5], [0.5, 0.5, 0.5]) == (0.0, 1.0)
    assert welch_test([0.5, 0.6, 0.7], [0.5, 0.6, 0.7])[1] == pytest.approx(1.0)


def results(values_by_seed):
    return [EnvResult(j, str(j), "accuracy", v, s) for s, row in enumerate(values_by_seed) for j, v in enumerate(row)]


def test_summarize_trials_rows():
    ours = results([[0.9, 0.8, 0.7], [0.8, 0.7, 0.6]])
    base = results([[0.9, 0.6, 0.5], [0.8, 0.5, 0.4]])
    rows = {r["env"]: r for r in summarize_trials(ours, base)}
    assert set(rows) == {"0", "1", "2", "shifted", "all"}
    assert rows["shifted"]["mean"] == pytest.approx(0.7)
    assert rows["shifted"]["baseline_mean"] == pytest.approx(0.5)
    assert rows["1"]["std"] == pytest.approx(np.std([0.8, 0.7], ddof=1))


def test_summarize_trials_needs_two_seeds():
    with pytest.raises(ValueError, match="two seeds"):
        summarize_trials(results([[0.5, 0.5]]), results([[0.5, 0.5]]))
