from dataclasses import replace

import numpy as np
import pytest

from ccp.engine import (
    CCPState,
    EarlyStopper,
    RunConfig,
    init_state,
    oscillation_diagnostics,
    run_ccp,
    run_ccp_iteration,
    run_full_pipeline,
    train_classifier,
    warmup_pretrain,
)
from ccp.model import MLP
from ccp.scenarios import UNLABELED, ScenarioDataset, ScenarioSpec, make_scenario

FAST = RunConfig(
    warmup_epochs=3,
    first_iter_epochs=3,
    max_epochs=3,
    max_iterations=3,
    classifier_epochs=3,
)


def small_spec(**kw):
    base = dict(labeled_per_class=8, unlabeled_per_class=40, test_per_class=20, ood_clusters=2)
    base.update(kw)
    return ScenarioSpec(**base)


def two_clusters(seed=0):
    rng = np.random.default_rng(seed)
    centres = np.array([[2.0, 2.0, 2.0, 2.0], [-2.0, -2.0, -2.0, -2.0]])
    y = np.repeat([0, 1], 21)
    x = centres[y] + 0.5 * rng.standard_normal((42, 4))
    given = np.full(42, UNLABELED)
    given[[0, 21]] = [0, 1]
    yt = np.repeat([0, 1], 10)
    xt = centres[yt] + 0.5 * rng.standard_normal((20, 4))
    return ScenarioDataset(x, given, y, np.zeros(42, bool), 2, xt, yt, meta={"seed": seed})


def test_clamped_labels_never_change():
    ds = make_scenario(small_spec())
    state, _, _ = run_ccp(ds, replace(FAST, convergence_tol=0.0), seed=1)
    assert state.iteration == FAST.max_iterations
    lab = ds.labeled
    expected = np.where(np.arange(ds.num_classes) == ds.given_label[lab][:, None], 1.0, -1.0)
    assert np.array_equal(state.q[lab], expected)


def test_schedule_bookkeeping():
    ds = make_scenario(small_spec())
    cfg = replace(FAST, convergence_tol=0.0, initial_d_max=0.04)
    state, _, _ = run_ccp(ds, cfg, seed=2)
    d = [m.d_max for m in state.history]
    assert d == [0.04 * 2.0**-m for m in range(len(d))]
    assert state.d_max == 0.04 * 2.0 ** -len(d)
    p = [100] + [m.p_chosen for m in state.history]
    assert all(b <= a for a, b in zip(p, p[1:]))
    assert all(m.p_chosen <= 99 for m in state.history)


def test_pool_rows_clipped_with_single_nonzero():
    ds = make_scenario(small_spec(scenario="noisy-label", severity=2))
    state, _, _ = run_ccp(ds, replace(FAST, trusted_labels=False), seed=3)
    q = state.q[state.pool]
    assert np.all((q >= 0) & (q <= 1))
    assert np.all((q > 0).sum(axis=1) <= 1)


def test_gamma_scaling_sets_strongest_to_one():
    ds = make_scenario(small_spec())
    cfg = replace(FAST, subsample=False)
    model = MLP(cfg.network(ds.dim, ds.num_classes), seed=0)
    warmup_pretrain(model, ds, cfg, np.random.default_rng(0))
    state = init_state(ds, cfg)
    m = run_ccp_iteration(state, model, ds, cfg, np.random.default_rng(1))
    assert m.gamma == pytest.approx(state.last_q_hat.max())
    assert np.max(state.last_q_hat / m.gamma) == 1.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_two_cluster_toy_reaches_high_accuracy(seed):
    # nearest labeled neighbour is perfect here; one iteration must come within 5%
    ds = two_clusters(seed)
    cfg = RunConfig(pretrain=False, max_iterations=1)
    state, _, _ = run_ccp(ds, cfg, seed=seed)
    assert state.history[0].pseudo_label_accuracy >= 0.95


def test_each_pool_row_seen_every_epoch():
    ds = make_scenario(small_spec())
    cfg = replace(FAST, first_iter_epochs=4)
    model = MLP(cfg.network(ds.dim, ds.num_classes), seed=0)
    warmup_pretrain(model, ds, cfg, np.random.default_rng(0))
    state = init_state(ds, cfg)
    rows = state.pool[:10]
    run_ccp_iteration(state, model, ds, cfg, np.random.default_rng(1), trace_rows=rows, record_epochs=True)
    seen = {(r, e) for r, e, _ in state.traces}
    assert seen == {(int(r), e) for r in rows for e in range(4)}


def test_pipeline_is_deterministic():
    ds = make_scenario(small_spec())
    a = run_full_pipeline(ds, FAST, seed=5)
    b = run_full_pipeline(ds, FAST, seed=5)
    assert a.baseline_test_acc == b.baseline_test_acc
    assert a.ccp_test_acc == b.ccp_test_acc
    assert [vars(m) for m in a.history] == [vars(m) for m in b.history]


def test_baseline_only_skips_ccp():
    ds = make_scenario(small_spec())
    r = run_full_pipeline(ds, FAST, seed=0, baseline_only=True)
    assert r.ccp_test_acc is None and r.history == []


def test_missing_test_split_rejected():
    ds = make_scenario(small_spec())
    ds.x_test = None
    with pytest.raises(Exception, match="test split"):
        run_full_pipeline(ds, FAST, seed=0)


def test_zero_credibility_classifier_only_decays():
    ds = make_scenario(small_spec())
    cfg = FAST
    model = MLP(cfg.network(ds.dim, ds.num_classes), seed=0)
    model.take_snapshot()
    state = CCPState(q=np.zeros((ds.x.shape[0], ds.num_classes)), clamped=np.zeros(ds.x.shape[0], bool),
                     pool=np.arange(ds.x.shape[0]))
    before = model.copy_params()
    train_classifier(state, model, ds, cfg, np.random.default_rng(0))
    # no rows carry credibility, so no optimisation step is taken at all
    for name, value in before.items():
        if not name.startswith("g."):
            assert np.array_equal(model.params[name], value)


def test_warmup_loss_decreases():
    ds = make_scenario(small_spec())
    cfg = replace(FAST, warmup_epochs=15)
    model = MLP(cfg.network(ds.dim, ds.num_classes), seed=0)
    losses = warmup_pretrain(model, ds, cfg, np.random.default_rng(0))
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


def test_warmup_disabled_snapshot_is_init():
    ds = make_scenario(small_spec())
    model = MLP(replace(FAST, pretrain=False).network(ds.dim, ds.num_classes), seed=0)
    init = model.copy_params()
    warmup_pretrain(model, ds, replace(FAST, pretrain=False), np.random.default_rng(0))
    for name, value in init.items():
        assert np.array_equal(model.snapshot[name], value)


def test_early_stopper_patience():
    s = EarlyStopper(decay=0.0, patience=2)
    for loss, stop in [(3.0, False), (2.0, False), (2.5, False), (2.1, True)]:
        s.update(loss)
        assert s.epoch_end() is stop


def test_oscillation_constant_is_degenerate():
    ev = np.full((4, 5, 3, 2), 0.3)
    rep = oscillation_diagnostics(ev, ev.mean(axis=1))
    assert rep.degenerate
    assert np.isnan(rep.fraction_reduced)


def test_oscillation_alternating_averages_to_zero():
    pattern = np.array([[1.0, -1.0], [-1.0, 1.0]])
    ev = np.tile(pattern[None, :, None, :], (3, 5, 2, 1))  # 10 epochs alternating
    avg = ev.mean(axis=1)
    assert np.allclose(avg, 0.0)
    # identical replicates: no spread anywhere, reported as degenerate
    assert oscillation_diagnostics(ev, avg).degenerate


def test_oscillation_averaging_reduces_variance():
    rng = np.random.default_rng(0)
    ev = 0.5 + rng.normal(0, 0.2, size=(10, 20, 6, 3))
    rep = oscillation_diagnostics(ev, ev.mean(axis=1))
    assert rep.fraction_reduced == 1.0


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(lr=0.0)
    with pytest.raises(ValueError):
        RunConfig(temperature=-1.0)
    with pytest.raises(ValueError):
        RunConfig(ema_model_decay=1.0)
