"""CCP orchestration: pretraining, refinement iterations, classifier training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import clamped_label, clip_credibility, credibility_adjust, one_hot
from .losses import soft_contrastive_loss, soft_cross_entropy
from .model import ENCODER, G_HEAD, MLP, SGD, Z_HEAD, NetworkConfig, cosine_lr
from .propagation import propagate_batch
from .scenarios import (
    UNLABELED,
    DatasetContractError,
    ScenarioDataset,
    draw_balanced_batches,
    random_views,
)
from .subsampling import choose_subsample

log = logging.getLogger(__name__)

GAMMA_TOL = 1e-9


@dataclass
class RunConfig:
    # network
    hidden_layers: tuple[int, ...] = (64, 64, 32)
    embed_dim: int = 16
    activation: str = "relu"
    weight_decay: float = 5e-4
    temperature: float = 0.1
    # optimisation
    lr: float = 0.06
    first_iter_lr: float = 0.0006
    momentum: float = 0.9
    nesterov: bool = True
    # warmup
    pretrain: bool = True
    warmup_epochs: int = 40
    # CCP iterations
    batch_size: int = 128
    anchors_per_class: int = 8
    first_iter_epochs: int = 50
    max_epochs: int = 20
    ema_loss_decay: float = 0.99
    patience: int = 5
    max_iterations: int = 12
    convergence_tol: float = 0.005
    single_iteration: bool = False
    trusted_labels: bool = True
    subsample: bool = True
    initial_d_max: float = 0.01
    # classifier phase
    classifier_epochs: int = 200
    classifier_batch_size: int = 64
    ema_model_decay: float = 0.999
    reset_before_classifier: bool = True
    joint_loss: bool = True
    # tracing
    trace_samples: int = 0

    def __post_init__(self):
        self.hidden_layers = tuple(int(h) for h in self.hidden_layers)
        if self.lr <= 0 or self.first_iter_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.ema_loss_decay < 1.0 or not 0.0 < self.ema_model_decay < 1.0:
            raise ValueError("EMA decays must lie in (0, 1)")
        if self.batch_size <= 0 or self.classifier_batch_size <= 0 or self.anchors_per_class <= 0:
            raise ValueError("batch sizes must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.initial_d_max < 0:
            raise ValueError("initial d_max must be nonnegative")

    def network(self, input_dim: int, num_classes: int) -> NetworkConfig:
        return NetworkConfig(
            input_dim=input_dim,
            num_classes=num_classes,
            hidden_layers=self.hidden_layers,
            embed_dim=self.embed_dim,
            activation=self.activation,
            weight_decay=self.weight_decay,
        )


@dataclass
class IterationMetrics:
    iteration: int
    epochs_run: int
    pseudo_label_accuracy: float
    mean_strength_correct: float
    mean_strength_incorrect: float
    p_chosen: int
    d_max: float
    gamma: float
    ema_loss_final: float

    FIELDS = (
        "iteration",
        "epochs_run",
        "pseudo_label_accuracy",
        "mean_strength_correct",
        "mean_strength_incorrect",
        "p_chosen",
        "d_max",
        "gamma",
        "ema_loss_final",
    )


@dataclass
class CCPState:
    """Master credibility vectors and the subsampling schedule.

    ``q`` stores clamped rows in their raw +-1 form and every other row in
    clipped form; ``clipped()`` is what batches, losses and propagation see.
    """

    q: np.ndarray
    clamped: np.ndarray
    pool: np.ndarray
    p_last: int = 100
    d_max: float = 0.01
    iteration: int = 0
    history: list[IterationMetrics] = field(default_factory=list)
    last_q_hat: np.ndarray | None = None
    confidence_mass: float = 0.0  # total strength before subsampling, last iteration
    traces: list[tuple[int, int, np.ndarray]] = field(default_factory=list)

    def clipped(self) -> np.ndarray:
        return clip_credibility(self.q)


def init_state(ds: ScenarioDataset, config: RunConfig) -> CCPState:
    """Clamp trusted labels, or use given labels as guesses when labels are untrusted."""
    K = ds.num_classes
    n = ds.x.shape[0]
    q = np.zeros((n, K))
    lab = ds.labeled
    if config.trusted_labels:
        for i in lab:
            q[i] = clamped_label(ds.given_label[i], K)
        clamped = np.zeros(n, dtype=bool)
        clamped[lab] = True
    else:
        q[lab] = one_hot(ds.given_label[lab], K)
        clamped = np.zeros(n, dtype=bool)
    return CCPState(q=q, clamped=clamped, pool=np.flatnonzero(~clamped), d_max=config.initial_d_max)


class EarlyStopper:
    """Batch-wise EMA of the loss; stops after ``patience`` epoch checks without a new minimum."""

    def __init__(self, decay: float, patience: int):
        self.decay = decay
        self.patience = patience
        self.value: float | None = None
        self.best = math.inf
        self.bad = 0

    def update(self, loss: float) -> None:
        self.value = loss if self.value is None else self.decay * self.value + (1 - self.decay) * loss

    def epoch_end(self) -> bool:
        if self.value is None:
            return False
        if self.value < self.best:
            self.best = self.value
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


def _ema_decay(decay: float, step: int) -> float:
    # warm-up so the shadow copy does not lag behind short runs
    return min(decay, (1.0 + step) / (10.0 + step))


# ---------------------------------------------------------------------------
# phases


def warmup_pretrain(model: MLP, ds: ScenarioDataset, config: RunConfig, rng: np.random.Generator) -> None:
    """SimCLR-style pretraining of f_b, f_z on every row, then snapshot."""
    losses = []
    if config.pretrain and config.warmup_epochs > 0:
        rows = np.arange(ds.x.shape[0])
        n = config.batch_size + config.anchors_per_class * ds.num_classes
        per_epoch = max(1, math.ceil(rows.size / n))
        total = per_epoch * config.warmup_epochs
        opt = SGD(config.lr, config.momentum, config.nesterov)
        step = 0
        for _ in range(config.warmup_epochs):
            order = rng.permutation(rows)
            epoch_loss = 0.0
            for b in range(per_epoch):
                idx = order[b * n : (b + 1) * n]
                if idx.size < 2:
                    continue
                _, z, _ = model.forward(random_views(ds.x[idx], rng))
                loss, dz = soft_contrastive_loss(z, None, config.temperature, mode="simclr")
                grads = model.backward(dz=dz, groups=(ENCODER, Z_HEAD))
                opt.step(model.params, grads, lr=cosine_lr(config.lr, step, total))
                step += 1
                epoch_loss += loss
            losses.append(epoch_loss / per_epoch)
    model.take_snapshot()
    return losses


def _pseudo_label_stats(q_clipped: np.ndarray, truth: np.ndarray, rows: np.ndarray):
    """Accuracy over in-distribution ``rows`` (zero vectors count as wrong) and strengths."""
    rows = rows[truth[rows] >= 0]
    if rows.size == 0:
        return float("nan"), float("nan"), float("nan")
    q = q_clipped[rows]
    w = q.max(axis=1)
    labelled = w > 0
    correct = labelled & (q.argmax(axis=1) == truth[rows])
    wrong = labelled & ~correct
    acc = float(correct.mean())
    s_ok = float(w[correct].mean()) if correct.any() else float("nan")
    s_bad = float(w[wrong].mean()) if wrong.any() else float("nan")
    return acc, s_ok, s_bad


def run_ccp_iteration(
    state: CCPState,
    model: MLP,
    ds: ScenarioDataset,
    config: RunConfig,
    rng: np.random.Generator,
    trace_rows: np.ndarray | None = None,
    record_epochs: bool = False,
) -> IterationMetrics:
    """One refinement iteration; updates ``state`` in place and returns its metrics.

    With ``record_epochs`` the per-epoch mean of propagated vectors for
    ``trace_rows`` is kept in ``state.traces`` as ``(row, epoch, vector)``.
    """
    K = ds.num_classes
    n_rows = ds.x.shape[0]
    first = state.iteration == 0
    model.reset_to_snapshot((ENCODER, Z_HEAD))
    qc = state.clipped()
    pool = state.pool
    propagate_mask = ~state.clamped
    epochs = config.first_iter_epochs if first else config.max_epochs
    base_lr = config.first_iter_lr if first else config.lr
    per_epoch = max(1, math.ceil(pool.size / config.batch_size))
    total = per_epoch * epochs
    opt = SGD(base_lr, config.momentum, config.nesterov)
    stopper = EarlyStopper(config.ema_loss_decay, config.patience)
    acc_sum = np.zeros((n_rows, K))
    acc_cnt = np.zeros(n_rows)
    traced = np.zeros(n_rows, dtype=bool)
    if trace_rows is not None:
        traced[trace_rows] = True
    state.traces = []
    step = 0
    epochs_run = 0
    for epoch in range(epochs):
        ep_sum = np.zeros((n_rows, K)) if record_epochs else None
        ep_cnt = np.zeros(n_rows) if record_epochs else None
        batches = draw_balanced_batches(qc, pool, config.batch_size, config.anchors_per_class, rng, propagate_mask)
        for batch in batches:
            idx = batch.indices
            _, z, _ = model.forward(random_views(ds.x[idx], rng))
            qb = qc[idx]
            if batch.propagate.size:
                q_tilde = propagate_batch(z, qb, batch.propagate)
                rows = idx[batch.propagate]
                np.add.at(acc_sum, rows, q_tilde)
                np.add.at(acc_cnt, rows, 1.0)
                if record_epochs:
                    np.add.at(ep_sum, rows, q_tilde)
                    np.add.at(ep_cnt, rows, 1.0)
            loss, dz = soft_contrastive_loss(z, qb, config.temperature)
            grads = model.backward(dz=dz, groups=(ENCODER, Z_HEAD))
            opt.step(model.params, grads, lr=cosine_lr(base_lr, step, total))
            stopper.update(loss)
            step += 1
        epochs_run += 1
        if record_epochs:
            for r in np.flatnonzero(traced & (ep_cnt > 0)):
                state.traces.append((int(r), epoch, ep_sum[r] / ep_cnt[r]))
        if not first and stopper.epoch_end():
            break

    if np.any(acc_cnt[pool] == 0):
        raise DatasetContractError("some pool rows were never propagated")
    q_hat = acc_sum[pool] / acc_cnt[pool][:, None]
    state.last_q_hat = q_hat.copy()
    gamma = float(q_hat.max())
    if gamma > GAMMA_TOL:
        q_hat = q_hat / gamma
    else:
        log.warning("iteration %d: gamma=%.3g, skipping scaling", state.iteration + 1, gamma)
    q_new = clip_credibility(credibility_adjust(q_hat))

    acc, s_ok, s_bad = _pseudo_label_stats(_scatter(q_new, pool, n_rows, K), ds.true_label, pool)
    state.confidence_mass = float(q_new.max(axis=1).sum())

    p = 0
    if config.subsample and state.d_max > 0 and q_new.sum() > 0:
        decision = choose_subsample(q_hat, q_new, state.p_last, state.d_max)
        p = decision.p
        q_new[decision.reset_indices()] = 0.0
    d_used = state.d_max
    state.q[pool] = q_new
    state.p_last = p if config.subsample else state.p_last
    state.d_max = state.d_max / 2.0
    state.iteration += 1
    metrics = IterationMetrics(
        iteration=state.iteration,
        epochs_run=epochs_run,
        pseudo_label_accuracy=acc,
        mean_strength_correct=s_ok,
        mean_strength_incorrect=s_bad,
        p_chosen=p,
        d_max=d_used,
        gamma=gamma,
        ema_loss_final=float(stopper.value) if stopper.value is not None else float("nan"),
    )
    state.history.append(metrics)
    return metrics


def _scatter(values: np.ndarray, rows: np.ndarray, n_rows: int, K: int) -> np.ndarray:
    out = np.zeros((n_rows, K))
    out[rows] = values
    return out


def train_classifier(
    state: CCPState,
    model: MLP,
    ds: ScenarioDataset,
    config: RunConfig,
    rng: np.random.Generator,
) -> None:
    """Fit f_b, f_z, f_g on the refined credibility vectors; leaves an EMA copy on ``model``."""
    if config.reset_before_classifier:
        model.reset_to_snapshot((ENCODER, Z_HEAD))
    model.init_params(rng, groups=(G_HEAD,))
    q = state.clipped()
    rows = np.flatnonzero(q.max(axis=1) > 0)
    _fit(model, ds.x, q, rows, config, rng, use_contrastive=config.joint_loss)


def train_baseline(model: MLP, ds: ScenarioDataset, config: RunConfig, rng: np.random.Generator) -> None:
    """Supervised control: cross-entropy on the given labels only."""
    lab = ds.labeled
    q = np.zeros((ds.x.shape[0], ds.num_classes))
    q[lab] = one_hot(ds.given_label[lab], ds.num_classes)
    _fit(model, ds.x, q, lab, config, rng, use_contrastive=False)


def _fit(model, x, q, rows, config, rng, use_contrastive: bool) -> None:
    groups = (ENCODER, Z_HEAD, G_HEAD) if use_contrastive else (ENCODER, G_HEAD)
    bs = config.classifier_batch_size
    per_epoch = max(1, math.ceil(rows.size / bs))
    total = per_epoch * config.classifier_epochs
    opt = SGD(config.lr, config.momentum, config.nesterov)
    model.start_ema()
    step = 0
    for _ in range(config.classifier_epochs):
        order = rng.permutation(rows)
        for b in range(per_epoch):
            idx = order[b * bs : (b + 1) * bs]
            if idx.size == 0:
                continue
            qb = q[idx]
            _, z, g = model.forward(random_views(x[idx], rng))
            qq = np.concatenate([qb, qb], axis=0)
            _, dg = soft_cross_entropy(g, qq)
            dz = None
            if use_contrastive and idx.size > 1:
                _, dz = soft_contrastive_loss(z, qb, config.temperature)
            grads = model.backward(dz=dz, dg=dg, groups=groups)
            opt.step(model.params, grads, lr=cosine_lr(config.lr, step, total))
            step += 1
            model.ema_update(_ema_decay(config.ema_model_decay, step))


def predict(model: MLP, x: np.ndarray, use_ema: bool = True) -> np.ndarray:
    params = model.ema if (use_ema and model.ema is not None) else None
    _, _, g = model.forward(x, params=params, cache=False)
    return g.argmax(axis=1)


def accuracy(model: MLP, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(model, x) == y))


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class OscillationReport:
    rows: np.ndarray
    epoch_values: np.ndarray  # (replicates, epochs, rows, K); nan where a row was not seen
    averaged: np.ndarray  # (replicates, rows, K) iteration-end averages
    var_averaged: np.ndarray  # (rows, K)
    var_single_epoch: np.ndarray  # (rows, K)
    fraction_reduced: float
    degenerate: bool


def oscillation_diagnostics(epoch_values: np.ndarray, averaged: np.ndarray, rows=None) -> OscillationReport:
    """Compare replicate variance of iteration-end averages with single-epoch variance.

    ``epoch_values[r, e, i, k]`` is the epoch-``e`` propagated value of row
    ``i`` in replicate ``r``; ``averaged[r, i, k]`` the replicate's
    iteration-end average. A cell counts as reduced when the variance of the
    average across replicates does not exceed the mean (over epochs) of the
    across-replicate variance of single-epoch values.
    """
    epoch_values = np.asarray(epoch_values, dtype=np.float64)
    averaged = np.asarray(averaged, dtype=np.float64)
    var_avg = averaged.var(axis=0)
    var_single = np.nanmean(np.nanvar(epoch_values, axis=0), axis=0)
    degenerate = bool(np.all(var_single == 0) and np.all(var_avg == 0))
    frac = float("nan") if degenerate else float(np.mean(var_avg <= var_single + 1e-15))
    return OscillationReport(
        rows=np.arange(averaged.shape[1]) if rows is None else np.asarray(rows),
        epoch_values=epoch_values,
        averaged=averaged,
        var_averaged=var_avg,
        var_single_epoch=var_single,
        fraction_reduced=frac,
        degenerate=degenerate,
    )


def replicate_iterations(
    state: CCPState,
    model: MLP,
    ds: ScenarioDataset,
    config: RunConfig,
    rows: np.ndarray,
    replicates: int,
    seed: int,
) -> OscillationReport:
    """Rerun the next iteration ``replicates`` times from the same state with different seeds."""
    epoch_blocks, averages = [], []
    epochs = config.first_iter_epochs if state.iteration == 0 else config.max_epochs
    pos = {int(r): i for i, r in enumerate(state.pool)}
    for r in range(replicates):
        st = CCPState(
            q=state.q.copy(),
            clamped=state.clamped.copy(),
            pool=state.pool.copy(),
            p_last=state.p_last,
            d_max=state.d_max,
            iteration=state.iteration,
        )
        rng = np.random.default_rng([seed, 7, r])
        run_ccp_iteration(st, model, ds, config, rng, trace_rows=rows, record_epochs=True)
        block = np.full((epochs, rows.size, ds.num_classes), np.nan)
        where = {int(v): i for i, v in enumerate(rows)}
        for row, ep, vec in st.traces:
            block[ep, where[row]] = vec
        epoch_blocks.append(block)
        averages.append(st.last_q_hat[[pos[int(v)] for v in rows]])
    return oscillation_diagnostics(np.stack(epoch_blocks), np.stack(averages), rows)


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class PipelineResult:
    baseline_test_acc: float | None
    ccp_test_acc: float | None
    history: list[IterationMetrics]
    state: CCPState | None
    traces: list = field(default_factory=list)
    warmup_losses: list = field(default_factory=list)


def run_ccp(ds: ScenarioDataset, config: RunConfig, seed: int, model: MLP | None = None):
    """Warmup and CCP iterations; returns ``(state, model, warmup_losses)``."""
    seeds = np.random.SeedSequence(seed).spawn(4)
    if model is None:
        model = MLP(config.network(ds.dim, ds.num_classes), seed=int(seeds[0].generate_state(1)[0]))
    warm = warmup_pretrain(model, ds, config, np.random.default_rng(seeds[1]))
    state = init_state(ds, config)
    rng = np.random.default_rng(seeds[2])
    trace_rows = None
    if config.trace_samples:
        trace_rows = state.pool[: config.trace_samples]
    traces = []
    limit = 1 if config.single_iteration else config.max_iterations
    prev_mass = None
    for _ in range(limit):
        m = run_ccp_iteration(state, model, ds, config, rng, trace_rows=trace_rows, record_epochs=trace_rows is not None)
        traces.extend((state.iteration, *t) for t in state.traces)
        log.info(
            "iter %d: acc=%.4f epochs=%d p=%d gamma=%.4f",
            m.iteration, m.pseudo_label_accuracy, m.epochs_run, m.p_chosen, m.gamma,
        )
        mass = state.confidence_mass
        if prev_mass is not None and prev_mass > 0 and abs(mass - prev_mass) / prev_mass < config.convergence_tol:
            break
        prev_mass = mass
    state.traces = traces
    return state, model, warm


def run_full_pipeline(ds: ScenarioDataset, config: RunConfig, seed: int, baseline_only: bool = False) -> PipelineResult:
    if ds.x_test is None:
        raise DatasetContractError("dataset has no held-out test split")
    seeds = np.random.SeedSequence([seed, 99]).spawn(3)
    base_model = MLP(config.network(ds.dim, ds.num_classes), seed=seed)
    train_baseline(base_model, ds, config, np.random.default_rng(seeds[0]))
    baseline_acc = accuracy(base_model, ds.x_test, ds.y_test)
    if baseline_only:
        return PipelineResult(baseline_acc, None, [], None)
    state, model, warm = run_ccp(ds, config, seed)
    train_classifier(state, model, ds, config, np.random.default_rng(seeds[1]))
    ccp_acc = accuracy(model, ds.x_test, ds.y_test)
    return PipelineResult(baseline_acc, ccp_acc, state.history, state, state.traces, warm)


def config_dict(config: RunConfig) -> dict:
    d = asdict(config)
    d["hidden_layers"] = list(config.hidden_layers)
    return d
