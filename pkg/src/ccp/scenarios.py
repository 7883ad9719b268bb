"""Synthetic Gaussian-mixture datasets, data-quality perturbations and batching."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SCENARIOS = ("base", "few-label", "open-set", "noisy-label", "imbalance-U", "imbalance-L")
FEW_LABEL_COUNTS = {1: 25, 2: 4, 3: 2}
NOISE_RATES = {1: 0.2, 2: 0.4, 3: 0.6}
UNLABELED_KEEP = {1: 0.2, 2: 0.1, 3: 0.0}
# fraction of the OOD reserve moved into U: CIFAR-10 classes [4,5], [4,7], [4,9] out of [4,9]
OPEN_SET_FRACTION = {1: 2 / 6, 2: 4 / 6, 3: 1.0}

UNLABELED = -1


class DatasetContractError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str = "base"
    severity: int = 1
    seed: int = 0
    num_classes: int = 4
    dim: int = 16
    labeled_per_class: int = 40
    unlabeled_per_class: int = 460
    ood_clusters: int = 6
    test_per_class: int = 200
    separation: float = 3.0
    modes_per_class: int = 3
    mode_spread: float = 1.2
    noise_dims: int = 8

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.severity not in (1, 2, 3):
            raise ValueError(f"severity must be 1, 2 or 3, got {self.severity}")
        counts = (self.num_classes, self.dim, self.labeled_per_class, self.unlabeled_per_class, self.test_per_class)
        if min(counts) <= 0 or self.ood_clusters < 0:
            raise ValueError("dataset counts must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")


@dataclass
class ScenarioDataset:
    """Feature rows with given labels (-1 = unlabeled), hidden truth and OOD flags.

    ``true_label`` of an OOD row is ``-1``. The held-out test split is kept
    alongside so every run evaluates on the same unperturbed distribution.
    """

    x: np.ndarray
    given_label: np.ndarray
    true_label: np.ndarray
    is_ood: np.ndarray
    num_classes: int
    x_test: np.ndarray | None = None
    y_test: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        n = self.x.shape[0]
        for name in ("given_label", "true_label", "is_ood"):
            if getattr(self, name).shape != (n,):
                raise DatasetContractError(f"{name} must have one entry per row")
        if not np.all(np.isfinite(self.x)):
            raise DatasetContractError("features must be finite")
        K = self.num_classes
        g = self.given_label
        if np.any((g != UNLABELED) & ((g < 0) | (g >= K))):
            raise DatasetContractError("given labels must be -1 or in [0, K)")
        if np.any(self.is_ood & (g != UNLABELED)):
            raise DatasetContractError("OOD samples cannot carry a given label")
        t = self.true_label
        if np.any(~self.is_ood & ((t < 0) | (t >= K))):
            raise DatasetContractError("in-distribution samples need a true label in [0, K)")

    @property
    def labeled(self) -> np.ndarray:
        return np.flatnonzero(self.given_label != UNLABELED)

    @property
    def unlabeled(self) -> np.ndarray:
        return np.flatnonzero(self.given_label == UNLABELED)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, keep: np.ndarray, **meta) -> "ScenarioDataset":
        return replace(
            self,
            x=self.x[keep],
            given_label=self.given_label[keep],
            true_label=self.true_label[keep],
            is_ood=self.is_ood[keep],
            meta={**self.meta, **meta},
        )

    def with_labels(self, given_label: np.ndarray, **meta) -> "ScenarioDataset":
        return replace(self, given_label=given_label, meta={**self.meta, **meta})


# ---------------------------------------------------------------------------
# generation


def _mixture_centres(spec: ScenarioSpec, rng: np.random.Generator):
    """Class centres on a scaled simplex plus per-class sub-mode offsets."""
    n_groups = spec.num_classes + spec.ood_clusters
    signal_dim = spec.dim - spec.noise_dims
    if signal_dim <= 0:
        raise ValueError("noise_dims must leave at least one informative dimension")
    if spec.num_classes > signal_dim:
        raise ValueError("need at least one informative dimension per class")
    basis = np.linalg.qr(rng.standard_normal((signal_dim, signal_dim)))[0].T
    # classes sit on orthonormal (equidistant) directions; OOD clusters take the
    # spare directions first, then random unit vectors that may crowd the classes
    extra = max(0, n_groups - signal_dim)
    rand = rng.standard_normal((extra, signal_dim))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    dirs = np.vstack([basis, rand])[:n_groups]
    centres = spec.separation * dirs
    modes = centres[:, None, :] + spec.mode_spread * rng.standard_normal(
        (n_groups, spec.modes_per_class, signal_dim)
    ) / math.sqrt(signal_dim)
    return modes


def _sample_group(modes: np.ndarray, count: int, spec: ScenarioSpec, rng) -> np.ndarray:
    which = rng.integers(0, modes.shape[0], size=count)
    signal = modes[which] + rng.standard_normal((count, modes.shape[1]))
    noise = rng.standard_normal((count, spec.noise_dims))
    return np.hstack([signal, noise])


def generate_base(spec: ScenarioSpec) -> ScenarioDataset:
    """Base-case mixture: K in-distribution classes split into L and U, plus a test split.

    The OOD reserve clusters are generated too (stored in ``meta``) so that
    the open-set perturbation can move them into U without touching ID data.
    """
    rng = np.random.default_rng([spec.seed, 0])
    modes = _mixture_centres(spec, rng)
    K = spec.num_classes
    per_class = spec.labeled_per_class + spec.unlabeled_per_class
    xs, given, true = [], [], []
    for k in range(K):
        xk = _sample_group(modes[k], per_class, spec, rng)
        xs.append(xk)
        g = np.full(per_class, UNLABELED)
        g[: spec.labeled_per_class] = k
        given.append(g)
        true.append(np.full(per_class, k))
    x = np.vstack(xs)
    x_test = np.vstack([_sample_group(modes[k], spec.test_per_class, spec, rng) for k in range(K)])
    y_test = np.repeat(np.arange(K), spec.test_per_class)
    ood = [_sample_group(modes[K + r], per_class, spec, rng) for r in range(spec.ood_clusters)]
    # standardise with statistics of the in-distribution training pool
    mu, sd = x.mean(axis=0), x.std(axis=0)
    x = (x - mu) / sd
    x_test = (x_test - mu) / sd
    ood = [(o - mu) / sd for o in ood]
    n = x.shape[0]
    return ScenarioDataset(
        x=x,
        given_label=np.concatenate(given),
        true_label=np.concatenate(true),
        is_ood=np.zeros(n, dtype=bool),
        num_classes=K,
        x_test=x_test,
        y_test=y_test,
        meta={"scenario": "base", "severity": 0, "seed": spec.seed, "ood_reserve": ood},
    )


def _perturb_rng(ds: ScenarioDataset, tag: int) -> np.random.Generator:
    return np.random.default_rng([int(ds.meta.get("seed", 0)), 1, tag])


def _check_severity(severity: int) -> None:
    if severity not in (1, 2, 3):
        raise ValueError(f"severity must be 1, 2 or 3, got {severity}")


def _reduce_labels(ds: ScenarioDataset, classes, keep_count: int, rng) -> np.ndarray:
    given = ds.given_label.copy()
    for k in classes:
        idx = np.flatnonzero(given == k)
        if idx.size > keep_count:
            drop = rng.choice(idx, size=idx.size - keep_count, replace=False)
            given[drop] = UNLABELED
    return given


def apply_few_label(ds: ScenarioDataset, severity: int) -> ScenarioDataset:
    """Move labeled samples to U until 25 / 4 / 2 labels per class remain."""
    _check_severity(severity)
    count = FEW_LABEL_COUNTS[severity]
    given = _reduce_labels(ds, range(ds.num_classes), count, _perturb_rng(ds, 1))
    return ds.with_labels(given, scenario="few-label", severity=severity)


def apply_open_set(ds: ScenarioDataset, severity: int) -> ScenarioDataset:
    _check_severity(severity)
    reserve = ds.meta.get("ood_reserve", [])
    take = int(round(OPEN_SET_FRACTION[severity] * len(reserve)))
    if take == 0:
        return ds.with_labels(ds.given_label.copy(), scenario="open-set", severity=severity)
    extra = np.vstack(reserve[:take])
    m = extra.shape[0]
    return replace(
        ds,
        x=np.vstack([ds.x, extra]),
        given_label=np.concatenate([ds.given_label, np.full(m, UNLABELED)]),
        true_label=np.concatenate([ds.true_label, np.full(m, -1)]),
        is_ood=np.concatenate([ds.is_ood, np.ones(m, dtype=bool)]),
        meta={**ds.meta, "scenario": "open-set", "severity": severity, "ood_clusters_added": take},
    )


def apply_label_noise(ds: ScenarioDataset, severity: int) -> ScenarioDataset:
    """Flip exactly ``round(rate * |L|)`` given labels to a different class."""
    _check_severity(severity)
    rng = _perturb_rng(ds, 3)
    given = ds.given_label.copy()
    lab = ds.labeled
    n_flip = int(round(NOISE_RATES[severity] * lab.size))
    flip = rng.choice(lab, size=n_flip, replace=False)
    shift = rng.integers(1, ds.num_classes, size=n_flip)
    given[flip] = (given[flip] + shift) % ds.num_classes
    return ds.with_labels(given, scenario="noisy-label", severity=severity, flipped=np.sort(flip))


def affected_classes(num_classes: int) -> np.ndarray:
    """The last half of the in-distribution classes."""
    return np.arange(num_classes - num_classes // 2, num_classes)


def apply_imbalance(ds: ScenarioDataset, which: str, severity: int) -> ScenarioDataset:
    """Shrink U (to 20/10/0%) or L (to 25/4/2 per class) of the last half of classes."""
    _check_severity(severity)
    classes = affected_classes(ds.num_classes)
    if which == "L":
        given = _reduce_labels(ds, classes, FEW_LABEL_COUNTS[severity], _perturb_rng(ds, 5))
        # labels removed from these classes are discarded, not moved to U
        dropped = (ds.given_label != UNLABELED) & (given == UNLABELED)
        out = ds.with_labels(given)
        return out.subset(~dropped, scenario="imbalance-L", severity=severity)
    if which == "U":
        rng = _perturb_rng(ds, 4)
        keep = np.ones(ds.x.shape[0], dtype=bool)
        for k in classes:
            idx = np.flatnonzero((ds.given_label == UNLABELED) & (ds.true_label == k) & ~ds.is_ood)
            n_keep = int(round(UNLABELED_KEEP[severity] * idx.size))
            drop = rng.choice(idx, size=idx.size - n_keep, replace=False)
            keep[drop] = False
        return ds.subset(keep, scenario="imbalance-U", severity=severity)
    raise ValueError(f"which must be 'U' or 'L', got {which!r}")


def make_scenario(spec: ScenarioSpec) -> ScenarioDataset:
    ds = generate_base(spec)
    s = spec.scenario
    if s == "base":
        return ds
    if s == "few-label":
        return apply_few_label(ds, spec.severity)
    if s == "open-set":
        return apply_open_set(ds, spec.severity)
    if s == "noisy-label":
        return apply_label_noise(ds, spec.severity)
    if s == "imbalance-U":
        return apply_imbalance(ds, "U", spec.severity)
    return apply_imbalance(ds, "L", spec.severity)


# ---------------------------------------------------------------------------
# transforms


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    noise_mean: tuple[float, float] = (-0.05, 0.05)
    noise_std: tuple[float, float] = (0.05, 0.25)
    fraction: tuple[float, float] = (0.10, 0.25)
    scale: tuple[float, float] = (0.8, 1.25)

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform {self.kind!r}")
        lo, hi = self.fraction
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("fraction range must lie in [0, 1]")
        if self.noise_std[0] < 0 or self.scale[0] <= 0:
            raise ValueError("noise std must be >= 0 and scale factors > 0")


TRANSFORM_KINDS = ("gaussian-noise", "feature-hide", "feature-scramble", "scale-jitter")
DEFAULT_TRANSFORMS = tuple(TransformSpec(k) for k in TRANSFORM_KINDS)


def apply_transform(x: np.ndarray, t: TransformSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply one transform to a feature vector or row-wise to a batch."""
    x = np.asarray(x, dtype=np.float64)
    batch = x if x.ndim == 2 else x[None, :]
    n, d = batch.shape
    out = batch.copy()
    if t.kind == "gaussian-noise":
        mu = rng.uniform(*t.noise_mean, size=(n, 1))
        sd = rng.uniform(*t.noise_std, size=(n, 1))
        out += mu + sd * rng.standard_normal((n, d))
    elif t.kind == "scale-jitter":
        out *= rng.uniform(*t.scale, size=(n, 1))
    else:
        m = np.rint(rng.uniform(*t.fraction, size=n) * d).astype(np.int64)
        # columns in random order per row; the first m[r] of row r are affected
        cols = np.argsort(rng.random((n, d)), axis=1)
        chosen = np.arange(d)[None, :] < m[:, None]
        rows = np.broadcast_to(np.arange(n)[:, None], (n, d))
        if t.kind == "feature-hide":
            out[rows[chosen], cols[chosen]] = 0.0
        else:
            # random permutation of the first m[r] slots, identity elsewhere
            keys = np.where(chosen, rng.random((n, d)), np.inf)
            perm = np.argsort(keys, axis=1, kind="stable")
            src = np.take_along_axis(cols, perm, axis=1)
            out[rows[chosen], cols[chosen]] = batch[rows[chosen], src[chosen]]
    return out if x.ndim == 2 else out[0]


def random_views(x: np.ndarray, rng: np.random.Generator, transforms=DEFAULT_TRANSFORMS) -> np.ndarray:
    """Two independently transformed views of a batch, stacked as ``[t1(x); t2(x)]``."""
    t1, t2 = rng.choice(len(transforms), size=2)
    return np.vstack([apply_transform(x, transforms[t1], rng), apply_transform(x, transforms[t2], rng)])


# ---------------------------------------------------------------------------
# balanced batching


@dataclass
class Batch:
    indices: np.ndarray  # dataset row of each batch position
    propagate: np.ndarray  # batch positions whose credibility is re-estimated


def draw_balanced_batches(
    q: np.ndarray,
    pool: np.ndarray,
    n_pool: int,
    anchors_per_class: int,
    rng: np.random.Generator,
    propagate_mask: np.ndarray | None = None,
) -> list[Batch]:
    """One epoch of batches covering every row of ``pool``.

    Each batch takes ``n_pool`` rows from a shuffled ``pool`` plus
    ``anchors_per_class`` rows per class drawn with replacement among rows
    whose clipped credibility points to that class. ``q`` is the clipped
    credibility of every dataset row; ``propagate_mask`` marks rows that are
    not clamped.
    """
    q = np.asarray(q)
    K = q.shape[1]
    credible = q.max(axis=1) > 0
    top = q.argmax(axis=1)
    carriers = [np.flatnonzero(credible & (top == k)) for k in range(K)]
    for k, c in enumerate(carriers):
        if c.size == 0:
            raise DatasetContractError(f"class {k} has zero credibility mass in the dataset")
    if propagate_mask is None:
        propagate_mask = np.zeros(q.shape[0], dtype=bool)
        propagate_mask[pool] = True
    order = rng.permutation(pool)
    n_batches = max(1, math.ceil(order.size / n_pool))
    batches = []
    for b in range(n_batches):
        body = order[b * n_pool : (b + 1) * n_pool]
        anchors = [rng.choice(c, size=anchors_per_class, replace=True) for c in carriers]
        idx = np.concatenate([body, *anchors])
        batches.append(Batch(indices=idx, propagate=np.flatnonzero(propagate_mask[idx])))
    return batches


def check_batch_balance(q: np.ndarray, indices: np.ndarray) -> bool:
    """True when every class has a credible carrier among ``indices``."""
    q = np.asarray(q)[indices]
    credible = q.max(axis=1) > 0
    present = set(q[credible].argmax(axis=1).tolist())
    return present == set(range(q.shape[1]))


# ---------------------------------------------------------------------------
# file format


def save_dataset(ds: ScenarioDataset, path) -> None:
    """Write the delimited-text format (given_label = -1 for unlabeled rows)."""
    path = Path(path)
    d = ds.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"feature_{i}" for i in range(d)] + ["given_label", "true_label", "is_ood"])
        for i in range(ds.x.shape[0]):
            w.writerow(
                [repr(float(v)) for v in ds.x[i]]
                + [int(ds.given_label[i]), int(ds.true_label[i]), int(bool(ds.is_ood[i]))]
            )


def load_dataset(path, num_classes: int | None = None) -> ScenarioDataset:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetContractError(f"{path}: empty file")
    header = rows[0]
    if header[-3:] != ["given_label", "true_label", "is_ood"]:
        raise DatasetContractError(f"{path}: header must end with given_label,true_label,is_ood")
    d = len(header) - 3
    if header[:d] != [f"feature_{i}" for i in range(d)]:
        raise DatasetContractError(f"{path}: feature columns must be feature_0..feature_{d - 1}")
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, d + 3)
    except ValueError as exc:
        raise DatasetContractError(f"{path}: {exc}") from exc
    true = body[:, d + 1].astype(np.int64)
    K = num_classes if num_classes is not None else int(true.max()) + 1
    return ScenarioDataset(
        x=body[:, :d],
        given_label=body[:, d].astype(np.int64),
        true_label=true,
        is_ood=body[:, d + 2].astype(bool),
        num_classes=K,
        meta={"source": str(path)},
    )
