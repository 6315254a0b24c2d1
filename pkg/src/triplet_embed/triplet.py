"""Triplet loss, margin schedule, random triplet sampling and the training loop."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .classify import fit_centroids, predict_centroid
from .errors import DatasetError, NumericFault, StructuralError
from .metrics import centroid_drift, cluster_radius, fmt
from .network import OptimizerState, center_output_bias, sgd_step
from .rng import CALIBRATE, TRIPLETS, make_rng

log = logging.getLogger(__name__)

DEFAULT_MARGINS = ((0, 1.0), (20, 1.3), (30, 1.5))


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


def _check_dims(a, p, n):
    if not (a.shape == p.shape == n.shape):
        raise StructuralError(f"triplet vectors differ in shape: {a.shape}, {p.shape}, {n.shape}")


def triplet_loss(a, p, n, alpha):
    """max(0, |a-p|^2 - |a-n|^2 + alpha), row-wise for 2-D input."""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (a, p, n))
    _check_dims(a, p, n)
    dp = ((a - p) ** 2).sum(axis=-1)
    dn = ((a - n) ** 2).sum(axis=-1)
    return np.maximum(0.0, dp - dn + alpha)


def triplet_grads(a, p, n, alpha):
    """Gradients of :func:`triplet_loss` w.r.t. (a, p, n); zero where the hinge is inactive."""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (a, p, n))
    _check_dims(a, p, n)
    active = (triplet_loss(a, p, n, alpha) > 0)[..., None]
    return 2 * (n - p) * active, -2 * (a - p) * active, 2 * (a - n) * active


@dataclass(frozen=True)
class MarginSchedule:
    steps: tuple = DEFAULT_MARGINS

    def __post_init__(self):
        steps = tuple((int(i), float(a)) for i, a in self.steps)
        if not steps or steps[0][0] != 0:
            raise ValueError("margin schedule must start at iteration 0")
        if any(b[0] <= a[0] for a, b in zip(steps, steps[1:])):
            raise ValueError("margin schedule iterations must increase strictly")
        if any(a <= 0 for _, a in steps):
            raise ValueError("margins must be positive")
        object.__setattr__(self, "steps", steps)

    @classmethod
    def parse(cls, text):
        """``"0:1.0,20:1.3,30:1.5"``"""
        steps = []
        for part in text.split(","):
            it, alpha = part.split(":")
            steps.append((int(it), float(alpha)))
        return cls(tuple(steps))

    def __str__(self):
        return ",".join(f"{i}:{a!r}" for i, a in self.steps)


def margin_at(schedule, iteration):
    alpha = schedule.steps[0][1]
    for start, a in schedule.steps:
        if start <= iteration:
            alpha = a
    return alpha


class TripletSampler:
    """Random triplets from the training split.

    The anchor class is uniform over classes with at least two training
    samples; the positive is uniform over the rest of that class. With
    ``negative="sample"`` the negative is uniform over all training samples
    of other classes, with ``negative="class"`` a class is drawn first.
    """

    def __init__(self, train, negative="sample"):
        if negative not in ("sample", "class"):
            raise ValueError(f"unknown negative sampling {negative!r}")
        self.negative = negative
        self.classes = [c for c in sorted(train) if len(train[c]) > 0]
        self.members = {c: np.asarray(train[c], dtype=np.int64) for c in self.classes}
        self.eligible = [c for c in self.classes if len(self.members[c]) >= 2]
        if not self.eligible:
            raise DatasetError("no class has two training samples to form an anchor/positive pair")
        if len(self.classes) < 2:
            raise DatasetError("triplets need at least two classes with training samples")
        self.pool = np.concatenate([self.members[c] for c in self.classes])
        sizes = [len(self.members[c]) for c in self.classes]
        self.offsets = dict(zip(self.classes, np.cumsum([0] + sizes[:-1]).tolist()))

    def __call__(self, rng):
        c = self.eligible[rng.integers(len(self.eligible))]
        own = self.members[c]
        i, j = rng.choice(len(own), size=2, replace=False)
        if self.negative == "sample":
            r = int(rng.integers(len(self.pool) - len(own)))
            if r >= self.offsets[c]:
                r += len(own)
            neg = self.pool[r]
        else:
            others = [d for d in self.classes if d != c]
            d = others[rng.integers(len(others))]
            neg = self.members[d][rng.integers(len(self.members[d]))]
        return Triplet(int(own[i]), int(own[j]), int(neg))


def sample_triplet(splits, rng, negative="sample"):
    return TripletSampler(splits.train, negative)(rng)


@dataclass
class TrainConfig:
    batch_size: int = 20
    batches_per_iteration: int = 100
    iterations: int = 40
    margins: MarginSchedule = field(default_factory=MarginSchedule)
    learning_rate: float = 0.01
    decay: float = 0.9
    momentum: float = 0.0
    seed: int = 0
    val_cap: int = 50
    negative_sampling: str = "sample"
    center_init: bool = True
    calibration_samples: int = 512

    def __post_init__(self):
        if self.batch_size < 1 or self.batches_per_iteration < 1:
            raise ValueError("batch sizes must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.negative_sampling not in ("sample", "class"):
            raise ValueError(f"unknown negative sampling {self.negative_sampling!r}")


@dataclass
class IterationRecord:
    iteration: int
    mean_loss: float
    val_accuracy: float
    radius: np.ndarray
    drift: np.ndarray


@dataclass
class TrainHistory:
    classes: list  # class ids of the diagnostic columns
    class_names: list
    records: list = field(default_factory=list)
    initial_radius: np.ndarray = None

    def to_tsv(self):
        cols = ["iteration", "mean_loss", "val_centroid_accuracy"]
        cols += [f"radius:{n}" for n in self.class_names]
        cols += [f"drift:{n}" for n in self.class_names]
        lines = ["\t".join(cols)]
        for r in self.records:
            vals = [str(r.iteration), fmt(r.mean_loss), fmt(r.val_accuracy)]
            vals += [fmt(v) for v in r.radius] + [fmt(v) for v in r.drift]
            lines.append("\t".join(vals))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text):
        lines = text.rstrip("\n").split("\n")
        head = lines[0].split("\t")
        names = [h.split(":", 1)[1] for h in head if h.startswith("radius:")]
        c = len(names)
        hist = cls(list(range(c)), names)
        for line in lines[1:]:
            v = line.split("\t")
            hist.records.append(IterationRecord(
                int(v[0]), float(v[1]), float(v[2]),
                np.array([float(x) for x in v[3:3 + c]]),
                np.array([float(x) for x in v[3 + c:3 + 2 * c]])))
        return hist


def validation_subset(splits, cap):
    idx, lab = [], []
    for c in sorted(splits.val):
        members = splits.val[c][:cap]
        idx += members
        lab += [c] * len(members)
    return np.asarray(idx, dtype=np.int64), np.asarray(lab, dtype=np.int64)


def diagnostics(net, params, images, idx, labels):
    """(centroid model, per-class radius, closest-centroid accuracy) on a labeled subset."""
    emb = net.embed(params, images[idx])
    model = fit_centroids(emb, labels)
    radius = cluster_radius(emb, labels, model.classes)
    acc = float(np.mean(predict_centroid(model, emb) == labels))
    return model, radius, acc


def train_batch(net, params, images, triplets, alpha):
    """Mean loss and summed-then-averaged parameter gradients for one batch.

    The anchor, positive and negative branches share ``params``; all 3B
    images go through one forward/backward pass.
    """
    b = len(triplets)
    order = [t.anchor for t in triplets] + [t.positive for t in triplets] + [t.negative for t in triplets]
    y, cache = net.forward(params, images[order])
    a, p, n = y[:b], y[b:2 * b], y[2 * b:]
    losses = triplet_loss(a, p, n, alpha)
    ga, gp, gn = triplet_grads(a, p, n, alpha)
    grads = net.backward(params, cache, np.concatenate([ga, gp, gn]) / b)
    return float(losses.mean()), grads


def train(config, splits, images, net, params=None, progress=None):
    """Train ``net`` on ``images`` indexed by ``splits``; returns (params, history).

    The iteration counter starts at 0 and indexes both the margin schedule
    and the learning-rate decay. After each iteration the validation split
    (at most ``val_cap`` samples per class) is embedded to record cluster
    radius, centroid drift and closest-centroid accuracy.
    """
    images = np.asarray(images, dtype=np.float64)
    sampler = TripletSampler(splits.train, config.negative_sampling)
    if params is None:
        params = net.init_params(config.seed)
        if config.center_init:
            pool = np.concatenate([np.asarray(splits.train[c], dtype=np.int64) for c in sorted(splits.train)])
            pick = make_rng(config.seed, CALIBRATE).permutation(len(pool))[:config.calibration_samples]
            params = center_output_bias(net, params, images[np.sort(pool[pick])])
    rng = make_rng(config.seed, TRIPLETS)
    state = OptimizerState(config.learning_rate, config.decay, config.momentum)
    val_idx, val_lab = validation_subset(splits, config.val_cap)
    has_val = len(np.unique(val_lab)) >= 1
    if has_val:
        prev, radius0, _ = diagnostics(net, params, images, val_idx, val_lab)
        classes = prev.classes.tolist()
    else:
        prev, radius0, classes = None, np.zeros(0), []
    hist = TrainHistory(classes, [splits.class_names[c] for c in classes], initial_radius=radius0)

    for it in range(config.iterations):
        alpha = margin_at(config.margins, it)
        total = 0.0
        for bi in range(config.batches_per_iteration):
            triplets = [sampler(rng) for _ in range(config.batch_size)]
            try:
                loss, grads = train_batch(net, params, images, triplets, alpha)
                params, state = sgd_step(params, grads, state, it)
            except NumericFault as e:
                raise NumericFault(f"iteration {it + 1}, batch {bi + 1}: {e}") from e
            total += loss
        mean_loss = total / config.batches_per_iteration
        if has_val:
            model, radius, acc = diagnostics(net, params, images, val_idx, val_lab)
            drift = centroid_drift(prev, model)
            prev = model
        else:
            radius = drift = np.zeros(0)
            acc = float("nan")
        rec = IterationRecord(it + 1, mean_loss, acc, radius, drift)
        hist.records.append(rec)
        log.info("iteration %d: margin %.2f loss %.4f val acc %.3f mean radius %.4f",
                 it + 1, alpha, mean_loss, acc, radius.mean() if len(radius) else float("nan"))
        if progress is not None:
            progress(rec)
    return params, hist
