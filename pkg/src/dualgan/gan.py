"""Adversarial building blocks: subset partitioning, sub-GAN steps, budgets, pools.

Two sub-GAN flavours share this module:

* output-partitioned ("MO") groups, where ``k`` generators each imitate one
  slice of the data sorted by a shared discriminator's output and are pulled
  toward the slice's representative statistic ``T`` instead of toward "real";
* cluster ("RCC") groups, where every cluster gets its own generator and
  discriminator trained as a plain GAN with the non-saturating generator loss.

Every step function returns the loss evaluated *before* its update.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, NumericError
from .nn import (
    EPS, AdamState, Mlp, adam_step, backprop, backward, bce_loss, bce_with_input_grad,
    forward, init_mlp,
)

MODES = ("by_output", "by_rcc")
ROLES = ("unlabeled", "anomaly")


@dataclass
class SubsetAssignment:
    subsets: list  # list of int arrays indexing the source table
    mode: str = "by_output"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown subset mode {self.mode!r}")
        self.subsets = [np.asarray(s, dtype=np.int64) for s in self.subsets]

    @property
    def count(self) -> int:
        return len(self.subsets)

    @classmethod
    def from_labels(cls, labels) -> "SubsetAssignment":
        labels = np.asarray(labels)
        k = int(labels.max()) + 1 if labels.size else 0
        return cls([np.flatnonzero(labels == j) for j in range(k)], "by_rcc")


@dataclass
class Budget:
    per_generator_counts: np.ndarray
    batch_sizes: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(np.sum(self.per_generator_counts))


@dataclass
class PotentialOutlierPool:
    samples: np.ndarray
    tags: list  # (role, generator id) per row

    def __len__(self):
        return len(self.samples)


@dataclass
class GanGroup:
    """Generators of one side plus their discriminator(s) and optimiser state."""

    generators: list
    discriminators: list
    g_states: list
    d_states: list
    assignment: SubsetAssignment
    role: str
    nash_reached: list = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigurationError(f"unknown role {self.role!r}")
        if len(self.generators) != self.assignment.count:
            raise ConfigurationError("generator count must equal subset count")
        if self.assignment.mode == "by_rcc" and len(self.discriminators) != len(self.generators):
            raise ConfigurationError("cluster mode needs one discriminator per generator")
        if self.assignment.mode == "by_output" and len(self.discriminators) != 1:
            raise ConfigurationError("output mode uses exactly one shared discriminator")
        if self.nash_reached is None:
            self.nash_reached = [False] * len(self.generators)


def generator_dims(d: int) -> list:
    return [d, d, d]


def discriminator_dims(d: int, n: int) -> list:
    return [d, max(1, min(n, 1000)), 10, 1]


def make_generator(d: int, rng) -> Mlp:
    return init_mlp(generator_dims(d), "orthogonal", rng)


def make_discriminator(d: int, n: int, rng) -> Mlp:
    return init_mlp(discriminator_dims(d, n), "variance_scaling", rng)


def make_group(role, assignment, d, rng, *, disc_sizes, lr_g, lr_d) -> GanGroup:
    """Fresh generators/discriminators for ``assignment``.

    ``disc_sizes`` gives the row count each discriminator's hidden width is
    sized from (one entry in output mode, one per cluster in cluster mode).
    """
    gens = [make_generator(d, rng) for _ in range(assignment.count)]
    discs = [make_discriminator(d, s, rng) for s in disc_sizes]
    return GanGroup(
        gens, discs,
        [AdamState.for_mlp(g, learning_rate=lr_g) for g in gens],
        [AdamState.for_mlp(D, learning_rate=lr_d) for D in discs],
        assignment, role,
    )


def sample_noise(rng, m: int, d: int) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(m, d))


def partition_by_output(discriminator_outputs, k: int) -> SubsetAssignment:
    """Sort rows by output (ties by index) and cut into ``k`` balanced slices."""
    out = np.asarray(discriminator_outputs, dtype=np.float64).ravel()
    n = out.size
    if k < 1 or n < k:
        raise ConfigurationError(f"cannot split {n} rows into {k} subsets")
    order = np.argsort(out, kind="stable")
    return SubsetAssignment(np.array_split(order, k), "by_output")


def representative_statistic(outputs) -> float:
    out = np.asarray(outputs, dtype=np.float64).ravel()
    if out.size == 0:
        raise DegenerateInputError("representative statistic of an empty subset")
    return float(np.clip(out.min(), EPS, 1.0 - EPS))


def _checked(loss: float) -> float:
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    return loss


def _discriminator_update(D: Mlp, pos, neg, adam: AdamState) -> float:
    batch = np.vstack([pos, neg])
    targets = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    loss = _checked(bce_loss(forward(D, batch), targets))
    adam_step(D, backprop(D, batch, targets), adam)
    return loss


def _generator_update(G: Mlp, D: Mlp, noise, target: float, adam: AdamState) -> float:
    """One step on ``G`` minimising BCE(D(G(z)), target); ``D`` is only read."""
    fake = forward(G, noise)
    loss, grad_fake = bce_with_input_grad(D, fake, np.full(len(noise), target))
    _checked(loss)
    grads, _ = backward(G, noise, grad_fake)
    adam_step(G, grads, adam)
    return loss


def mo_discriminator_step(D: Mlp, real_batch, generated_batches, adam: AdamState) -> float:
    """Shared-discriminator step: real rows toward 1, every generator's rows toward 0."""
    real = np.asarray(real_batch, dtype=np.float64)
    fakes = [np.asarray(b, dtype=np.float64) for b in generated_batches if len(b)]
    if len(real) == 0 or not fakes:
        raise DegenerateInputError("discriminator step needs real and generated rows")
    return _discriminator_update(D, real, np.vstack(fakes), adam)


def mo_generator_step(G: Mlp, D: Mlp, noise_batch, T: float, adam: AdamState) -> float:
    """Pull ``D(G(z))`` toward the subset's statistic ``T``.

    Loss is ``-sum[T log D(G(z)) + (1-T) log(1 - D(G(z)))]``.
    """
    if not 0.0 < T < 1.0:
        raise ConfigurationError(f"T must lie in (0, 1), got {T}")
    return _generator_update(G, D, noise_batch, T, adam)


def mgan_step(G: Mlp, D: Mlp, real_subset_batch, noise_batch, adam_pair) -> tuple[float, float]:
    """One paired sub-GAN round: discriminator step, then non-saturating generator step."""
    adam_g, adam_d = adam_pair
    real = np.asarray(real_subset_batch, dtype=np.float64)
    if len(real) == 0:
        raise DegenerateInputError("sub-GAN step on an empty subset")
    d_loss = _discriminator_update(D, real, forward(G, noise_batch), adam_d)
    g_loss = _generator_update(G, D, noise_batch, 1.0, adam_g)
    return d_loss, g_loss


def _spread(total: int, shares) -> np.ndarray:
    """Largest-remainder rounding of ``total`` over positive ``shares``.

    Leftover units go to the largest fractional parts, ties to the largest share.
    """
    shares = np.asarray(shares, dtype=np.float64)
    raw = total * shares / shares.sum()
    counts = np.floor(raw).astype(np.int64)
    left = int(total - counts.sum())
    order = np.lexsort((-shares, -(raw - counts)))
    counts[order[:left]] += 1
    return counts


def umo_budgets(subsets, table, total: int) -> Budget:
    """Counts proportional to each subset's mean distance to its centroid, each >= 1."""
    if len(subsets) == 0:
        raise DegenerateInputError("no subsets to budget")
    X = np.asarray(table, dtype=np.float64)
    k = len(subsets)
    disp = np.empty(k)
    for j, idx in enumerate(subsets):
        pts = X[np.asarray(idx)]
        disp[j] = np.linalg.norm(pts - pts.mean(axis=0), axis=1).mean() if len(pts) else 0.0
    if total < k:
        # fewer rows than generators: most dispersed subsets get one each
        counts = np.zeros(k, dtype=np.int64)
        counts[np.argsort(-disp, kind="stable")[:total]] = 1
        return Budget(counts)
    if disp.sum() <= 0:
        disp = np.ones(k)
    counts = _spread(total, disp)
    for j in np.flatnonzero(counts == 0):
        counts[np.argmax(counts)] -= 1
        counts[j] = 1
    return Budget(counts)


def rcc_budgets(cluster_count: int, total: int) -> Budget:
    if cluster_count < 1:
        raise ConfigurationError("cluster_count must be >= 1")
    base, rem = divmod(int(total), cluster_count)
    counts = np.full(cluster_count, base, dtype=np.int64)
    counts[:rem] += 1
    return Budget(counts)


def generate_pool(gan_groups, budgets, rng) -> PotentialOutlierPool:
    """Emit each generator's budgeted rows in group order, tagged by (role, id)."""
    samples, tags = [], []
    for group, budget in zip(gan_groups, budgets):
        counts = np.asarray(budget.per_generator_counts)
        if len(counts) != len(group.generators):
            raise ConfigurationError("budget length does not match generator count")
        for j, (G, c) in enumerate(zip(group.generators, counts)):
            if c <= 0:
                continue
            samples.append(forward(G, sample_noise(rng, int(c), G.input_dim)))
            tags.extend([(group.role, j)] * int(c))
    if samples:
        return PotentialOutlierPool(np.vstack(samples), tags)
    d = gan_groups[0].generators[0].output_dim if gan_groups and gan_groups[0].generators else 0
    return PotentialOutlierPool(np.zeros((0, d)), [])


def overall_discriminator_step(D: Mlp, unlabeled_batch, anomaly_batch, pool_batch, adam: AdamState) -> float:
    """Unlabeled rows toward 1; identified anomalies and generated rows toward 0."""
    pos = np.asarray(unlabeled_batch, dtype=np.float64)
    if len(pos) == 0:
        raise DegenerateInputError("overall discriminator needs unlabeled rows")
    negs = [np.asarray(b, dtype=np.float64).reshape(-1, pos.shape[1])
            for b in (anomaly_batch, pool_batch) if b is not None and len(b)]
    neg = np.vstack(negs) if negs else np.zeros((0, pos.shape[1]))
    return _discriminator_update(D, pos, neg, adam)
