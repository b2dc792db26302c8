"""End-to-end detectors built from the adversarial pieces.

All fits take an unlabeled matrix ``X_u`` and a (possibly empty) matrix of
identified anomalies ``X_a``, both already scaled to [0, 1]. The returned
``TrainedModel`` holds the overall discriminator snapshot chosen by model
selection; its outlier score is ``1 - D'(x)``.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import gan
from .errors import ConfigurationError, DegenerateInputError, ShapeError, UnlabeledFallbackWarning
from .indicators import NnrParams, average_position, nnr
from .nn import AdamState, Mlp, forward
from .rcc import RccConfig, cluster

log = logging.getLogger(__name__)

FIT_MODES = ("dual_gan", "rcc_dual_gan", "mo_gan", "sup_gan", "sup_rcc_gan")


@dataclass
class FitConfig:
    mode: str = "rcc_dual_gan"
    k: int = 5
    max_iters: int = 1000
    nnr: NnrParams = field(default_factory=NnrParams)
    rcc: RccConfig = field(default_factory=RccConfig)
    anomaly_min_cluster_size: int = 2
    n_u: int | None = None  # unlabeled-side pool size; None -> n - l
    n_a: int | None = None  # anomaly-side pool size; None -> max(l, ceil(anomaly_pool_fraction * (n - l)))
    anomaly_pool_fraction: float = 0.05
    batch_size: int = 500
    overall_batch: int | None = None  # rows of X_u per overall step; None -> all
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    lr_overall: float = 1e-4
    nnr_check_period: int = 10
    ap_warmup: int = 20
    refresh_partition: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if isinstance(self.nnr, dict):
            self.nnr = NnrParams(**self.nnr)
        if isinstance(self.rcc, dict):
            self.rcc = RccConfig(**self.rcc)
        if self.mode not in FIT_MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; choose from {', '.join(FIT_MODES)}")
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")
        for name in ("lr_g", "lr_d", "lr_overall"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("batch_size", "nnr_check_period", "anomaly_min_cluster_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.ap_warmup < 0:
            raise ConfigurationError("ap_warmup must be >= 0")
        for name in ("n_u", "n_a", "overall_batch"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.anomaly_pool_fraction < 0:
            raise ConfigurationError("anomaly_pool_fraction must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        return cls(**d)

    def totals(self, n_unlabeled: int, n_identified: int) -> tuple[int, int]:
        n_u = n_unlabeled if self.n_u is None else self.n_u
        default_a = max(n_identified, math.ceil(round(self.anomaly_pool_fraction * n_unlabeled, 9)))
        n_a = (default_a if self.n_a is None else self.n_a) if n_identified else 0
        return n_u, n_a


@dataclass
class TrainedModel:
    discriminator: Mlp
    best_ap: float | None
    best_iteration: int
    config: FitConfig
    scaler: object = None  # data.Scaler or None
    selection: str = "average_position"

    @property
    def input_dim(self) -> int:
        return self.discriminator.input_dim

    def to_dict(self) -> dict:
        return {
            "discriminator": self.discriminator.to_dict(),
            "best_ap": self.best_ap,
            "best_iteration": self.best_iteration,
            "selection": self.selection,
            "config": self.config.to_dict(),
            "scaler": None if self.scaler is None else self.scaler.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        from .data import Scaler

        return cls(
            Mlp.from_dict(d["discriminator"]),
            d["best_ap"],
            int(d["best_iteration"]),
            FitConfig.from_dict(d["config"]),
            None if d.get("scaler") is None else Scaler.from_dict(d["scaler"]),
            d.get("selection", "average_position"),
        )


@dataclass
class FitReport:
    mode: str
    ap_trace: list = field(default_factory=list)  # (iteration, ap)
    subgan_losses: dict = field(default_factory=dict)  # "u0" -> [(iteration, d_loss, g_loss)]
    nnr_history: list = field(default_factory=list)  # {"iteration", "generator", "nnr", "nash"}
    overall_d_loss: list = field(default_factory=list)
    selection_metric: list = field(default_factory=list)  # sup modes: (iteration, accuracy)
    cluster_counts: dict = field(default_factory=dict)
    best_iteration: int = 0
    best_ap: float | None = None
    wall_clock: float = 0.0
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "ap_trace": [[int(i), float(v)] for i, v in self.ap_trace],
            "subgan_losses": {k: [[int(i), float(a), float(b)] for i, a, b in v]
                              for k, v in self.subgan_losses.items()},
            "nnr_history": self.nnr_history,
            "overall_d_loss": [float(v) for v in self.overall_d_loss],
            "selection_metric": [[int(i), float(v)] for i, v in self.selection_metric],
            "cluster_counts": self.cluster_counts,
            "best_iteration": self.best_iteration,
            "best_ap": self.best_ap,
            "wall_clock": self.wall_clock,
            "warnings": self.warnings,
        }


@dataclass
class Checkpoint:
    discriminator: Mlp | None = None
    value: float = math.inf
    iteration: int = -1


def checkpoint_if_better(D: Mlp, value: float, best: Checkpoint, iteration: int) -> Checkpoint:
    """Keep a snapshot of ``D`` when ``value`` is strictly lower than the best so far."""
    if value < best.value:
        return Checkpoint(D.copy(), float(value), iteration)
    return best


def score(model: TrainedModel, table) -> np.ndarray:
    """Outlier scores ``1 - D'(x)``; raw features are scaled with the model's scaler."""
    X = getattr(table, "features", table)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"table has shape {X.shape}, model expects {model.input_dim} features")
    if model.scaler is not None:
        from .data import apply_scaler

        X = apply_scaler(model.scaler, X)
    return 1.0 - forward(model.discriminator, X).ravel()


# ---------------------------------------------------------------------------
# shared plumbing


def _check_inputs(X_u, X_a):
    X_u = np.asarray(X_u, dtype=np.float64)
    if X_u.ndim != 2 or len(X_u) == 0:
        raise DegenerateInputError("unlabeled set must be a non-empty n x d matrix")
    d = X_u.shape[1]
    X_a = np.zeros((0, d)) if X_a is None else np.asarray(X_a, dtype=np.float64).reshape(-1, d)
    return X_u, X_a


def _batch(rng, X, m):
    if m >= len(X):
        return X
    return X[rng.choice(len(X), size=m, replace=False)]


class _Selector:
    """AP-based snapshotting of the overall discriminator."""

    def __init__(self, X_all, flags, config, report):
        self.X_all = X_all
        self.flags = flags
        self.active = bool(flags.any())
        self.warmup = min(config.ap_warmup, config.max_iters - 1)
        self.best = Checkpoint()
        self.report = report

    def observe(self, D, it):
        if not self.active or it < self.warmup:
            return
        ap = average_position(forward(D, self.X_all).ravel(), self.flags)
        self.report.ap_trace.append((it, ap))
        self.best = checkpoint_if_better(D, ap, self.best, it)

    def finish(self, D, config, report, last_it):
        if self.active:
            report.best_ap, report.best_iteration = self.best.value, self.best.iteration
            return TrainedModel(self.best.discriminator, self.best.value, self.best.iteration, config)
        report.best_iteration = last_it
        return TrainedModel(D.copy(), None, last_it, config, selection="last-iteration")


def _warn_unlabeled(report):
    msg = "no identified anomalies: falling back to unsupervised training, final iteration kept"
    warnings.warn(msg, UnlabeledFallbackWarning, stacklevel=3)
    report.warnings.append(msg)


def _record(report, key, it, losses):
    report.subgan_losses.setdefault(key, []).append((it, losses[0], losses[1]))


def _nnr_gate(group, j, real, it, config, rng, report, key):
    """Refresh the equilibrium flag of generator ``j`` on the check cadence."""
    if it % config.nnr_check_period:
        return group.nash_reached[j]
    G = group.generators[j]
    fake = forward(G, gan.sample_noise(rng, min(len(real), config.batch_size), G.input_dim))
    value, nash = nnr(fake, real, config.nnr, rng)
    group.nash_reached[j] = nash
    report.nnr_history.append({"iteration": it, "generator": key, "nnr": value, "nash": nash})
    return nash


def _overall_step(D, adam, X_u, X_a, pool, config, rng):
    if config.overall_batch is not None and config.overall_batch < len(X_u):
        frac = config.overall_batch / len(X_u)
        xu = _batch(rng, X_u, config.overall_batch)
        pool = _batch(rng, pool, max(1, round(frac * len(pool)))) if len(pool) else pool
    else:
        xu = X_u
    return gan.overall_discriminator_step(D, xu, X_a, pool, adam)


def _cluster_group(X, role, rcc_cfg, rng, config):
    labels = cluster(X, rcc_cfg).labels if len(X) > 1 else np.zeros(len(X), dtype=np.int64)
    assignment = gan.SubsetAssignment.from_labels(labels)
    sizes = [len(s) for s in assignment.subsets]
    return gan.make_group(role, assignment, X.shape[1], rng, disc_sizes=sizes,
                          lr_g=config.lr_g, lr_d=config.lr_d)


def _anomaly_rows(X_a):
    # a lone identified anomaly is duplicated so its sub-GAN sees a batch of two
    return np.vstack([X_a, X_a]) if len(X_a) == 1 else X_a


# ---------------------------------------------------------------------------
# detectors


def fit_rcc_dual_gan(X_u, X_a, config: FitConfig | None = None):
    """Cluster-wise sub-GANs on both sides feeding one overall discriminator."""
    config = config or FitConfig(mode="rcc_dual_gan")
    X_u, X_a = _check_inputs(X_u, X_a)
    start = time.perf_counter()
    rng = np.random.default_rng(config.rng_seed)
    report = FitReport("rcc_dual_gan")
    l, d = len(X_a), X_u.shape[1]
    if l == 0:
        _warn_unlabeled(report)
    N_u, N_a = config.totals(len(X_u), l)

    ugroup = _cluster_group(X_u, "unlabeled", config.rcc, rng, config)
    groups, budgets = [ugroup], [gan.rcc_budgets(ugroup.assignment.count, N_u)]
    report.cluster_counts["unlabeled"] = ugroup.assignment.count
    A_rows = _anomaly_rows(X_a)
    agroup = None
    if l:
        a_cfg = dataclasses.replace(config.rcc, min_cluster_size=config.anomaly_min_cluster_size)
        agroup = _cluster_group(A_rows, "anomaly", a_cfg, rng, config)
        groups.append(agroup)
        budgets.append(gan.rcc_budgets(agroup.assignment.count, N_a))
        report.cluster_counts["anomaly"] = agroup.assignment.count

    n = len(X_u) + l
    D = gan.make_discriminator(d, n, rng)
    adam = AdamState.for_mlp(D, learning_rate=config.lr_overall)
    X_all = np.vstack([X_u, X_a])
    flags = np.r_[np.zeros(len(X_u), bool), np.ones(l, bool)]
    selector = _Selector(X_all, flags, config, report)

    for it in range(config.max_iters):
        for j, idx in enumerate(ugroup.assignment.subsets):
            real = X_u[idx]
            key = f"u{j}"
            if _nnr_gate(ugroup, j, real, it, config, rng, report, key):
                continue
            _record(report, key, it, _mgan_round(ugroup, j, real, config, rng))
        if agroup is not None:
            for j, idx in enumerate(agroup.assignment.subsets):
                _record(report, f"a{j}", it, _mgan_round(agroup, j, A_rows[idx], config, rng))
        pool = gan.generate_pool(groups, budgets, rng).samples
        report.overall_d_loss.append(_overall_step(D, adam, X_u, X_a, pool, config, rng))
        selector.observe(D, it)

    model = selector.finish(D, config, report, config.max_iters - 1)
    report.wall_clock = time.perf_counter() - start
    return model, report


def _mgan_round(group, j, real, config, rng):
    G, Dj = group.generators[j], group.discriminators[j]
    m = min(config.batch_size, len(real))
    batch = _batch(rng, real, m)
    noise = gan.sample_noise(rng, m, G.input_dim)
    return gan.mgan_step(G, Dj, batch, noise, (group.g_states[j], group.d_states[j]))


def _mo_round(group, X, it, config, rng, report, prefix, gate):
    """One shared-discriminator round of an output-partitioned group.

    Returns the shared discriminator's loss, or None when every generator sat out.
    """
    D = group.discriminators[0]
    k = group.assignment.count
    if config.refresh_partition or it == 0:
        group.assignment = gan.partition_by_output(forward(D, X).ravel(), k)
    subsets = group.assignment.subsets
    active = []
    for j, idx in enumerate(subsets):
        if gate and _nnr_gate(group, j, X[idx], it, config, rng, report, f"{prefix}{j}"):
            continue
        active.append(j)
    if not active:
        return None
    m = min(config.batch_size, len(X))
    per_gen = math.ceil(m / k)
    fakes = [forward(G, gan.sample_noise(rng, per_gen, G.input_dim)) for G in group.generators]
    d_loss = gan.mo_discriminator_step(D, _batch(rng, X, m), fakes, group.d_states[0])
    for j in active:
        idx = subsets[j]
        T = gan.representative_statistic(forward(D, X[idx]).ravel())
        G = group.generators[j]
        noise = gan.sample_noise(rng, min(config.batch_size, len(idx)), G.input_dim)
        g_loss = gan.mo_generator_step(G, D, noise, T, group.g_states[j])
        _record(report, f"{prefix}{j}", it, (d_loss, g_loss))
    return d_loss


def _mo_group(X, role, k, rng, config):
    assignment = gan.partition_by_output(np.zeros(len(X)), k)
    return gan.make_group(role, assignment, X.shape[1], rng, disc_sizes=[len(X)],
                          lr_g=config.lr_g, lr_d=config.lr_d)


def fit_dual_gan(X_u, X_a, config: FitConfig | None = None):
    """Output-partitioned multi-generator GANs on both sides feeding one overall discriminator."""
    config = config or FitConfig(mode="dual_gan")
    X_u, X_a = _check_inputs(X_u, X_a)
    if len(X_u) < config.k:
        raise ConfigurationError(f"need at least k={config.k} unlabeled rows")
    start = time.perf_counter()
    rng = np.random.default_rng(config.rng_seed)
    report = FitReport("dual_gan")
    l, d = len(X_a), X_u.shape[1]
    if l == 0:
        _warn_unlabeled(report)
    N_u, N_a = config.totals(len(X_u), l)

    ugroup = _mo_group(X_u, "unlabeled", config.k, rng, config)
    A_rows = _anomaly_rows(X_a)
    agroup = _mo_group(A_rows, "anomaly", min(config.k, l), rng, config) if l else None
    report.cluster_counts = {"unlabeled": config.k, "anomaly": min(config.k, l)}

    D = gan.make_discriminator(d, len(X_u) + l, rng)
    adam = AdamState.for_mlp(D, learning_rate=config.lr_overall)
    X_all = np.vstack([X_u, X_a])
    flags = np.r_[np.zeros(len(X_u), bool), np.ones(l, bool)]
    selector = _Selector(X_all, flags, config, report)

    for it in range(config.max_iters):
        _mo_round(ugroup, X_u, it, config, rng, report, "u", gate=True)
        groups = [ugroup]
        budgets = [gan.umo_budgets(ugroup.assignment.subsets, X_u, N_u)]
        if agroup is not None:
            _mo_round(agroup, A_rows, it, config, rng, report, "a", gate=False)
            groups.append(agroup)
            budgets.append(gan.rcc_budgets(agroup.assignment.count, N_a))
        pool = gan.generate_pool(groups, budgets, rng).samples
        report.overall_d_loss.append(_overall_step(D, adam, X_u, X_a, pool, config, rng))
        selector.observe(D, it)

    model = selector.finish(D, config, report, config.max_iters - 1)
    report.wall_clock = time.perf_counter() - start
    return model, report


def fit_mo_gan(X, config: FitConfig | None = None, identified=None):
    """Unsupervised multi-generator GAN whose shared discriminator is the scorer.

    ``identified`` optionally flags rows of ``X`` used only for AP model selection.
    """
    config = config or FitConfig(mode="mo_gan")
    X, _ = _check_inputs(X, None)
    if len(X) < config.k:
        raise ConfigurationError(f"need at least k={config.k} rows")
    start = time.perf_counter()
    rng = np.random.default_rng(config.rng_seed)
    report = FitReport("mo_gan")
    flags = np.zeros(len(X), bool) if identified is None else np.asarray(identified, dtype=bool)
    if flags.shape != (len(X),):
        raise ShapeError("identified flags must be one per row")
    group = _mo_group(X, "unlabeled", config.k, rng, config)
    report.cluster_counts = {"unlabeled": config.k}
    D = group.discriminators[0]
    selector = _Selector(X, flags, config, report)
    for it in range(config.max_iters):
        # the shared discriminator is the scorer, so it keeps training after equilibrium
        report.overall_d_loss.append(_mo_round(group, X, it, config, rng, report, "u", gate=False))
        selector.observe(D, it)
    model = selector.finish(D, config, report, config.max_iters - 1)
    report.wall_clock = time.perf_counter() - start
    return model, report


def _accuracy(D, X_u, X_a):
    pu = forward(D, X_u).ravel()
    pa = forward(D, X_a).ravel()
    return (np.count_nonzero(pu > 0.5) + np.count_nonzero(pa <= 0.5)) / (len(pu) + len(pa))


def fit_sup_gan(X_u, X_a, config: FitConfig | None = None, use_rcc: bool = False):
    """Minority oversampling with GAN(s) followed by a plain binary classifier."""
    config = config or FitConfig(mode="sup_rcc_gan" if use_rcc else "sup_gan")
    X_u, X_a = _check_inputs(X_u, X_a)
    l, d = len(X_a), X_u.shape[1]
    if l == 0:
        raise ConfigurationError("supervised GAN baselines need at least one identified anomaly")
    start = time.perf_counter()
    rng = np.random.default_rng(config.rng_seed)
    report = FitReport("sup_rcc_gan" if use_rcc else "sup_gan")
    _, N_a = config.totals(len(X_u), l)
    A_rows = _anomaly_rows(X_a)
    if use_rcc:
        a_cfg = dataclasses.replace(config.rcc, min_cluster_size=config.anomaly_min_cluster_size)
        group = _cluster_group(A_rows, "anomaly", a_cfg, rng, config)
    else:
        assignment = gan.SubsetAssignment([np.arange(len(A_rows))], "by_rcc")
        group = gan.make_group("anomaly", assignment, d, rng, disc_sizes=[len(A_rows)],
                               lr_g=config.lr_g, lr_d=config.lr_d)
    report.cluster_counts["anomaly"] = group.assignment.count
    budget = gan.rcc_budgets(group.assignment.count, N_a)

    D = gan.make_discriminator(d, len(X_u) + l, rng)
    adam = AdamState.for_mlp(D, learning_rate=config.lr_overall)
    best = Checkpoint()
    for it in range(config.max_iters):
        if N_a:
            for j, idx in enumerate(group.assignment.subsets):
                _record(report, f"a{j}", it, _mgan_round(group, j, A_rows[idx], config, rng))
        pool = gan.generate_pool([group], [budget], rng).samples
        report.overall_d_loss.append(_overall_step(D, adam, X_u, X_a, pool, config, rng))
        acc = _accuracy(D, X_u, X_a)
        report.selection_metric.append((it, acc))
        best = checkpoint_if_better(D, -acc, best, it)
    report.best_iteration = best.iteration
    report.wall_clock = time.perf_counter() - start
    model = TrainedModel(best.discriminator, None, best.iteration, config, selection="training-accuracy")
    return model, report


def fit(X_u, X_a, config: FitConfig):
    """Dispatch on ``config.mode``."""
    if config.mode == "rcc_dual_gan":
        return fit_rcc_dual_gan(X_u, X_a, config)
    if config.mode == "dual_gan":
        return fit_dual_gan(X_u, X_a, config)
    if config.mode == "mo_gan":
        X_u, X_a = _check_inputs(X_u, X_a)
        X = np.vstack([X_u, X_a])
        flags = np.r_[np.zeros(len(X_u), bool), np.ones(len(X_a), bool)]
        return fit_mo_gan(X, config, flags)
    return fit_sup_gan(X_u, X_a, config, use_rcc=config.mode == "sup_rcc_gan")
