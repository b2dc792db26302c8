"""ROC-AUC, distance/density baselines with oracle parameter search, and the benchmark harness.

Ground truth follows the table convention: 0 = anomaly, 1 = normal. Scores are
"higher = more anomalous" everywhere in this module.
"""
from __future__ import annotations

import csv
import dataclasses
import glob
import io
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata
from sklearn.cluster import KMeans
from sklearn.neighbors import LocalOutlierFactor, NearestNeighbors

from .data import (
    LabeledTable, apply_scaler, atomic_write, dump_json, fit_scaler, load_csv, sample_identified,
    split_train_test,
)
from .detectors import FIT_MODES, FitConfig, fit, score
from .errors import ConfigurationError, DegenerateInputError, DualGanError

log = logging.getLogger(__name__)

BASELINES = ("knn", "lof", "kmeans")
METHODS = BASELINES + FIT_MODES
MAX_GRID = 50
DEFAULT_RATIO = 0.1
CSV_COLUMNS = ("dataset", "method", "seed", "ratio", "auc", "seconds")


@dataclass
class BenchResult:
    dataset: str
    method: str
    seed: int
    auc: float | None
    seconds: float
    ratio: float = DEFAULT_RATIO
    config: dict = field(default_factory=dict)
    error: str | None = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise DegenerateInputError(f"auc {self.auc} outside [0, 1]")

    @property
    def ok(self) -> bool:
        return self.auc is not None


@dataclass
class SweepResult:
    dataset: str
    method: str
    ratios: list
    aucs: dict  # ratio -> list of per-seed auc (None for failed cells)

    def medians(self) -> dict:
        out = {}
        for r in self.ratios:
            vals = [v for v in self.aucs[r] if v is not None]
            out[r] = float(np.median(vals)) if vals else None
        return out


# ---------------------------------------------------------------------------
# metric


def roc_auc(outlier_scores, ground_truth) -> float:
    """P(random anomaly outscores random normal), ties counted one half."""
    s = np.asarray(outlier_scores, dtype=np.float64).ravel()
    y = np.asarray(ground_truth).ravel()
    if s.shape != y.shape:
        raise DegenerateInputError("scores and labels differ in length")
    anom = y == 0
    n_a, n_n = int(anom.sum()), int((~anom).sum())
    if n_a == 0 or n_n == 0:
        raise DegenerateInputError("roc_auc needs both anomalies and normals")
    ranks = rankdata(s)
    return float((ranks[anom].sum() - n_a * (n_a + 1) / 2) / (n_a * n_n))


# ---------------------------------------------------------------------------
# baselines


def _check_k(k, n, lo=1):
    if not lo <= k < n:
        raise ConfigurationError(f"k={k} must satisfy {lo} <= k < n={n}")


def knn_score(train, test, k: int) -> np.ndarray:
    """Distance from each test row to its k-th nearest training row."""
    train, test = np.asarray(train, dtype=np.float64), np.asarray(test, dtype=np.float64)
    _check_k(k, len(train))
    dist, _ = NearestNeighbors(n_neighbors=k).fit(train).kneighbors(test)
    return dist[:, -1]


def lof_score(train, test, k: int) -> np.ndarray:
    """Local outlier factor of each test row against the training rows."""
    train, test = np.asarray(train, dtype=np.float64), np.asarray(test, dtype=np.float64)
    _check_k(k, len(train))
    lof = LocalOutlierFactor(n_neighbors=k, novelty=True).fit(train)
    return -lof.score_samples(test)


def kmeans_score(train, test, k: int, seed: int = 0) -> np.ndarray:
    """Distance from each test row to the nearest of k centroids (10 restarts, best inertia)."""
    train, test = np.asarray(train, dtype=np.float64), np.asarray(test, dtype=np.float64)
    if not 1 <= k <= len(train):
        raise ConfigurationError(f"k={k} must satisfy 1 <= k <= n={len(train)}")
    km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(train)
    return np.min(np.linalg.norm(test[:, None, :] - km.cluster_centers_[None], axis=2), axis=1)


def search_range(method: str, n: int) -> list:
    """Candidate k values: 2..ceil(n/10) for kNN/LOF, 1..ceil(n/100) for k-means.

    Ranges wider than 50 values are thinned to 50 log-spaced integers.
    """
    if method in ("knn", "lof"):
        lo, hi = 2, min(math.ceil(n / 10), n - 1)
    elif method == "kmeans":
        lo, hi = 1, min(math.ceil(n / 100), n)
    else:
        raise ConfigurationError(f"no parameter search for {method!r}")
    if hi < lo:
        raise ConfigurationError(f"{method}: n={n} too small for the search range")
    if hi - lo + 1 <= MAX_GRID:
        return list(range(lo, hi + 1))
    return sorted({int(round(v)) for v in np.geomspace(lo, hi, MAX_GRID)})


def baseline_scores(method, train, test, k, seed=0):
    if method == "knn":
        return knn_score(train, test, k)
    if method == "lof":
        return lof_score(train, test, k)
    if method == "kmeans":
        return kmeans_score(train, test, k, seed)
    raise ConfigurationError(f"unknown baseline {method!r}")


def best_baseline(train, test, method, seed=0, ks=None) -> tuple[int, float]:
    """Best k by test AUC (oracle selection); ties keep the smallest k."""
    train_X = getattr(train, "features", train)
    if getattr(test, "ground_truth", None) is None:
        raise DegenerateInputError("baseline search needs test ground truth")
    ks = search_range(method, len(train_X)) if ks is None else list(ks)
    best = (None, -1.0)
    for k in ks:
        auc = roc_auc(baseline_scores(method, train_X, test.features, k, seed), test.ground_truth)
        if auc > best[1]:
            best = (k, auc)
    return best


# ---------------------------------------------------------------------------
# cells


def run_cell(dataset, method, train, test, seed, ratio=DEFAULT_RATIO, overrides=None) -> BenchResult:
    """Train ``method`` on ``train`` and report test AUC; errors are captured, not raised."""
    overrides = dict(overrides or {})
    start = time.perf_counter()
    caught = []
    try:
        sc = fit_scaler(train)
        trs, tes = apply_scaler(sc, train), apply_scaler(sc, test)
        if method in BASELINES:
            k, auc = best_baseline(trs, tes, method, seed)
            config = {"k": k}
        elif method in FIT_MODES:
            cfg = FitConfig.from_dict({**overrides, "mode": method, "rng_seed": seed})
            with warnings.catch_warnings(record=True) as w:
                warnings.simplefilter("always")
                model, _ = fit(trs.unlabeled, trs.anomalies, cfg)
            caught = [str(x.message) for x in w]
            model.scaler = sc
            auc = roc_auc(score(model, test.features), test.ground_truth)
            config = cfg.to_dict()
        else:
            raise ConfigurationError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    except (DualGanError, ValueError, TypeError) as exc:
        log.warning("event=cell_failed dataset=%s method=%s seed=%s error=%s", dataset, method, seed, exc)
        return BenchResult(dataset, method, seed, None, time.perf_counter() - start, ratio,
                           error=f"{type(exc).__name__}: {exc}")
    return BenchResult(dataset, method, seed, auc, time.perf_counter() - start, ratio, config,
                       warnings=caught)


def _run_cell_args(args):
    return run_cell(*args)


def _map(cells, jobs):
    if jobs and jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_run_cell_args, cells))
    return [run_cell(*c) for c in cells]


def load_dataset(path):
    """A directory holding train.csv + test.csv, or a single labelled CSV (split per seed)."""
    p = Path(path)
    if p.is_dir():
        tr, te = p / "train.csv", p / "test.csv"
        if not (tr.is_file() and te.is_file()):
            raise DegenerateInputError(f"{p}: expected train.csv and test.csv")
        return p.name, (load_csv(tr), load_csv(te))
    return p.stem, load_csv(p)


def resolve_datasets(pattern) -> dict:
    paths = sorted(glob.glob(str(pattern)))
    if not paths:
        raise DegenerateInputError(f"no datasets match {pattern!r}")
    return dict(load_dataset(p) for p in paths)


def _split(data, seed, ratio):
    """(train, test) for one seed; a full table is split and identified rows re-sampled."""
    if isinstance(data, LabeledTable):
        train, test = split_train_test(data, seed)
        return sample_identified(train, ratio, seed), test
    train, test = data
    if test.ground_truth is None:
        raise DegenerateInputError("test table has no ground truth")
    return train, test


def run_benchmark(datasets: dict, methods, seeds, overrides=None, jobs: int = 1):
    """Every (dataset, method, seed) cell, then a ranked summary."""
    cells = []
    for name, data in datasets.items():
        for seed in seeds:
            train, test = _split(data, seed, DEFAULT_RATIO)
            for m in methods:
                cells.append((name, m, train, test, seed, DEFAULT_RATIO, overrides))
    results = _map(cells, jobs)
    return results, summarize(results)


def summarize(results) -> dict:
    """Per-dataset mean AUC and cross-dataset average rank (1 = best, ties averaged).

    A (dataset, method) pair with no successful cell is listed as missing and left
    out of that dataset's ranking.
    """
    datasets = sorted({r.dataset for r in results})
    methods = sorted({r.method for r in results})
    mean_auc, missing = {}, []
    for d in datasets:
        mean_auc[d] = {}
        for m in methods:
            vals = [r.auc for r in results if r.dataset == d and r.method == m and r.ok]
            if vals:
                mean_auc[d][m] = float(np.mean(vals))
            elif any(r.dataset == d and r.method == m for r in results):
                missing.append({"dataset": d, "method": m})
    ranks = {m: [] for m in methods}
    for d in datasets:
        present = sorted(mean_auc[d])
        if not present:
            continue
        r = rankdata([-mean_auc[d][m] for m in present])
        for m, v in zip(present, r):
            ranks[m].append(float(v))
    avg = {m: float(np.mean(v)) for m, v in ranks.items() if v}
    failed = [{"dataset": r.dataset, "method": r.method, "seed": r.seed, "error": r.error}
              for r in results if not r.ok]
    return {
        "mean_auc": mean_auc,
        "average_rank": avg,
        "order": sorted(avg, key=lambda m: (avg[m], m)),
        "missing": missing,
        "failed_cells": failed,
        "not_implemented": ["adoa"],
        "protocol": "baseline k chosen by test AUC (oracle selection)",
    }


def ratio_sweep(dataset, data, methods, ratios, seeds, overrides=None, jobs: int = 1):
    """Refit each method with identified anomalies re-sampled at every ratio.

    ``data`` is a full labelled table (split per seed) or a fixed (train, test) pair;
    in both cases the identified flags are re-drawn from the training anomalies.
    """
    ratios = sorted(float(r) for r in ratios)
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ConfigurationError(f"ratio {r} outside [0, 1]")
    cells = []
    for seed in seeds:
        train, test = _split(data, seed, 0.0)
        for r in ratios:
            tr_r = sample_identified(train, r, seed)
            for m in methods:
                cells.append((dataset, m, tr_r, test, seed, r, overrides))
    results = _map(cells, jobs)
    sweeps = []
    for m in methods:
        aucs = {r: [x.auc for x in results if x.method == m and x.ratio == r] for r in ratios}
        sweeps.append(SweepResult(dataset, m, ratios, aucs))
    return results, sweeps


# ---------------------------------------------------------------------------
# artifacts


def results_csv_text(results, timings: bool = False) -> str:
    """Long-form rows; the ``seconds`` column stays empty unless ``timings`` (keeps files reproducible)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in results:
        w.writerow([r.dataset, r.method, r.seed, repr(float(r.ratio)),
                    "" if r.auc is None else repr(r.auc), f"{r.seconds:.3f}" if timings else ""])
    return buf.getvalue()


def write_results_csv(results, path, timings: bool = False) -> None:
    text = results_csv_text(results, timings)
    atomic_write(path, lambda fh: fh.write(text), newline="")


def write_summary_json(summary, path) -> None:
    dump_json(summary, path)


def sweep_summary(sweeps) -> dict:
    return {
        "sweeps": [
            {"dataset": s.dataset, "method": s.method, "ratios": s.ratios,
             "aucs": {repr(r): v for r, v in s.aucs.items()},
             "median_auc": {repr(r): v for r, v in s.medians().items()}}
            for s in sweeps
        ]
    }


def result_dicts(results) -> list:
    return [dataclasses.asdict(r) for r in results]
