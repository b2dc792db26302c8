"""Exit criteria, each run at its stated tolerance; one verdict line per criterion.

The verdict lines are printed and repeated in the terminal summary, so
``pytest -v`` output shows PASS/FAIL for every criterion even when captured.
"""
import math
import time
import warnings
from functools import lru_cache

import numpy as np
import pytest

from acceptance_log import record
from dualgan.cli import main as cli_main
from dualgan.data import SyntheticSpec, apply_scaler, fit_scaler, gen_synthetic, sample_identified
from dualgan.detectors import FitConfig, fit, fit_mo_gan, score
from dualgan.evalbench import best_baseline, roc_auc
from dualgan.gan import (
    make_discriminator, make_generator, mgan_step, mo_discriminator_step, mo_generator_step,
    overall_discriminator_step, sample_noise,
)
from dualgan.indicators import NnrParams, average_position, nnr
from dualgan.nn import AdamState, backprop, backward, bce_loss, bce_with_input_grad, forward, init_mlp
from dualgan.rcc import cluster, extract_clusters, mutual_knn_graph, optimize_representatives
from oracles import (
    brute_force_ap, overall_objective, pair_counting_auc, permutation_agreement, scalar_bce,
    union_find_labels,
)
from test_nn import numeric_grad

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
FIT_BUDGET = 300.0
SPEC = SyntheticSpec()
N_NORMAL = sum(SPEC.normal_counts)
GROUP_ROWS = slice(N_NORMAL, N_NORMAL + sum(SPEC.group_counts))


@lru_cache(maxsize=None)
def synthetic(seed):
    train, test = gen_synthetic(SyntheticSpec(seed=seed))
    sc = fit_scaler(train)
    return train, test, sc


@lru_cache(maxsize=None)
def fitted(mode, seed, ratio=None):
    """(test outlier scores, test AUC, fit seconds) for one synthetic seed."""
    train, test, sc = synthetic(seed)
    if ratio is not None:
        train = sample_identified(train, ratio, seed)
    trs, tes = apply_scaler(sc, train), apply_scaler(sc, test)
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, _ = fit(trs.unlabeled, trs.anomalies, FitConfig(mode=mode, rng_seed=seed))
    seconds = time.perf_counter() - start
    os_ = score(model, tes.features)
    return os_, roc_auc(os_, test.ground_truth), seconds


def fmt(values):
    return "[" + ", ".join(f"{v:.3f}" for v in values) + "]"


# ---------------------------------------------------------------------------
# 1. synthetic reproduction


@pytest.mark.parametrize("mode", ["dual_gan", "rcc_dual_gan"])
def test_criterion_1_synthetic_auc(mode):
    runs = [fitted(mode, s) for s in SEEDS]
    aucs = [r[1] for r in runs]
    secs = [r[2] for r in runs]
    med = float(np.median(aucs))
    ok = med >= 0.97 and max(secs) <= FIT_BUDGET
    record(f"1 ({mode})", ok,
           f"median AUC {med:.3f} (need >= 0.97), per seed {fmt(aucs)}, slowest fit {max(secs):.1f}s (limit 300s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. group-anomaly separation


def group_check(mode):
    wins = []
    for s in SEEDS:
        os_ = fitted(mode, s)[0]
        wins.append(bool(np.median(os_[GROUP_ROWS]) > np.median(os_[:N_NORMAL])))
    return sum(wins) >= 4, wins


@lru_cache(maxsize=None)
def unsupervised_mo_scores(seed):
    train, test, sc = synthetic(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, _ = fit_mo_gan(apply_scaler(sc, train).features, FitConfig(mode="mo_gan", rng_seed=seed))
    return score(model, apply_scaler(sc, test).features)


def test_criterion_2_group_separation():
    rcc_ok, rcc_wins = group_check("rcc_dual_gan")
    mo_ok, mo_wins = group_check("mo_gan")
    # informational only: the same check with final-iteration selection and no labels at all
    plain = sum(bool(np.median(o[GROUP_ROWS]) > np.median(o[:N_NORMAL]))
                for o in map(unsupervised_mo_scores, SEEDS))
    ok = rcc_ok and not mo_ok
    record("2", ok, f"rcc_dual_gan group>normal in {sum(rcc_wins)}/5 seeds (need >= 4); "
                    f"mo_gan in {sum(mo_wins)}/5 (must fail, i.e. < 4); "
                    f"[info] mo_gan without identified rows, last iteration: {plain}/5")
    assert ok


# ---------------------------------------------------------------------------
# 3. baseline contrast


def test_criterion_3_knn_contrast():
    gaps, knn = [], []
    for s in SEEDS:
        train, test, sc = synthetic(s)
        _, auc_knn = best_baseline(apply_scaler(sc, train), apply_scaler(sc, test), "knn")
        knn.append(auc_knn)
        gaps.append(fitted("rcc_dual_gan", s)[1] - auc_knn)
    ok = min(gaps) >= 0.15
    record("3", ok, f"best-searched kNN AUC {fmt(knn)}; rcc_dual_gan minus kNN {fmt(gaps)} (need >= 0.15 every seed)")
    assert ok


# ---------------------------------------------------------------------------
# 4. ratio monotonicity


@pytest.mark.parametrize("mode", ["dual_gan", "rcc_dual_gan"])
def test_criterion_4_ratio_monotone(mode):
    zero = [fitted(mode, s, 0.0)[1] for s in SEEDS]
    tenth = [fitted(mode, s, 0.1)[1] for s in SEEDS]
    m0, m1 = float(np.median(zero)), float(np.median(tenth))
    ok = m1 >= m0
    record(f"4 ({mode})", ok, f"median AUC ratio 0.1 = {m1:.3f} vs ratio 0 = {m0:.3f}; "
                              f"per seed 0.1 {fmt(tenth)}, 0 {fmt(zero)}")
    assert ok


# ---------------------------------------------------------------------------
# 5. property suite


def grad_excess(analytic, numeric, rtol=1e-4, atol=1e-8):
    """Worst ratio of |analytic - numeric| to the allowed ``rtol * scale + atol`` (pass when <= 1).

    ``atol`` only matters for entries near zero, where central differences at
    h=1e-5 carry rounding noise around 1e-11 and relative error is undefined.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n)
        worst = max(worst, float(np.max(err / (rtol * np.maximum(np.abs(a), np.abs(n)) + atol))))
    return worst


def numeric_input_grad(loss_fn, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = loss_fn()
        x[idx] = old - h
        down = loss_fn()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def test_criterion_5a_gradients():
    worst, nets = 0.0, 0
    for seed in range(6):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(2, 5))
        # every shape the detectors build: sub-GAN and overall discriminators sized by n, and generators
        for n in (12, 60, 520):
            D = make_discriminator(d, n, rng)
            for b in D.biases:
                b[:] = rng.normal(scale=0.1, size=b.shape)
            x = rng.uniform(size=(6, d))
            t = rng.uniform(size=6)
            w = rng.uniform(0.5, 2.0, size=6)
            g = backprop(D, x, t, w)
            nw, nb = numeric_grad(D, lambda: bce_loss(forward(D, x), t, w))
            worst = max(worst, grad_excess(g.weights + g.biases, nw + nb))

            # input gradient of the discriminator loss
            _, gx = bce_with_input_grad(D, x, t)
            worst = max(worst, grad_excess([gx], [numeric_input_grad(lambda: bce_loss(forward(D, x), t), x)]))

            # generator parameters through a fixed discriminator, target T
            G = make_generator(d, rng)
            for b in G.biases:
                b[:] = rng.normal(scale=0.1, size=b.shape)
            z = sample_noise(rng, 5, d)
            T = float(rng.uniform(0.05, 0.95))
            _, gx = bce_with_input_grad(D, forward(G, z), np.full(5, T))
            gg, _ = backward(G, z, gx)
            ngw, ngb = numeric_grad(G, lambda: bce_loss(forward(D, forward(G, z)), np.full(5, T)))
            worst = max(worst, grad_excess(gg.weights + gg.biases, ngw + ngb))
            nets += 2
    ok = worst <= 1.0
    record("5a", ok, f"worst |analytic - numeric| / (1e-4 * |g| + 1e-8) = {worst:.3f} over {nets} networks "
                     f"(need <= 1: relative 1e-4, absolute floor 1e-8 for near-zero entries)")
    assert ok


def test_criterion_5b_loss_values():
    worst = 0.0

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-300)

    for seed in range(20):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(2, 5))
        real = rng.uniform(size=(int(rng.integers(3, 12)), d))
        fakes = [rng.uniform(size=(int(rng.integers(1, 6)), d)) for _ in range(int(rng.integers(1, 4)))]
        xa = rng.uniform(size=(int(rng.integers(0, 4)), d))

        # plain classifier loss
        p = rng.uniform(0.01, 0.99, size=7)
        t = rng.integers(0, 2, size=7).astype(float)
        worst = max(worst, rel(bce_loss(p, t), sum(scalar_bce(a, b) for a, b in zip(p, t))))

        # shared discriminator step, real -> 1 and every generator's rows -> 0
        D = make_discriminator(d, 30, rng)
        pr, pf = forward(D, real).ravel(), forward(D, np.vstack(fakes)).ravel()
        expect = sum(scalar_bce(v, 1) for v in pr) + sum(scalar_bce(v, 0) for v in pf)
        worst = max(worst, rel(mo_discriminator_step(D, real, fakes, AdamState.for_mlp(D)), expect))

        # output-matching generator step
        G = make_generator(d, rng)
        z = sample_noise(rng, 6, d)
        T = float(rng.uniform(0.05, 0.95))
        pg = forward(D, forward(G, z)).ravel()
        expect = -sum(T * math.log(v) + (1 - T) * math.log(1 - v) for v in pg)
        worst = max(worst, rel(mo_generator_step(G, D, z, T, AdamState.for_mlp(G)), expect))

        # paired sub-GAN round: discriminator loss before its update, generator loss against the updated D
        Gs, Ds = make_generator(d, rng), make_discriminator(d, 10, rng)
        G0, D0 = Gs.copy(), Ds.copy()
        z = sample_noise(rng, len(real), d)
        d_loss, g_loss = mgan_step(Gs, Ds, real, z, (AdamState.for_mlp(Gs), AdamState.for_mlp(Ds)))
        fake0 = forward(G0, z)
        expect_d = (sum(scalar_bce(v, 1) for v in forward(D0, real).ravel())
                    + sum(scalar_bce(v, 0) for v in forward(D0, fake0).ravel()))
        expect_g = -sum(math.log(v) for v in forward(Ds, fake0).ravel())
        worst = max(worst, rel(d_loss, expect_d), rel(g_loss, expect_g))

        # overall discriminator
        Do = make_discriminator(d, 30, rng)
        pool = np.vstack(fakes)
        fu, fa, fp = (forward(Do, b).ravel() if len(b) else [] for b in (real, xa, pool))
        got = overall_discriminator_step(Do, real, xa, pool, AdamState.for_mlp(Do))
        worst = max(worst, rel(got, overall_objective(fu, fa, fp)))
    ok = worst <= 1e-9
    record("5b", ok, f"max relative loss deviation {worst:.2e} over 20 seeds x 6 losses (need <= 1e-9)")
    assert ok


def test_criterion_5c_roc_auc():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        s = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))  # coarse rounding creates ties
        y = rng.integers(0, 2, size=n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        worst = max(worst, abs(roc_auc(s, y) - pair_counting_auc(s, y == 0)))
    ok = worst <= 1e-12
    record("5c", ok, f"max |roc_auc - pair counting| {worst:.2e} over 1000 instances (need <= 1e-12)")
    assert ok


def test_criterion_5d_average_position():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        out = rng.integers(0, 6, size=n) / 5.0
        flags = rng.uniform(size=n) < 0.3
        if not flags.any():
            flags[int(rng.integers(n))] = True
        worst = max(worst, abs(average_position(out, flags) - brute_force_ap(out, flags)))
    ok = worst <= 1e-12
    record("5d", ok, f"max |AP - brute force| {worst:.2e} over 1000 tied instances (need <= 1e-12)")
    assert ok


def test_criterion_5e_extract_clusters():
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(2, 50))
        U = rng.uniform(size=(n, int(rng.integers(1, 4))))
        g = mutual_knn_graph(U, int(rng.integers(1, 7)))
        delta = float(rng.uniform(0, 0.6))
        kept = [e for e in g.edges if np.linalg.norm(U[e[0]] - U[e[1]]) < delta]
        mismatches += extract_clusters(U, g, delta).labels.tolist() != union_find_labels(n, kept)
    ok = mismatches == 0
    record("5e", ok, f"{200 - mismatches}/200 random thresholded graphs match union-find")
    assert ok


def test_criterion_5f_rcc_trace():
    worst = -np.inf
    for seed in range(20):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 4))
        X = np.vstack([rng.normal(rng.uniform(size=2), 0.05, size=(int(rng.integers(15, 40)), 2))
                       for _ in range(k)])
        _, trace = optimize_representatives(X, mutual_knn_graph(X, 10))
        if len(trace) > 1:
            worst = max(worst, float(np.max(np.diff(trace))))
    ok = worst <= 1e-9
    record("5f", ok, f"largest objective increase {worst:.2e} over 20 runs (need <= 1e-9)")
    assert ok


def test_criterion_5g_nnr():
    same = sep = 0
    for s in range(100):
        rng = np.random.default_rng(s)
        same += nnr(rng.uniform(size=(500, 2)), rng.uniform(size=(500, 2)), NnrParams(), s)[1]
        A = rng.normal(0.0, 0.05, size=(200, 2))
        B = rng.normal(1.0, 0.05, size=(200, 2))
        sep += not nnr(A, B, NnrParams(), s)[1]
    ok = same >= 95 and sep == 100
    record("5g", ok, f"nash on i.i.d. pairs {same}/100 (need >= 95); no nash on separated {sep}/100 (need 100)")
    assert ok


# ---------------------------------------------------------------------------
# 6. CLI determinism


def test_criterion_6_cli_determinism(tmp_path, capsys):
    def run(tag):
        out = tmp_path / tag
        data = tmp_path / "data"
        cmds = [
            ["synth", "--out", str(out / "synth"), "--seed", "4"],
            ["fit", "--train", str(data / "train.csv"), "--mode", "rcc_dual_gan", "--seed", "4",
             "--max-iters", "60", "--model", str(out / "rcc.json"), "--report", str(out / "rcc_report.json")],
            ["fit", "--train", str(data / "train.csv"), "--mode", "dual_gan", "--seed", "4",
             "--max-iters", "60", "--model", str(out / "dual.json"), "--report", str(out / "dual_report.json")],
            ["score", "--model", str(out / "rcc.json"), "--data", str(data / "test.csv"), "--out", str(out / "os.csv")],
            ["bench", "--datasets", str(data), "--methods", "knn,lof,kmeans,rcc_dual_gan", "--seeds", "0,1",
             "--max-iters", "30", "--out", str(out / "bench")],
            ["sweep", "--dataset", str(data), "--methods", "dual_gan,rcc_dual_gan", "--ratios", "0,0.1",
             "--seeds", "0", "--max-iters", "30", "--out", str(out / "sweep")],
        ]
        codes, stdout = [], []
        for c in cmds:
            codes.append(cli_main(c))
            stdout.append(capsys.readouterr().out)
        files = {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
        return codes, stdout, files

    assert cli_main(["synth", "--out", str(tmp_path / "data"), "--seed", "4"]) == 0
    a, b = run("a"), run("b")
    same_files = a[2].keys() == b[2].keys() and all(a[2][k] == b[2][k] for k in a[2])
    ok = a[0] == b[0] and all(c == 0 for c in a[0]) and a[1] == b[1] and same_files
    differing = sorted(k for k in a[2] if a[2].get(k) != b[2].get(k))
    record("6", ok, f"{len(a[2])} output files over 6 commands; exit codes {a[0]}; differing files {differing or 'none'}")
    assert ok


# ---------------------------------------------------------------------------
# 7. RCC sanity


def test_criterion_7_rcc():
    ks, agree = [], []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        X = np.vstack([rng.normal((0.25, 0.5), 0.02, (50, 2)), rng.normal((0.75, 0.5), 0.02, (50, 2))])
        c = cluster(X)
        ks.append(c.cluster_count)
        agree.append(permutation_agreement(c.labels, np.repeat([0, 1], 50)))
    X = np.random.default_rng(0).uniform(size=(1000, 10))
    start = time.perf_counter()
    cluster(X)
    seconds = time.perf_counter() - start
    ok = all(k == 2 for k in ks) and all(a == 1.0 for a in agree) and seconds <= 60.0
    record("7", ok, f"two blobs k={ks}, agreement min {min(agree):.3f} over 10 seeds; 1000x10 clustering {seconds:.1f}s (limit 60s)")
    assert ok
