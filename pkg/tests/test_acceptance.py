"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines go straight to
the terminal even when output capture is on.
"""
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, stats

from bmia.attacks import one_sided_t_test
from bmia.config import ExperimentConfig, load_config
from bmia.data import LabeledDataset, make_synthetic_classification, split_four_way
from bmia.evaluation import roc_curve
from bmia.laplace import fit_last_layer_posterior, sample_scores
from bmia.nn import (
    MlpArchitecture,
    TrainConfig,
    accuracy,
    last_layer_features,
    log_softmax,
    model_from_dict,
    sgd_train,
    weight_init,
)
from bmia.numkit import RngState
from bmia.pipeline import load_dataset, run_experiment, run_toy_regression_demo
from bmia.theory import (
    GaussianPair,
    check_closed_form_vs_mc,
    check_conditional_ordering,
    tpr_marginal_closed_form,
)

ROOT = Path(__file__).resolve().parent.parent
DESK_CONFIG = ROOT / "configs" / "desk_scale.ini"
DESK_SEEDS = range(5)


@pytest.fixture
def verdict(capsys):
    """Print ``[criterion n] PASS|FAIL (seconds) detail`` and assert the outcome."""
    start = time.perf_counter()

    def emit(number, passed, detail):
        elapsed = time.perf_counter() - start
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if passed else 'FAIL'} ({elapsed:.1f}s) {detail}")
        assert passed, detail

    return emit


# 1 -----------------------------------------------------------------------------

def _random_classifier(rng, case):
    d_in = int(rng.integers(2, 6))
    h = int(rng.integers(2, 13))
    o = int(rng.integers(2, 7))
    while (h + 1) * o > 200:
        h -= 1
    model = weight_init(MlpArchitecture((d_in, int(rng.integers(2, 8)), h, o), "tanh"), case)
    for b in model.biases:
        b[:] = 0.5 * rng.normal(size=b.shape)
    n = int(rng.integers(3, 12))
    data = LabeledDataset(rng.normal(size=(n, d_in)), rng.integers(0, o, size=n), n_classes=o)
    return model, data


def _regularized_nll(model, data, w_vec, lam):
    w = w_vec.reshape(model.weights[-1].shape[1] + 1, -1).T
    lp = log_softmax(last_layer_features(model, data.features) @ w.T)
    return -lp[np.arange(len(data)), data.labels].sum() + 0.5 * lam * float(w_vec @ w_vec)


def _fd_hessian(fun, w, step=1e-3):
    d = w.size
    out = np.zeros((d, d))
    for i in range(d):
        for j in range(i, d):
            vals = []
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                v = w.copy()
                v[i] += si * step
                v[j] += sj * step
                vals.append(fun(v))
            out[i, j] = out[j, i] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4 * step * step)
    return out


def test_criterion_1_ggn_exactness(verdict):
    rng = np.random.default_rng(101)
    worst, sizes = 0.0, []
    for case in range(10):
        model, data = _random_classifier(rng, case)
        lam = float(rng.uniform(0.1, 2.0))
        post = fit_last_layer_posterior(model, data, "full_ggn", lam)
        prec = post.precision_matrix()
        fd = _fd_hessian(lambda v: _regularized_nll(model, data, v, lam), post.w_map_vec)
        worst = max(worst, float(np.max(np.abs(prec - fd)) / np.max(np.abs(prec))))
        sizes.append(post.w_map_vec.size)
    verdict(1, worst <= 1e-4 and max(sizes) <= 200,
            f"10 MLPs with {min(sizes)}-{max(sizes)} last-layer parameters, "
            f"max relative deviation {worst:.2e} (limit 1e-4)")


# 2 -----------------------------------------------------------------------------

def test_criterion_2_kfac_single_sample(verdict):
    rng = np.random.default_rng(102)
    worst = 0.0
    for case in range(100):
        widths = (int(rng.integers(1, 6)), int(rng.integers(1, 9)), int(rng.integers(2, 7)))
        model = weight_init(MlpArchitecture(widths, "tanh"), case)
        for b in model.biases:
            b[:] = 0.5 * rng.normal(size=b.shape)
        data = LabeledDataset(rng.normal(size=(1, widths[0])), rng.integers(0, widths[-1], size=1),
                              n_classes=widths[-1])
        full = fit_last_layer_posterior(model, data, "full_ggn").curvature
        kf = fit_last_layer_posterior(model, data, "kfac").curvature
        worst = max(worst, float(np.max(np.abs(np.kron(kf.A, kf.B) - full))))
    verdict(2, worst <= 1e-12, f"100 cases, max |A kron B - GGN| = {worst:.2e} (limit 1e-12)")


# 3 -----------------------------------------------------------------------------

def test_criterion_3_predictive_equivalence(verdict):
    data = make_synthetic_classification(400, 6, 4, 1.0, seed=7)
    model = sgd_train(weight_init(MlpArchitecture((6, 24, 12, 4), "relu"), 7), data,
                      TrainConfig(learning_rate=0.05, epochs=30, milestone_epochs=(20,), batch_size=32),
                      RngState(7))
    post = fit_last_layer_posterior(model, data, "full_ggn", 1.0)
    n = 10_000
    crit = 1.628 * math.sqrt(2.0 / n)  # two-sample KS critical value at the 1% level
    pick = np.random.default_rng(103).choice(len(data), size=20, replace=False)
    ks = []
    for k, i in enumerate(pick):
        q = (data.features[i], int(data.labels[i]))
        a = sample_scores(post, model, q, n, "weight_mc", RngState(103).child("mc", k))
        b = sample_scores(post, model, q, n, "linearized_logit", RngState(103).child("lin", k))
        ks.append(stats.ks_2samp(a, b).statistic)
    verdict(3, max(ks) < crit,
            f"20 queries, max KS statistic {max(ks):.4f} vs critical value {crit:.4f}")


# 4 -----------------------------------------------------------------------------

def test_criterion_4_closed_form_vs_mc(verdict):
    worked = tpr_marginal_closed_form(GaussianPair(1.0, 1.0, 0.0, 1.0), 0.01)
    oracle = stats.norm.cdf(1.0 + stats.norm.ppf(0.01))
    row = check_closed_form_vs_mc(seed=104, n_cases=50, n=1_000_000)
    ok = row.passed and abs(worked - oracle) < 1e-9 and abs(worked - 0.0925) < 5e-4
    verdict(4, ok, f"{row.detail}; worked value {worked:.6f} (oracle {oracle:.6f})")


# 5 -----------------------------------------------------------------------------

def test_criterion_5_conditional_ordering(verdict):
    row = check_conditional_ordering(seed=105, n_families=20, alphas=(0.001, 0.01, 0.05))
    verdict(5, row.passed, row.detail)


# 6 -----------------------------------------------------------------------------

def _desk_run(args):
    seed, out_dir = args
    cfg = load_config(DESK_CONFIG).with_seed_offset(seed)
    reports = run_experiment(cfg, out_dir)
    data = load_dataset(cfg)
    plan = split_four_way(len(data), cfg.split.fractions, cfg.split.seed)
    target = model_from_dict(json.loads((Path(out_dir) / "models" / "target.json").read_text())["model"])
    train_acc = accuracy(target, data.features[plan.target_train], data.labels[plan.target_train])
    test_acc = accuracy(target, data.features[plan.target_test], data.labels[plan.target_test])
    tpr = {r.attack_name: r.tpr_at[0.01] for r in reports}
    seconds = {r.attack_name: r.wall_clock_train_seconds for r in reports}
    return {"tpr": tpr, "seconds": seconds, "train_acc": train_acc, "test_acc": test_acc,
            "n_target_train": len(plan.target_train)}


@pytest.mark.slow
def test_criterion_6_desk_scale_ordering(verdict, tmp_path):
    jobs = [(s, str(tmp_path / f"seed{s}")) for s in DESK_SEEDS]
    with ProcessPoolExecutor(max_workers=min(len(jobs), os.cpu_count() or 1)) as pool:
        runs = list(pool.map(_desk_run, jobs))
    mean = {a: float(np.mean([r["tpr"][a] for r in runs])) for a in runs[0]["tpr"]}
    ratio = float(np.mean([r["seconds"]["lira_offline"] / r["seconds"]["bmia"] for r in runs]))
    train_acc = min(r["train_acc"] for r in runs)
    test_acc = max(r["test_acc"] for r in runs)
    setup_ok = (all(r["n_target_train"] == 2000 for r in runs) and train_acc >= 0.99
                and test_acc <= train_acc - 0.05)
    ok = (setup_ok and mean["bmia"] > mean["attack_p"] and mean["bmia"] >= 0.8 * mean["lira_offline"]
          and 6.0 <= ratio <= 10.0)
    verdict(6, ok, f"TPR@1%FPR over 5 seeds: BMIA {mean['bmia']:.4f}, LiRA {mean['lira_offline']:.4f}, "
                   f"Attack-P {mean['attack_p']:.4f}, Attack-R {mean['attack_r']:.4f}, "
                   f"QMIA {mean['qmia']:.4f}; LiRA/BMIA training cost {ratio:.2f}; "
                   f"train acc >= {train_acc:.3f}, test acc <= {test_acc:.3f}")


# 7 -----------------------------------------------------------------------------

def test_criterion_7_toy_regression(verdict, tmp_path):
    s = run_toy_regression_demo(ExperimentConfig(), tmp_path)
    bnn, qr = s["bnn_width"], s["qr_width"]
    ok = (bnn["0"] > qr["0"] and bnn["0"] > bnn["3"] and bnn["0"] > bnn["-3"]
          and s["bnn_test_coverage"] >= 0.85)
    verdict(7, ok, f"width at 0: BNN {bnn['0']:.3f} vs QR {qr['0']:.3f}; BNN at -3/3: "
                   f"{bnn['-3']:.3f}/{bnn['3']:.3f}; coverage {s['bnn_test_coverage']:.4f}")


# 8 -----------------------------------------------------------------------------

def _t_sf_by_quadrature(t, df):
    log_c = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    density = lambda u: math.exp(log_c - (df + 1) / 2 * math.log1p(u * u / df))  # noqa: E731
    return integrate.quad(density, t, math.inf, epsabs=1e-13, epsrel=1e-12)[0]


def test_criterion_8_t_test(verdict):
    t, p = one_sided_t_test([1.0, 2.0, 3.0])
    oracle = _t_sf_by_quadrature(2 * math.sqrt(3), 2)
    ok = abs(t - 3.4641) <= 1e-4 and abs(p - 0.0371) <= 1e-3 and abs(p - oracle) <= 1e-9
    verdict(8, ok, f"t = {t:.6f}, p = {p:.6f}, quadrature oracle p = {oracle:.6f}")


# 9 -----------------------------------------------------------------------------

def _brute_force_roc(stats_, members):
    n_pos, n_neg = members.sum(), (~members).sum()
    points = {(0.0, 0.0)}
    for thr in np.unique(stats_):
        called = stats_ >= thr
        points.add(((called & ~members).sum() / n_neg, (called & members).sum() / n_pos))
    return sorted(points)


def test_criterion_9_roc_oracle(verdict):
    rng = np.random.default_rng(109)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(2, 501))
        stats_ = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        members = rng.random(n) < rng.uniform(0.1, 0.9)
        members[0], members[1] = True, False
        if roc_curve(stats_, members).points != _brute_force_roc(stats_, members):
            mismatches += 1
    verdict(9, mismatches == 0, f"200 instances, {mismatches} mismatches")
