"""Staged experiment pipeline: train, laplace-fit, attack, evaluate.

Each stage reads what earlier stages wrote to the output directory, so any
stage can be rerun on its own. Files are written atomically; when a stage fails
the files it already wrote are renamed with a ``.partial`` suffix.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np

from bmia import attacks as atk
from bmia.config import ConfigError, ExperimentConfig
from bmia.data import CsvSchema, LabeledDataset, load_csv, make_synthetic_classification, split_four_way
from bmia.evaluation import AttackReport, make_report, write_report, write_roc
from bmia.laplace import dumps_posterior, fit_last_layer_posterior, loads_posterior, tune_prior_precision
from bmia.nn import MlpArchitecture, forward, model_from_dict, model_to_dict
from bmia.numkit import RngState
from bmia.scores import hinge_score

STAGES = ("train", "laplace-fit", "attack", "evaluate")
MANIFEST = "manifest.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class OutputDir:
    """Atomic writes plus a manifest of every file with its sha256."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.written: list[str] = []

    def path(self, rel: str) -> Path:
        return self.root / rel

    def write_text(self, rel: str, text: str) -> Path:
        target = self.path(rel)
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(target.name + ".tmp")
        with open(tmp, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, target)
        if rel not in self.written:
            self.written.append(rel)
        return target

    def write_with(self, rel: str, writer) -> Path:
        """Run ``writer(path)`` against a temporary file and rename it into place."""
        target = self.path(rel)
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(target.name + ".tmp")
        writer(tmp)
        os.replace(tmp, target)
        if rel not in self.written:
            self.written.append(rel)
        return target

    def read_text(self, rel: str) -> str:
        p = self.path(rel)
        if not p.exists():
            raise FileNotFoundError(f"{p} is missing; run the earlier stage first")
        return p.read_text(encoding="utf-8")

    def mark_partial(self) -> None:
        for rel in self.written:
            p = self.path(rel)
            if p.exists():
                os.replace(p, p.with_name(p.name + ".partial"))
        self.written = []

    def update_manifest(self) -> None:
        p = self.path(MANIFEST)
        entries = json.loads(p.read_text(encoding="utf-8")) if p.exists() else {}
        for rel in self.written:
            entries[rel] = hashlib.sha256(self.path(rel).read_bytes()).hexdigest()
        entries = {k: v for k, v in sorted(entries.items()) if self.path(k).exists()}
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(json.dumps(entries, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, p)
        self.written = []


@contextlib.contextmanager
def stage(name: str, out: OutputDir):
    out.written = []
    try:
        yield
    except ConfigError:
        out.mark_partial()
        raise
    except Exception as exc:
        out.mark_partial()
        raise StageError(name, exc) from exc
    out.update_manifest()


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled

    @contextlib.contextmanager
    def measure(self, sink: dict, key: str):
        start = time.perf_counter()
        yield
        sink[key] = time.perf_counter() - start if self.enabled else 0.0


# Data ---------------------------------------------------------------------------

def load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    d = cfg.data
    if d.source == "synthetic":
        return make_synthetic_classification(d.n, d.dims, d.classes, d.cluster_spread, d.seed,
                                             d.separation)
    if d.source == "csv":
        return load_csv(d.csv_path, CsvSchema(label_column=d.label_column, has_header=d.has_header))
    raise ConfigError("the attack pipeline needs a classification dataset (synthetic or csv)")


def _architecture(cfg: ExperimentConfig, data: LabeledDataset) -> MlpArchitecture:
    return MlpArchitecture((data.features.shape[1], *cfg.model.hidden, data.n_classes),
                           cfg.model.activation)


def _split(cfg: ExperimentConfig, n: int):
    return split_four_way(n, cfg.split.fractions, cfg.split.seed)


def _needed_references(cfg: ExperimentConfig) -> int:
    if "attack_r" in cfg.attacks or "lira_offline" in cfg.attacks:
        return cfg.reference.n_models
    return 1 if "bmia" in cfg.attacks else 0


def _read_json(out: OutputDir, rel: str):
    return json.loads(out.read_text(rel))


def _load_model(out: OutputDir, rel: str):
    return model_from_dict(_read_json(out, rel)["model"])


def _dumps_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _merge_timings(out: OutputDir, update: dict) -> None:
    p = out.path("timings.json")
    timings = json.loads(p.read_text(encoding="utf-8")) if p.exists() else {}
    timings.update(update)
    out.write_text("timings.json", _dumps_json(timings))


# Stages -------------------------------------------------------------------------

def stage_train(cfg: ExperimentConfig, out: OutputDir, threads: int = 1) -> None:
    data = load_dataset(cfg)
    plan = _split(cfg, len(data))
    arch = _architecture(cfg, data)
    clock = _Clock(cfg.record_timing)
    timings: dict = {}
    out.write_text("split.json", _dumps_json({k: v.tolist() for k, v in plan.parts().items()}))
    with clock.measure(timings, "target"):
        target = atk.train_model(arch, data.subset(plan.target_train), cfg.train, cfg.target_seed)
    out.write_text("models/target.json", _dumps_json({"seed": cfg.target_seed,
                                                      "model": model_to_dict(target)}))
    n_ref = _needed_references(cfg)
    refs = []
    if n_ref:
        ens = atk.build_reference_ensemble(data.subset(plan.population), n_ref, arch, cfg.train,
                                           cfg.reference.base_seed, threads)
        for i, (m, sub, seed) in enumerate(zip(ens.models, ens.training_subsets, ens.seeds)):
            out.write_text(f"models/reference_{i}.json", _dumps_json(
                {"seed": seed, "population_subset": sub.tolist(), "model": model_to_dict(m)}))
        refs = [t if cfg.record_timing else 0.0 for t in ens.train_seconds]
    timings["reference"] = refs
    _merge_timings(out, {"train": timings})


def stage_laplace_fit(cfg: ExperimentConfig, out: OutputDir) -> None:
    if "bmia" not in cfg.attacks:
        return
    data = load_dataset(cfg)
    plan = _split(cfg, len(data))
    ref_entry = _read_json(out, "models/reference_0.json")
    reference = model_from_dict(ref_entry["model"])
    population = data.subset(plan.population)
    fit = population.subset(np.asarray(ref_entry["population_subset"], dtype=np.int64))
    lp = cfg.laplace
    clock = _Clock(cfg.record_timing)
    timings: dict = {}
    with clock.measure(timings, "laplace"):
        if len(lp.prior_grid) == 1:
            lam = lp.prior_grid[0]
        else:
            val = data.subset(plan.holdout) if lp.tuning == "validation" else None
            lam = tune_prior_precision(reference, fit, lp.curvature, lp.prior_grid, lp.tuning, val,
                                       rng=RngState(lp.seed).child("tune"))
        post = fit_last_layer_posterior(reference, fit, lp.curvature, lam)
    out.write_text("posterior.json", dumps_posterior(post))
    _merge_timings(out, timings)


def _query_set(data: LabeledDataset, plan):
    idx = np.r_[plan.target_train, plan.target_test]
    members = np.r_[np.ones(len(plan.target_train), bool), np.zeros(len(plan.target_test), bool)]
    return idx, data.features[idx], data.labels[idx], members


def stage_attack(cfg: ExperimentConfig, out: OutputDir) -> None:
    data = load_dataset(cfg)
    plan = _split(cfg, len(data))
    target = _load_model(out, "models/target.json")
    idx, x, y, members = _query_set(data, plan)
    population = data.subset(plan.population)
    clock = _Clock(cfg.record_timing)
    timings = _read_json(out, "timings.json")
    attack_seconds: dict = {}
    train_seconds: dict = {}
    ref_times = timings["train"]["reference"]

    s0 = hinge_score(forward(target, x), y)
    out.write_with("scores/target_scores.csv",
                   lambda p: atk.write_score_cache(p, s0[:, None], idx.tolist()))

    n_ref = _needed_references(cfg)
    refs = [_load_model(out, f"models/reference_{i}.json") for i in range(n_ref)]
    ref_matrix = None
    if "attack_r" in cfg.attacks or "lira_offline" in cfg.attacks:
        with clock.measure(attack_seconds, "_reference_scores"):
            ref_matrix = atk.reference_score_matrix(refs, x, y)
        out.write_with("scores/reference_scores.csv",
                       lambda p: atk.write_score_cache(p, ref_matrix, idx.tolist()))

    def record(name, stats, p_values):
        out.write_with(f"decisions/{name}.csv", lambda p: atk.write_decisions(
            p, name, stats, p_values, members, idx.tolist()))

    for name in cfg.attacks:
        if name == "attack_p":
            with clock.measure(attack_seconds, name):
                pop_scores = hinge_score(forward(target, population.features), population.labels)
                stats = np.array([atk.midpoint_rank(pop_scores, s) for s in s0])
            train_seconds[name] = 0.0
            record(name, stats, None)
        elif name == "attack_r":
            with clock.measure(attack_seconds, name):
                stats = np.array([atk.attack_r(ref_matrix[i], s0[i], cfg.alphas).statistic
                                  for i in range(len(s0))])
            attack_seconds[name] += attack_seconds["_reference_scores"]
            train_seconds[name] = float(sum(ref_times))
            record(name, stats, None)
        elif name == "lira_offline":
            with clock.measure(attack_seconds, name):
                decs = [atk.lira_offline(ref_matrix[i], s0[i], cfg.alphas) for i in range(len(s0))]
            attack_seconds[name] += attack_seconds["_reference_scores"]
            train_seconds[name] = float(sum(ref_times))
            record(name, np.array([d.statistic for d in decs]), np.array([d.p_value for d in decs]))
        elif name == "bmia":
            post = loads_posterior(out.read_text("posterior.json"))
            with clock.measure(attack_seconds, name):
                t, p = atk.bmia_batch(target, post, refs[0], x, y, cfg.laplace.n_samples,
                                      cfg.laplace.predictive, RngState(cfg.laplace.seed).child("bmia"))
            train_seconds[name] = float(ref_times[0] + timings.get("laplace", 0.0))
            # Every query uses the same sample count, so t orders queries exactly as -p does,
            # but p underflows to 0 for large t and would merge those queries into one tie.
            record(name, t, p)
        elif name == "qmia":
            t: dict = {}
            with clock.measure(t, "train"):
                pop_scores = hinge_score(forward(target, population.features), population.labels)
                qmodel = atk.train_quantile_model(population.features, pop_scores, cfg.qmia.taus,
                                                  cfg.qmia.hidden, cfg.qmia.train, cfg.qmia.seed)
            out.write_text("models/qmia.json", _dumps_json({"seed": cfg.qmia.seed,
                                                            "model": model_to_dict(qmodel)}))
            with clock.measure(attack_seconds, name):
                decs = [atk.qmia_attack(qmodel, (x[i], y[i]), s0[i], cfg.alphas)
                        for i in range(len(s0))]
            train_seconds[name] = t["train"]
            record(name, np.array([d.statistic for d in decs]), None)
    attack_seconds.pop("_reference_scores", None)
    _merge_timings(out, {"attack": attack_seconds, "attack_train": train_seconds})


def stage_evaluate(cfg: ExperimentConfig, out: OutputDir) -> list[AttackReport]:
    timings = _read_json(out, "timings.json")
    reports = []
    for name in cfg.attacks:
        decisions = atk.read_decisions(out.path(f"decisions/{name}.csv"))
        if name not in decisions:
            raise ValueError(f"decision file for {name} is empty")
        stats, members = decisions[name]
        reports.append(make_report(name, stats, members, timings["attack_train"].get(name, 0.0),
                                   timings["attack"].get(name, 0.0)))
    out.write_with("report.csv", lambda p: write_report(reports, p))
    out.write_with("roc.csv", lambda p: write_roc(reports, p))
    return reports


def run_stage(name: str, cfg: ExperimentConfig, out_dir, threads: int = 1):
    out = OutputDir(out_dir)
    with stage(name, out):
        if name == "train":
            return stage_train(cfg, out, threads)
        if name == "laplace-fit":
            return stage_laplace_fit(cfg, out)
        if name == "attack":
            return stage_attack(cfg, out)
        if name == "evaluate":
            return stage_evaluate(cfg, out)
    raise ValueError(f"unknown stage {name!r}")


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> list[AttackReport]:
    """Run every stage in order and return the evaluation reports."""
    out_dir = out_dir if out_dir is not None else cfg.output_dir
    reports = None
    for name in STAGES:
        reports = run_stage(name, cfg, out_dir, threads)
    return reports


# Toy regression ------------------------------------------------------------------

DEMO_COLUMNS = ("x", "qr_low", "qr_med", "qr_high", "bnn_mean", "bnn_low", "bnn_high")
DEMO_TAUS = (0.05, 0.5, 0.95)
DEMO_Z = 1.645


def run_toy_regression_demo(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Quantile regression vs. last-layer Laplace intervals on the 1-D toy problem.

    Writes ``demo/intervals.csv`` (one row per grid point) and
    ``demo/summary.json`` (widths at 0 and 3, test coverage, median fit error).
    """
    from bmia.data import TOY_NOISE_VARIANCE, make_toy_regression
    from bmia.laplace import predictive_gaussian_batch
    from bmia.nn import last_layer_features

    out = OutputDir(out_dir if out_dir is not None else cfg.output_dir)
    d = cfg.demo
    with stage("demo-regression", out):
        train = make_toy_regression(d.n_train, d.data_seed)
        test = make_toy_regression(d.n_test, d.test_seed)
        qr = atk.train_quantile_model(train.features, train.labels, DEMO_TAUS, d.hidden,
                                      d.qr_train, d.qr_seed, activation="tanh")
        arch = MlpArchitecture((1, *d.hidden, 1), "tanh", "regression")
        net = atk.train_model(arch, train, d.train, d.model_seed)
        lam = tune_prior_precision(net, train, "full_ggn", cfg.laplace.prior_grid,
                                   noise_var=TOY_NOISE_VARIANCE)
        post = fit_last_layer_posterior(net, train, "full_ggn", lam, noise_var=TOY_NOISE_VARIANCE)

        def bnn(xs):
            means, covs = predictive_gaussian_batch(post, last_layer_features(net, xs[:, None]))
            half = DEMO_Z * np.sqrt(covs[:, 0, 0] + TOY_NOISE_VARIANCE)
            return means[:, 0], means[:, 0] - half, means[:, 0] + half

        grid = np.linspace(d.grid[0], d.grid[1], d.grid[2])
        q = atk.rearranged_quantiles(qr, grid[:, None])
        mean, low, high = bnn(grid)
        rows = np.column_stack([grid, q, mean, low, high])
        lines = [",".join(DEMO_COLUMNS)]
        lines += [",".join(f"{v:.9f}" for v in r) for r in rows]
        out.write_text("demo/intervals.csv", "\n".join(lines) + "\n")

        at = np.array([0.0, -3.0, 3.0])
        _, lo_at, hi_at = bnn(at)
        q_at = atk.rearranged_quantiles(qr, at[:, None])
        _, t_low, t_high = bnn(test.features[:, 0])
        coverage = float(np.mean((test.labels >= t_low) & (test.labels <= t_high)))
        dense = np.r_[np.linspace(-4, -2, 101), np.linspace(2, 4, 101)]
        med = atk.rearranged_quantiles(qr, dense[:, None])[:, 1]
        rms = float(np.sqrt(np.mean((med - np.sin(1.2 * dense)) ** 2)))
        summary = {
            "prior_precision": lam,
            "bnn_width": {"0": float(hi_at[0] - lo_at[0]), "-3": float(hi_at[1] - lo_at[1]),
                          "3": float(hi_at[2] - lo_at[2])},
            "qr_width": {"0": float(q_at[0, 2] - q_at[0, 0]), "-3": float(q_at[1, 2] - q_at[1, 0]),
                         "3": float(q_at[2, 2] - q_at[2, 0])},
            "bnn_test_coverage": coverage,
            "qr_median_rms_dense": rms,
        }
        out.write_text("demo/summary.json", _dumps_json(summary))
    return summary


def run_verify_theory(seed: int = 0, out_dir=None, cdf=None) -> tuple[str, bool]:
    from bmia.theory import format_table, verify_theory
    kwargs = {} if cdf is None else {"cdf": cdf}
    rows = verify_theory(seed=seed, **kwargs)
    table = format_table(rows)
    if out_dir is not None:
        out = OutputDir(out_dir)
        with stage("verify-theory", out):
            out.write_text("theory_table.txt", table + "\n")
    return table, all(r.passed for r in rows)

