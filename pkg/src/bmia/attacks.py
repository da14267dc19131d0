"""Membership inference attacks.

Every attack reports a continuous ``statistic`` with the convention that larger
values are more member-like, so one ROC routine serves all of them.
"""
from __future__ import annotations

import csv
import dataclasses
import math
import time
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from bmia.data import LabeledDataset, sample_reference_subset
from bmia.laplace import (
    DEFAULT_N_SAMPLES,
    LastLayerPosterior,
    PredictiveMode,
    _psd_sqrt,
    predictive_gaussian_batch,
    sample_scores,
)
from bmia.nn import MlpArchitecture, MlpModel, TrainConfig, forward, last_layer_features, sgd_train, weight_init
from bmia.numkit import RngState, sample_mvn, std_normal_cdf, student_t_sf
from bmia.scores import hinge_score

DEFAULT_ALPHAS = (0.001, 0.01, 0.05)


@dataclasses.dataclass
class MembershipQuery:
    x: np.ndarray
    y: int
    is_member: bool | None = None


@dataclasses.dataclass
class AttackDecision:
    attack_name: str
    statistic: float
    p_value: float | None
    verdict_at: dict[float, bool]
    notes: dict[str, str] = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class ReferenceEnsemble:
    models: list[MlpModel]
    training_subsets: list[np.ndarray]
    seeds: list[int]
    train_seconds: list[float]

    def __len__(self) -> int:
        return len(self.models)


def _verdicts(alphas: Iterable[float], rule) -> dict[float, bool]:
    return {float(a): bool(rule(float(a))) for a in alphas}


# BMIA --------------------------------------------------------------------------

def one_sided_t_test(d) -> tuple[float, float]:
    """One-sample, one-sided t-test of ``E[d] > 0``; returns ``(t, p)``.

    A zero sample deviation gives ``t = 0, p = 0.5`` when the mean is zero and
    ``t = +-inf, p = 0 or 1`` otherwise.
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.size
    if n < 2:
        raise ValueError("the t-test needs at least two differences")
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0 or not math.isfinite(sd):
        if mean == 0.0:
            return 0.0, 0.5
        return (math.inf, 0.0) if mean > 0 else (-math.inf, 1.0)
    t = mean / (sd / math.sqrt(n))
    return t, student_t_sf(t, n - 1)


def bmia_decision(s0: float, ref_samples, alphas: Sequence[float] = DEFAULT_ALPHAS) -> AttackDecision:
    """BMIA decision from the target score and posterior reference-score samples.

    The statistic is ``-p``; the t value is kept in the notes.
    """
    t, p = one_sided_t_test(s0 - np.asarray(ref_samples, dtype=np.float64))
    return AttackDecision("bmia", -p, p, _verdicts(alphas, lambda a: p < a), {"t": repr(t)})


def bmia_attack(target: MlpModel, posterior: LastLayerPosterior, reference: MlpModel, query,
                alphas: Sequence[float] = DEFAULT_ALPHAS, n_samples: int = DEFAULT_N_SAMPLES,
                mode: PredictiveMode | str = PredictiveMode.LINEARIZED_LOGIT,
                rng: RngState | None = None) -> AttackDecision:
    """Bayesian membership inference for one ``(x, y)`` query.

    ``posterior`` is the last-layer Laplace posterior of ``reference``, a model
    trained on attacker data only.
    """
    x, y = query[0], query[1]
    s0 = hinge_score(forward(target, np.asarray(x, dtype=np.float64)), y)
    samples = sample_scores(posterior, reference, (x, y), n_samples, mode, rng)
    return bmia_decision(s0, samples, alphas)


def bmia_batch(target: MlpModel, posterior: LastLayerPosterior, reference: MlpModel,
               features, labels, n_samples: int = DEFAULT_N_SAMPLES,
               mode: PredictiveMode | str = PredictiveMode.LINEARIZED_LOGIT,
               rng: RngState | None = None) -> tuple[np.ndarray, np.ndarray]:
    """t statistics and p-values for many queries; query ``i`` uses ``rng.child(i)``."""
    mode = PredictiveMode(mode)
    rng = rng if rng is not None else RngState(0).child("bmia")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    s0 = hinge_score(forward(target, features), labels)
    t = np.empty(len(labels))
    p = np.empty(len(labels))
    if mode is PredictiveMode.LINEARIZED_LOGIT:
        means, covs = predictive_gaussian_batch(posterior, last_layer_features(reference, features))
        for i in range(len(labels)):
            logits = sample_mvn(means[i], _psd_sqrt(covs[i]), n_samples, rng.child(i))
            t[i], p[i] = one_sided_t_test(s0[i] - hinge_score(logits, labels[i]))
    else:
        for i in range(len(labels)):
            ref = sample_scores(posterior, reference, (features[i], labels[i]), n_samples,
                                mode, rng.child(i))
            t[i], p[i] = one_sided_t_test(s0[i] - ref)
    return t, p


# Empirical-threshold attacks ----------------------------------------------------

def midpoint_rank(sample, s0: float) -> float:
    """Fraction of ``sample`` strictly below ``s0``, ties counted one half."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.size == 0:
        raise ValueError("empty score sample")
    below = np.count_nonzero(sample < s0)
    ties = np.count_nonzero(sample == s0)
    return (below + 0.5 * ties) / sample.size


def empirical_upper_quantile(sample, alpha: float) -> float:
    """Inverse-CDF quantile at level ``1 - alpha``: the ``ceil((1-alpha) n)``-th smallest value."""
    sample = np.asarray(sample, dtype=np.float64)
    return float(np.quantile(sample, 1.0 - alpha, method="inverted_cdf"))


def attack_p(population_scores, s0: float, alphas: Sequence[float] = DEFAULT_ALPHAS) -> AttackDecision:
    """Marginal attack: one dataset-wide threshold from population non-member scores."""
    stat = midpoint_rank(population_scores, s0)
    return AttackDecision("attack_p", stat, None, _verdicts(
        alphas, lambda a: s0 >= empirical_upper_quantile(population_scores, a)))


def attack_r(ref_scores, s0: float, alphas: Sequence[float] = DEFAULT_ALPHAS) -> AttackDecision:
    """Per-example threshold from the query's own reference-model scores."""
    stat = midpoint_rank(ref_scores, s0)
    return AttackDecision("attack_r", stat, None, _verdicts(
        alphas, lambda a: s0 >= empirical_upper_quantile(ref_scores, a)))


def lira_offline(ref_scores, s0: float, alphas: Sequence[float] = DEFAULT_ALPHAS) -> AttackDecision:
    """Offline LiRA: Gaussian fit to the query's reference (non-member) scores."""
    ref = np.asarray(ref_scores, dtype=np.float64)
    if ref.size < 2:
        raise ValueError("offline LiRA needs at least two reference scores")
    mu = float(ref.mean())
    sd = float(ref.std(ddof=1))
    if sd == 0.0:
        stat = 1.0 if s0 > mu else (0.0 if s0 < mu else 0.5)
        p = 1.0 - stat
    else:
        z = (s0 - mu) / sd
        stat = std_normal_cdf(z)
        p = std_normal_cdf(-z)
    return AttackDecision("lira_offline", stat, p, _verdicts(alphas, lambda a: p < a))


# QMIA --------------------------------------------------------------------------

def rearranged_quantiles(model: MlpModel, x) -> np.ndarray:
    """Predicted quantiles sorted along the tau axis (monotone rearrangement)."""
    return np.sort(forward(model, x), axis=-1)


def _nearest_tau(taus: Sequence[float], level: float) -> int:
    return int(np.argmin(np.abs(np.asarray(taus) - level)))


def qmia_attack(quantile_model: MlpModel, query, s0: float,
                alphas: Sequence[float] = DEFAULT_ALPHAS) -> AttackDecision:
    """Quantile-regression attack: threshold ``s0`` at the predicted ``(1-alpha)`` quantile of ``x``.

    The statistic is ``s0`` minus the predicted median (nearest tau to 0.5).
    """
    taus = quantile_model.architecture.taus
    x = query[0] if isinstance(query, (tuple, list)) else getattr(query, "x", query)
    q = rearranged_quantiles(quantile_model, np.asarray(x, dtype=np.float64))
    notes: dict[str, str] = {}
    verdicts = {}
    for a in alphas:
        k = _nearest_tau(taus, 1.0 - a)
        if not math.isclose(taus[k], 1.0 - a, abs_tol=1e-12):
            notes[f"alpha={a}"] = f"nearest tau {taus[k]} used for level {1.0 - a}"
        verdicts[float(a)] = bool(s0 >= q[k])
    median = q[_nearest_tau(taus, 0.5)]
    return AttackDecision("qmia", float(s0 - median), None, verdicts, notes)


def train_quantile_model(features, scores, taus: Sequence[float], hidden: Sequence[int],
                         config: TrainConfig, seed: int, activation: str = "relu") -> MlpModel:
    """Fit a network predicting the ``taus`` quantiles of ``scores`` given features.

    Targets are standardized for training and the scaling is folded back into
    the last layer, so the returned model predicts raw scores.
    """
    features = np.asarray(features, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    loc = float(scores.mean())
    scale = float(scores.std()) or 1.0
    taus = tuple(sorted(float(t) for t in taus))
    arch = MlpArchitecture((features.shape[1], *hidden, len(taus)), activation, "quantile", taus)
    data = LabeledDataset(features, (scores - loc) / scale)
    model = sgd_train(weight_init(arch, seed), data, config, RngState(seed).child("sgd_shuffle"))
    model.weights[-1] = model.weights[-1] * scale
    model.biases[-1] = model.biases[-1] * scale + loc
    return model


# Reference models ---------------------------------------------------------------

def train_model(architecture: MlpArchitecture, data: LabeledDataset, config: TrainConfig,
                seed: int) -> MlpModel:
    """Weight init and SGD shuffling both derived from ``seed`` (separate substreams)."""
    return sgd_train(weight_init(architecture, seed), data, config,
                     RngState(seed).child("sgd_shuffle"))


def build_reference_ensemble(population: LabeledDataset, n: int, architecture: MlpArchitecture,
                             train_config: TrainConfig, base_seed: int,
                             threads: int = 1) -> ReferenceEnsemble:
    """Train ``n`` reference models, model ``i`` on a random half of ``population``
    chosen with seed ``base_seed + i``."""
    if n < 1:
        raise ValueError("need at least one reference model")
    seeds = [base_seed + i for i in range(n)]
    all_idx = np.arange(len(population))

    def train_one(i: int):
        subset = sample_reference_subset(all_idx, seeds[i])
        start = time.perf_counter()
        try:
            model = train_model(architecture, population.subset(subset), train_config, seeds[i])
        except Exception as exc:
            raise RuntimeError(f"reference model {i} failed: {exc}") from exc
        return model, subset, time.perf_counter() - start

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(train_one, range(n)))
    else:
        results = [train_one(i) for i in range(n)]
    return ReferenceEnsemble([r[0] for r in results], [r[1] for r in results], seeds,
                             [r[2] for r in results])


def reference_score_matrix(models: Sequence[MlpModel], features, labels) -> np.ndarray:
    """Hinge scores of every query under every model, shape ``(n_queries, n_models)``."""
    labels = np.asarray(labels, dtype=np.int64)
    return np.stack([hinge_score(forward(m, features), labels) for m in models], axis=1)


# Files -------------------------------------------------------------------------

def write_score_cache(path, scores: np.ndarray, query_ids: Sequence[int] | None = None) -> None:
    """CSV with columns ``query_id,model_id,score`` from a ``(n_queries, n_models)`` matrix."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    ids = list(query_ids) if query_ids is not None else list(range(scores.shape[0]))
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id", "model_id", "score"])
        for q, row in zip(ids, scores):
            for m, s in enumerate(row):
                w.writerow([q, m, repr(float(s))])


def read_score_cache(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return np.zeros((0, 0))
    nq = max(int(r["query_id"]) for r in rows) + 1
    nm = max(int(r["model_id"]) for r in rows) + 1
    out = np.full((nq, nm), np.nan)
    for r in rows:
        out[int(r["query_id"]), int(r["model_id"])] = float(r["score"])
    return out


def write_decisions(path, attack: str, statistics, p_values, is_member,
                    query_ids: Sequence[int] | None = None) -> None:
    """CSV with columns ``query_id,attack,statistic,p_value,is_member``; empty p_value when absent."""
    statistics = np.asarray(statistics, dtype=np.float64)
    ids = list(query_ids) if query_ids is not None else list(range(statistics.size))
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id", "attack", "statistic", "p_value", "is_member"])
        for i, q in enumerate(ids):
            p = "" if p_values is None else repr(float(p_values[i]))
            w.writerow([q, attack, repr(float(statistics[i])), p, int(bool(is_member[i]))])


def read_decisions(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Statistics and membership labels per attack from decision CSV files."""
    out: dict[str, tuple[list, list]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        for r in csv.DictReader(f):
            stats, members = out.setdefault(r["attack"], ([], []))
            stats.append(float(r["statistic"]))
            members.append(r["is_member"] == "1")
    return {k: (np.asarray(s), np.asarray(m)) for k, (s, m) in out.items()}
