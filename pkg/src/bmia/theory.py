"""True-positive rates of marginal and conditional attacks under Gaussian score models.

Closed forms, Monte Carlo estimators for cross-checking them, and the
law-of-total-variance split into epistemic and aleatoric parts.
"""
from __future__ import annotations

import dataclasses
import math
from collections.abc import Callable

import numpy as np

from bmia.numkit import RngState, std_normal_cdf, std_normal_quantile


@dataclasses.dataclass(frozen=True)
class GaussianPair:
    """Member scores ~ N(mu_s, sigma_s^2), non-member scores ~ N(mu_d, sigma_d^2)."""

    mu_s: float
    sigma_s: float
    mu_d: float
    sigma_d: float

    def __post_init__(self):
        if not (self.sigma_s > 0 and self.sigma_d > 0):
            raise ValueError("score standard deviations must be positive")


# Draws per-example (mu_s, sigma_s, mu_d, sigma_d) arrays of length n.
ConditionalFamily = Callable[[RngState, int], tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]


def tpr_marginal_closed_form(pair: GaussianPair, alpha: float, cdf=std_normal_cdf) -> float:
    """TPR of thresholding at the non-member ``(1 - alpha)`` quantile."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    z = (pair.mu_s - pair.mu_d + std_normal_quantile(alpha) * pair.sigma_d) / pair.sigma_s
    return cdf(z)


def _tpr_closed_form_arrays(mu_s, sigma_s, mu_d, sigma_d, alpha: float) -> np.ndarray:
    return std_normal_cdf((mu_s - mu_d + std_normal_quantile(alpha) * sigma_d) / sigma_s)


def tpr_marginal_mc(pair: GaussianPair, alpha: float, n: int, rng: RngState) -> float:
    """Monte Carlo TPR: fraction of member draws at or above ``mu_d + Phi^-1(1-alpha) sigma_d``."""
    tau = pair.mu_d + std_normal_quantile(1.0 - alpha) * pair.sigma_d
    members = pair.mu_s + pair.sigma_s * rng.standard_normal(n)
    return float(np.count_nonzero(members >= tau)) / n


@dataclasses.dataclass(frozen=True)
class ConditionalEstimate:
    conditional: float
    marginal_gaussian: float
    marginal_mc: float
    max_example_tpr: float


def tpr_conditional_mc(family: ConditionalFamily, alpha: float, n_examples: int,
                       n_samples: int, rng: RngState) -> ConditionalEstimate:
    """Conditional-attack TPR averaged over sampled examples, with marginal comparisons.

    ``marginal_gaussian`` applies the closed form to the mixture's overall mean
    and variance (law of total variance). ``marginal_mc`` thresholds the actual
    non-member mixture at its empirical ``(1 - alpha)`` quantile using
    ``n_samples`` score draws per side.
    """
    mu_s, sigma_s, mu_d, sigma_d = (np.asarray(a, dtype=np.float64)
                                    for a in family(rng.child("family"), n_examples))
    if np.any(sigma_s <= 0) or np.any(sigma_d <= 0):
        raise ValueError("family produced a non-positive standard deviation")
    per_example = _tpr_closed_form_arrays(mu_s, sigma_s, mu_d, sigma_d, alpha)
    conditional = float(np.mean(per_example))

    overall = GaussianPair(float(mu_s.mean()), math.sqrt(float((sigma_s**2).mean() + mu_s.var())),
                           float(mu_d.mean()), math.sqrt(float((sigma_d**2).mean() + mu_d.var())))
    marginal_gaussian = tpr_marginal_closed_form(overall, alpha)

    pick = rng.child("mixture")
    zi = pick.gen.integers(0, n_examples, size=n_samples)
    non = mu_d[zi] + sigma_d[zi] * pick.standard_normal(n_samples)
    zj = pick.gen.integers(0, n_examples, size=n_samples)
    mem = mu_s[zj] + sigma_s[zj] * pick.standard_normal(n_samples)
    tau = float(np.quantile(non, 1.0 - alpha, method="inverted_cdf"))
    marginal_mc = float(np.count_nonzero(mem > tau)) / n_samples
    return ConditionalEstimate(conditional, marginal_gaussian, marginal_mc, float(per_example.max()))


def heterogeneous_family(mu_d_spread: float = 2.0, gap: tuple[float, float] = (0.1, 0.8),
                         sigma_range: tuple[float, float] = (0.5, 1.5)) -> ConditionalFamily:
    """Examples with varying non-member means and a per-example member shift ``gap``."""

    def sample(rng: RngState, n: int):
        mu_d = mu_d_spread * rng.child("mu_d").standard_normal(n)
        shift = rng.child("gap").uniform(gap[0], gap[1], n)
        sigma_s = rng.child("sigma_s").uniform(sigma_range[0], sigma_range[1], n)
        sigma_d = rng.child("sigma_d").uniform(sigma_range[0], sigma_range[1], n)
        return mu_d + shift, sigma_s, mu_d, sigma_d

    return sample


def constant_family(pair: GaussianPair) -> ConditionalFamily:
    def sample(rng: RngState, n: int):
        return tuple(np.full(n, v) for v in (pair.mu_s, pair.sigma_s, pair.mu_d, pair.sigma_d))

    return sample


def variance_decomposition(mean_per_sample, var_per_sample, ddof: int = 0):
    """``(epistemic, aleatoric, total)``: variance of the means, mean of the variances, and their sum.

    With ``ddof=0`` the identity ``total = epistemic + aleatoric`` is the law of
    total variance for the empirical mixture.
    """
    means = np.asarray(mean_per_sample, dtype=np.float64)
    variances = np.asarray(var_per_sample, dtype=np.float64)
    if means.shape != variances.shape or means.size == 0:
        raise ValueError("mean and variance arrays must be non-empty and of equal length")
    if np.any(variances < 0):
        raise ValueError("variances must be non-negative")
    epistemic = float(np.var(means, ddof=ddof)) if means.size > ddof else 0.0
    aleatoric = float(np.mean(variances))
    return epistemic, aleatoric, epistemic + aleatoric


# Verification table --------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class CheckRow:
    name: str
    passed: bool
    detail: str


def _random_pair(rng: RngState) -> tuple[GaussianPair, float]:
    u = rng.uniform(size=5)
    pair = GaussianPair(mu_s=-1.0 + 4.0 * u[0], sigma_s=0.3 + 2.0 * u[1],
                        mu_d=-1.0 + 2.0 * u[2], sigma_d=0.3 + 2.0 * u[3])
    alpha = float(10.0 ** (-3.0 + 2.5 * u[4]))
    return pair, alpha


def check_closed_form_vs_mc(seed: int = 0, n_cases: int = 50, n: int = 1_000_000,
                            cdf=std_normal_cdf) -> CheckRow:
    root = RngState(seed).child("prop1_mc")
    worst = 0.0
    for i in range(n_cases):
        pair, alpha = _random_pair(root.child("params", i))
        exact = tpr_marginal_closed_form(pair, alpha, cdf)
        est = tpr_marginal_mc(pair, alpha, n, root.child("draws", i))
        se = math.sqrt(max(exact * (1.0 - exact), 1.0 / n) / n)
        worst = max(worst, abs(est - exact) / se)
    return CheckRow("closed form vs Monte Carlo (marginal TPR)", worst <= 5.0,
                    f"{n_cases} cases, max deviation {worst:.2f} standard errors (limit 5)")


def check_worked_value(cdf=std_normal_cdf) -> CheckRow:
    val = tpr_marginal_closed_form(GaussianPair(1.0, 1.0, 0.0, 1.0), 0.01, cdf)
    return CheckRow("worked value mu_s=1, alpha=0.01", abs(val - 0.0925) < 5e-4,
                    f"TPR = {val:.6f} (expected ~0.0925)")


def check_conditional_ordering(seed: int = 0, n_families: int = 20,
                               alphas=(0.001, 0.01, 0.05)) -> CheckRow:
    root = RngState(seed).child("prop2")
    failures = 0
    total = 0
    max_tpr = 0.0
    for i in range(n_families):
        u = root.child("hyper", i).uniform(size=2)
        family = heterogeneous_family(mu_d_spread=0.5 + 2.5 * u[0], gap=(0.05, 0.3 + 0.5 * u[1]))
        for alpha in alphas:
            est = tpr_conditional_mc(family, alpha, 2000, 200_000, root.child("run", i, str(alpha)))
            total += 1
            max_tpr = max(max_tpr, est.max_example_tpr)
            if est.conditional < est.marginal_gaussian:
                failures += 1
    # The ordering is only claimed where every per-example TPR is below one half.
    return CheckRow("conditional TPR >= marginal TPR", failures == 0 and max_tpr < 0.5,
                    f"{total - failures}/{total} family/alpha combinations ordered, "
                    f"max per-example TPR {max_tpr:.3f}")


def check_sign_convention(seed: int = 0) -> CheckRow:
    """The '+ Phi^-1(alpha) sigma_d' form matches simulation; the '- ...' form does not."""
    pair = GaussianPair(1.0, 1.0, 0.0, 1.0)
    alpha = 0.01
    est = tpr_marginal_mc(pair, alpha, 1_000_000, RngState(seed).child("sign"))
    plus = tpr_marginal_closed_form(pair, alpha)
    minus = std_normal_cdf((pair.mu_s - pair.mu_d - std_normal_quantile(alpha) * pair.sigma_d)
                           / pair.sigma_s)
    se = math.sqrt(plus * (1 - plus) / 1_000_000)
    ok = abs(est - plus) < 5 * se and abs(est - minus) > 5 * se
    return CheckRow("sign of the quantile term", ok,
                    f"MC {est:.4f}; '+' form {plus:.4f}; '-' form {minus:.4f}")


def check_limits(cdf=std_normal_cdf) -> CheckRow:
    low = tpr_marginal_closed_form(GaussianPair(-20.0, 1.0, 0.0, 1.0), 0.01, cdf)
    high = tpr_marginal_closed_form(GaussianPair(20.0, 1.0, 0.0, 1.0), 0.01, cdf)
    return CheckRow("limits at +-20 sigma", low < 1e-12 and high > 1 - 1e-12,
                    f"TPR(-20) = {low:.3g}, TPR(+20) = {high:.12f}")


def check_variance_identity(seed: int = 0) -> CheckRow:
    """Compare the split against the mixture variance computed from raw second moments."""
    rng = RngState(seed).child("variance")
    worst = 0.0
    for i in range(100):
        r = rng.child(i)
        means = r.standard_normal(50)
        variances = r.uniform(size=50)
        e, a, t = variance_decomposition(means, variances)
        direct = float(np.mean(variances + means**2) - np.mean(means) ** 2)
        worst = max(worst, abs(t - direct) / direct)
    return CheckRow("epistemic + aleatoric = total", worst < 1e-12,
                    f"max relative residual {worst:.3g}")


def verify_theory(seed: int = 0, cdf=std_normal_cdf, mc_cases: int = 50,
                  mc_samples: int = 1_000_000) -> list[CheckRow]:
    """Run every theory check; ``cdf`` is injectable so a corrupted one can be shown to fail."""
    return [
        check_worked_value(cdf),
        check_closed_form_vs_mc(seed, mc_cases, mc_samples, cdf),
        check_conditional_ordering(seed),
        check_sign_convention(seed),
        check_limits(cdf),
        check_variance_identity(seed),
    ]


def format_table(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  result  detail"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    return "\n".join(lines)
