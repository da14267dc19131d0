"""Numeric substrate: seeded RNG streams, Cholesky, normal and Student-t functions."""
from __future__ import annotations

import math
import zlib
from collections.abc import Sequence

import numpy as np

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised by :func:`cholesky` when a pivot is not strictly positive."""

    def __init__(self, pivot: int, value: float):
        super().__init__(f"matrix is not positive definite (pivot {pivot} = {value:.6g})")
        self.pivot = pivot
        self.value = value


def _label_key(label: int | str) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"integer stream labels must be non-negative, got {label}")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


class RngState:
    """A seeded random stream with named, independent child streams.

    Streams are addressed by ``(seed, path)``; the same address always yields
    the same sequence, and children with different labels are independent
    (numpy ``SeedSequence`` spawn keys).
    """

    def __init__(self, seed: int, path: Sequence[int | str] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_label_key(p) for p in self.path))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *labels: int | str) -> RngState:
        return RngState(self.seed, self.path + labels)

    def standard_normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, path={self.path!r})"


def cholesky(m: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == m`` for symmetric positive-definite ``m``.

    Raises:
      ValueError: if ``m`` is not square or not symmetric (1e-10 relative).
      NotPositiveDefiniteError: if a pivot is ``<= 0``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"cholesky needs a square matrix, got shape {m.shape}")
    scale = max(np.max(np.abs(m)), np.finfo(float).tiny) if m.size else 1.0
    if m.size and np.max(np.abs(m - m.T)) > 1e-10 * scale:
        raise ValueError("cholesky needs a symmetric matrix")
    n = m.shape[0]
    low = np.zeros_like(m)
    for j in range(n):
        row = low[j, :j]
        pivot = m[j, j] - row @ row
        if not pivot > 0.0:
            raise NotPositiveDefiniteError(j, float(pivot))
        d = math.sqrt(pivot)
        low[j, j] = d
        if j + 1 < n:
            low[j + 1 :, j] = (m[j + 1 :, j] - low[j + 1 :, :j] @ row) / d
    return low


def std_normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def std_normal_cdf(x):
    """Standard normal CDF, accurate in both tails (computed through ``erfc``)."""
    if np.ndim(x) == 0:
        return 0.5 * math.erfc(-float(x) / _SQRT2)
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * _erfc(-x / _SQRT2)


_erfc = np.vectorize(math.erfc, otypes=[np.float64])

# Acklam's rational approximation, used only as the Newton starting point.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
        ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def _normal_quantile_scalar(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"std_normal_quantile needs p in (0, 1), got {p}")
    if p > 0.5:
        return -_normal_quantile_scalar(1.0 - p) if 1.0 - p > 0.0 else math.inf
    if p == 0.5:
        return 0.0
    x = _acklam(p)
    for _ in range(2):
        # Newton on the lower tail; p <= 0.5 keeps Phi(x) free of cancellation.
        err = 0.5 * math.erfc(-x / _SQRT2) - p
        x -= err / (_INV_SQRT_2PI * math.exp(-0.5 * x * x))
    return x


def std_normal_quantile(p):
    """Inverse of :func:`std_normal_cdf` on ``(0, 1)``."""
    if np.ndim(p) == 0:
        return _normal_quantile_scalar(float(p))
    return np.vectorize(_normal_quantile_scalar, otypes=[np.float64])(p)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 20000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """``I_x(a, b)`` for ``a, b > 0`` and ``0 <= x <= 1``."""
    if a <= 0 or b <= 0:
        raise ValueError("incomplete beta needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"incomplete beta needs x in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, dof: float) -> float:
    """Upper tail ``1 - F(t)``, computed without cancellation for large ``t``."""
    if not dof > 0:
        raise ValueError(f"student_t needs dof >= 1, got {dof}")
    t = float(t)
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    if t == 0.0:
        return 0.5
    # Tail mass via I_x(dof/2, 1/2) with x = dof/(dof+t^2); the direct form is exact near t=0.
    t2 = t * t
    x = dof / (dof + t2)
    if x > 0.5:
        tail = 0.5 * (1.0 - regularized_incomplete_beta(0.5, dof / 2.0, t2 / (dof + t2)))
    else:
        tail = 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, x)
    return tail if t > 0 else 1.0 - tail


def student_t_cdf(t: float, dof: float) -> float:
    """CDF of Student's t with ``dof`` degrees of freedom."""
    if not dof >= 1:
        raise ValueError(f"student_t_cdf needs dof >= 1, got {dof}")
    t = float(t)
    if t > 0:
        return 1.0 - student_t_sf(t, dof)
    return student_t_sf(-t, dof)


def sample_mvn(mean, chol_cov, n: int, rng: RngState) -> np.ndarray:
    """``n`` draws of ``mean + chol_cov @ z`` with ``z`` standard normal, as an ``(n, dim)`` array."""
    mean = np.asarray(mean, dtype=np.float64)
    chol_cov = np.asarray(chol_cov, dtype=np.float64)
    if mean.ndim != 1 or chol_cov.shape != (mean.size, mean.size):
        raise ValueError(f"sample_mvn: mean shape {mean.shape} does not match chol_cov {chol_cov.shape}")
    z = rng.standard_normal((n, mean.size))
    return mean + z @ chol_cov.T
