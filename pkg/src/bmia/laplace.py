"""Last-layer Laplace approximation.

The network's last layer is linear in its weights, so with the bias folded into
the features (``h`` of length ``H+1``) the logits are ``f = W h`` and the
Jacobian with respect to ``vec(W)`` is ``h^T kron I_O``. We vectorise ``W``
column-major (index ``j*O + o``), which makes one example's generalized
Gauss-Newton block ``(h h^T) kron Lambda`` with ``Lambda`` the Hessian of the
negative log-likelihood in logit space.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import math
from typing import Any

import numpy as np
import scipy.linalg
import scipy.special

from bmia.nn import MlpModel, last_layer_features, log_softmax, softmax
from bmia.numkit import RngState, cholesky, sample_mvn
from bmia.scores import hinge_score

DEFAULT_PRIOR_GRID = tuple(np.logspace(-4.0, 4.0, 17))
DEFAULT_N_SAMPLES = 1024
POSTERIOR_FORMAT_VERSION = 1
_PSD_RTOL = 1e-12


class CurvatureKind(str, enum.Enum):
    FULL_GGN = "full_ggn"
    DIAGONAL = "diagonal"
    KFAC = "kfac"


class PredictiveMode(str, enum.Enum):
    WEIGHT_MC = "weight_mc"
    LINEARIZED_LOGIT = "linearized_logit"


@dataclasses.dataclass(frozen=True)
class KfacFactors:
    A: np.ndarray  # (H+1, H+1), sum of h h^T
    B: np.ndarray  # (O, O), mean of Lambda


@dataclasses.dataclass(frozen=True)
class PredictiveGaussian:
    mean: np.ndarray
    cov: np.ndarray


@dataclasses.dataclass
class LastLayerPosterior:
    """Gaussian ``N(vec(w_map), (curvature + prior)^-1)`` over the last layer.

    ``curvature`` excludes the prior: a ``d x d`` GGN, its diagonal, or
    :class:`KfacFactors`. ``data_nll`` is the summed negative log-likelihood of
    the fit data at ``w_map`` and feeds the evidence.
    """

    kind: CurvatureKind
    w_map: np.ndarray
    curvature: Any
    prior_precision: float
    n_data: int
    likelihood: str = "classification"
    noise_var: float = 1.0
    data_nll: float = 0.0
    _cache: dict = dataclasses.field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.kind = CurvatureKind(self.kind)
        if not self.prior_precision > 0:
            raise ValueError("prior precision must be positive")
        if not np.all(np.isfinite(self.w_map)):
            raise ValueError("w_map must be finite")

    @property
    def n_outputs(self) -> int:
        return self.w_map.shape[0]

    @property
    def n_features(self) -> int:
        return self.w_map.shape[1]

    @property
    def dim(self) -> int:
        return self.w_map.size

    @property
    def w_map_vec(self) -> np.ndarray:
        return self.w_map.ravel(order="F")

    def with_prior_precision(self, prior_precision: float) -> LastLayerPosterior:
        return dataclasses.replace(self, prior_precision=float(prior_precision), _cache={})

    # Precision pieces, built lazily and cached per instance.

    def _kfac_damped(self):
        if "kfac" not in self._cache:
            root = math.sqrt(self.prior_precision)
            a = self.curvature.A + root * np.eye(self.n_features)
            b = self.curvature.B + root * np.eye(self.n_outputs)
            self._cache["kfac"] = (a, b)
        return self._cache["kfac"]

    def precision_matrix(self) -> np.ndarray:
        """Dense precision (only sensible for small ``d``)."""
        if self.kind is CurvatureKind.FULL_GGN:
            return self.curvature + self.prior_precision * np.eye(self.dim)
        if self.kind is CurvatureKind.DIAGONAL:
            return np.diag(self.curvature + self.prior_precision)
        a, b = self._kfac_damped()
        return np.kron(a, b)

    def _precision_chol(self) -> np.ndarray:
        if "prec_chol" not in self._cache:
            self._cache["prec_chol"] = cholesky(self.precision_matrix())
        return self._cache["prec_chol"]

    def covariance_matrix(self) -> np.ndarray:
        if "cov" not in self._cache:
            if self.kind is CurvatureKind.DIAGONAL:
                cov = np.diag(1.0 / self._diag_precision())
            elif self.kind is CurvatureKind.KFAC:
                a_inv, b_inv = self._kfac_inverses()
                cov = np.kron(a_inv, b_inv)
            else:
                low = self._precision_chol()
                low_inv = scipy.linalg.solve_triangular(low, np.eye(self.dim), lower=True)
                cov = low_inv.T @ low_inv
                cov = 0.5 * (cov + cov.T)
            self._cache["cov"] = cov
        return self._cache["cov"]

    def _diag_precision(self) -> np.ndarray:
        prec = self.curvature + self.prior_precision
        if np.any(prec <= 0):
            raise np.linalg.LinAlgError("diagonal precision is not positive")
        return prec

    def _kfac_inverses(self):
        if "kfac_inv" not in self._cache:
            a, b = self._kfac_damped()
            a_inv = _spd_inverse(a)
            b_inv = _spd_inverse(b)
            self._cache["kfac_inv"] = (a_inv, b_inv)
        return self._cache["kfac_inv"]

    def _kfac_sample_factors(self):
        if "kfac_chol" not in self._cache:
            a_inv, b_inv = self._kfac_inverses()
            self._cache["kfac_chol"] = (cholesky(a_inv), cholesky(b_inv))
        return self._cache["kfac_chol"]

    def log_det_precision(self) -> float:
        if self.kind is CurvatureKind.FULL_GGN:
            return 2.0 * float(np.sum(np.log(np.diag(self._precision_chol()))))
        if self.kind is CurvatureKind.DIAGONAL:
            return float(np.sum(np.log(self._diag_precision())))
        # det(A' kron B') = det(A')^O det(B')^(H+1); eigenvalues shift by sqrt(lambda).
        root = math.sqrt(self.prior_precision)
        ea = np.linalg.eigvalsh(self.curvature.A) + root
        eb = np.linalg.eigvalsh(self.curvature.B) + root
        if np.any(ea <= 0) or np.any(eb <= 0):
            raise np.linalg.LinAlgError("KFAC precision is not positive definite")
        return float(self.n_outputs * np.sum(np.log(ea)) + self.n_features * np.sum(np.log(eb)))

    def sample_weights(self, n: int, rng: RngState) -> np.ndarray:
        """``n`` last-layer weight draws, shape ``(n, O, H+1)``."""
        o, f = self.n_outputs, self.n_features
        if self.kind is CurvatureKind.KFAC:
            # vec(L_B Z L_A^T) = (L_A kron L_B) vec(Z) has covariance A'^-1 kron B'^-1.
            la, lb = self._kfac_sample_factors()
            z = rng.standard_normal((n, o, f))
            return self.w_map + np.einsum("op,npq,jq->noj", lb, z, la)
        if self.kind is CurvatureKind.DIAGONAL:
            std = 1.0 / np.sqrt(self._diag_precision())
            z = rng.standard_normal((n, self.dim))
            flat = self.w_map_vec + z * std
        else:
            if "cov_chol" not in self._cache:
                self._cache["cov_chol"] = cholesky(self.covariance_matrix())
            flat = sample_mvn(self.w_map_vec, self._cache["cov_chol"], n, rng)
        return flat.reshape(n, f, o).transpose(0, 2, 1)


def _spd_inverse(m: np.ndarray) -> np.ndarray:
    low = cholesky(m)
    low_inv = scipy.linalg.solve_triangular(low, np.eye(m.shape[0]), lower=True)
    inv = low_inv.T @ low_inv
    return 0.5 * (inv + inv.T)


def logit_hessian(p) -> np.ndarray:
    """``diag(p) - p p^T``: Hessian of ``-log softmax(f)_y`` with respect to ``f``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("logit_hessian needs a probability vector")
    return np.diag(p) - np.outer(p, p)


def _likelihood_of(model: MlpModel, likelihood: str | None) -> str:
    if likelihood is not None:
        return likelihood
    if model.architecture.task == "classification":
        return "classification"
    if model.architecture.task == "regression":
        return "regression"
    raise ValueError("last-layer Laplace supports classification and regression networks")


def _data_nll(logits: np.ndarray, targets: np.ndarray, likelihood: str, noise_var: float) -> float:
    if likelihood == "classification":
        lp = log_softmax(logits)
        return float(-lp[np.arange(len(targets)), targets.astype(np.int64)].sum())
    resid = logits - targets.reshape(logits.shape)
    return float(0.5 * np.sum(resid**2) / noise_var
                 + 0.5 * resid.size * math.log(2.0 * math.pi * noise_var))


def fit_last_layer_posterior(model: MlpModel, fit_data, kind: CurvatureKind | str,
                             prior_precision: float = 1.0, likelihood: str | None = None,
                             noise_var: float = 1.0) -> LastLayerPosterior:
    """Laplace posterior over the last layer of ``model`` fitted on ``fit_data``.

    ``fit_data`` should be the data the model was trained on. The prior
    precision is recorded, not folded into the stored curvature.
    """
    kind = CurvatureKind(kind)
    likelihood = _likelihood_of(model, likelihood)
    x = np.asarray(fit_data.features, dtype=np.float64)
    targets = np.asarray(fit_data.labels)
    if x.shape[0] == 0:
        raise ValueError("cannot fit a posterior on an empty dataset")
    h = last_layer_features(model, x)
    w_map = model.last_layer_augmented()
    logits = h @ w_map.T
    n, f = h.shape
    o = w_map.shape[0]

    if likelihood == "classification":
        p = softmax(logits)
        if kind is CurvatureKind.KFAC:
            b = (np.diag(p.sum(axis=0)) - p.T @ p) / n
            curvature = KfacFactors(h.T @ h, 0.5 * (b + b.T))
        elif kind is CurvatureKind.DIAGONAL:
            # Lambda[o, o] = p_o (1 - p_o).
            curvature = ((h * h).T @ (p * (1.0 - p))).ravel()
        else:
            curvature = _full_ggn_softmax(h, p)
    elif likelihood == "regression":
        c = 1.0 / noise_var
        if kind is CurvatureKind.KFAC:
            curvature = KfacFactors(h.T @ h, c * np.eye(o))
        elif kind is CurvatureKind.DIAGONAL:
            curvature = np.repeat(c * (h * h).sum(axis=0), o)
        else:
            curvature = np.kron(c * (h.T @ h), np.eye(o))
    else:
        raise ValueError(f"unknown likelihood {likelihood!r}")

    return LastLayerPosterior(kind, w_map, curvature, float(prior_precision), n,
                              likelihood, float(noise_var),
                              _data_nll(logits, targets, likelihood, noise_var))


def _full_ggn_softmax(h: np.ndarray, p: np.ndarray) -> np.ndarray:
    n, f = h.shape
    o = p.shape[1]
    d = f * o
    # sum_n (h h^T) kron diag(p): block-diagonal in o within each (j, k) block.
    g = np.zeros((f, o, f, o))
    for k in range(o):
        g[:, k, :, k] = (h * p[:, k : k + 1]).T @ h
    u = (h[:, :, None] * p[:, None, :]).reshape(n, d)
    g = g.reshape(d, d) - u.T @ u
    return 0.5 * (g + g.T)


def log_marginal_likelihood_of(posterior: LastLayerPosterior) -> float:
    """Laplace evidence ``-L(w_map) + (d/2) ln 2pi + (1/2) ln det Sigma``.

    ``L`` is the data negative log-likelihood plus the negative log of the
    ``N(0, I/lambda)`` prior density at ``w_map``.
    """
    lam = posterior.prior_precision
    d = posterior.dim
    w_sq = float(np.sum(posterior.w_map**2))
    neg_log_prior = 0.5 * lam * w_sq - 0.5 * d * math.log(lam / (2.0 * math.pi))
    loss = posterior.data_nll + neg_log_prior
    return -loss + 0.5 * d * math.log(2.0 * math.pi) - 0.5 * posterior.log_det_precision()


def log_marginal_likelihood(model: MlpModel, fit_data, kind, prior_precision: float,
                            likelihood: str | None = None, noise_var: float = 1.0) -> float:
    post = fit_last_layer_posterior(model, fit_data, kind, prior_precision, likelihood, noise_var)
    return log_marginal_likelihood_of(post)


def validation_log_predictive(posterior: LastLayerPosterior, model: MlpModel, val_data,
                              n_samples: int = 256, rng: RngState | None = None) -> float:
    """Summed ``log p(y | x, D)`` over ``val_data`` under the linearized predictive.

    Classification averages softmax probabilities over logit samples; regression
    uses the Gaussian predictive in closed form.
    """
    h = last_layer_features(model, val_data.features)
    means, covs = predictive_gaussian_batch(posterior, h)
    targets = np.asarray(val_data.labels)
    if posterior.likelihood == "regression":
        var = covs[:, 0, 0] + posterior.noise_var
        resid = targets.reshape(-1) - means[:, 0]
        return float(np.sum(-0.5 * np.log(2.0 * math.pi * var) - 0.5 * resid**2 / var))
    rng = rng if rng is not None else RngState(0).child("validation_predictive")
    total = 0.0
    for i in range(h.shape[0]):
        factor = _psd_sqrt(covs[i])
        logits = sample_mvn(means[i], factor, n_samples, rng.child(i))
        lp = log_softmax(logits)[:, int(targets[i])]
        total += float(scipy.special.logsumexp(lp) - math.log(n_samples))
    return total


def tune_prior_precision(model: MlpModel, fit_data, kind, grid=DEFAULT_PRIOR_GRID,
                         mode: str = "marglik", val_data=None, likelihood: str | None = None,
                         noise_var: float = 1.0, n_samples: int = 256,
                         rng: RngState | None = None) -> float:
    """Grid search for the prior precision.

    ``mode="marglik"`` maximizes the Laplace evidence; ``mode="validation"``
    maximizes the summed validation log predictive on ``val_data``. Ties go to
    the smallest precision.
    """
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("prior precision grid is empty")
    if any(g <= 0 for g in grid):
        raise ValueError("prior precisions must be positive")
    base = fit_last_layer_posterior(model, fit_data, kind, grid[0], likelihood, noise_var)
    if mode == "validation" and val_data is None:
        raise ValueError("validation tuning needs val_data")
    best, best_val = grid[0], -math.inf
    for lam in grid:
        post = base.with_prior_precision(lam)
        if mode == "marglik":
            val = log_marginal_likelihood_of(post)
        elif mode == "validation":
            val = validation_log_predictive(post, model, val_data, n_samples,
                                            rng if rng is not None else RngState(0).child("tune"))
        else:
            raise ValueError(f"unknown tuning mode {mode!r}")
        if val > best_val:
            best, best_val = lam, val
    return best


def _psd_clamp(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    top = max(float(vals.max()), 0.0)
    vals = np.where(vals < _PSD_RTOL * top, 0.0, vals)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """A square-root factor ``S`` with ``S S^T = cov`` for PSD (possibly singular) ``cov``."""
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _predictive_cov_raw(posterior: LastLayerPosterior, h: np.ndarray) -> np.ndarray:
    """Unclamped ``J Sigma J^T`` for a batch of features ``h`` of shape ``(N, H+1)``."""
    o, f = posterior.n_outputs, posterior.n_features
    if posterior.kind is CurvatureKind.KFAC:
        a_inv, b_inv = posterior._kfac_inverses()
        scale = np.einsum("nj,jk,nk->n", h, a_inv, h)
        return scale[:, None, None] * b_inv
    if posterior.kind is CurvatureKind.DIAGONAL:
        var = (1.0 / posterior._diag_precision()).reshape(f, o)
        diag = (h * h) @ var
        out = np.zeros((h.shape[0], o, o))
        out[:, np.arange(o), np.arange(o)] = diag
        return out
    sigma = posterior.covariance_matrix().reshape(f, o, f, o)
    return np.einsum("nj,jokp,nk->nop", h, sigma, h, optimize=True)


def predictive_gaussian_batch(posterior: LastLayerPosterior, h) -> tuple[np.ndarray, np.ndarray]:
    """Means ``(N, O)`` and clamped covariances ``(N, O, O)`` for a batch of features."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if h.shape[1] != posterior.n_features:
        raise ValueError(f"feature length {h.shape[1]} != {posterior.n_features}")
    means = h @ posterior.w_map.T
    raw = _predictive_cov_raw(posterior, h)
    return means, np.stack([_psd_clamp(c) for c in raw])


def predictive_gaussian(posterior: LastLayerPosterior, h) -> PredictiveGaussian:
    """Linearized predictive over the outputs for one feature vector ``h`` (length ``H+1``)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (posterior.n_features,):
        raise ValueError(f"feature vector must have length {posterior.n_features}")
    means, covs = predictive_gaussian_batch(posterior, h[None, :])
    return PredictiveGaussian(means[0], covs[0])


def sample_scores(posterior: LastLayerPosterior, model: MlpModel, query, n: int,
                  mode: PredictiveMode | str = PredictiveMode.LINEARIZED_LOGIT,
                  rng: RngState | None = None) -> np.ndarray:
    """``n`` hinge scores of ``query = (x, y)`` under posterior draws.

    ``model`` is the network hosting the posterior; it supplies the features.
    ``WEIGHT_MC`` samples last-layer weights, ``LINEARIZED_LOGIT`` samples logits
    from :func:`predictive_gaussian`.
    """
    if n < 2:
        raise ValueError("sample_scores needs n >= 2")
    mode = PredictiveMode(mode)
    rng = rng if rng is not None else RngState(0).child("sample_scores")
    x, y = query
    h = last_layer_features(model, np.asarray(x, dtype=np.float64))
    if mode is PredictiveMode.WEIGHT_MC:
        logits = posterior.sample_weights(n, rng) @ h
    else:
        pred = predictive_gaussian(posterior, h)
        logits = sample_mvn(pred.mean, _psd_sqrt(pred.cov), n, rng)
    return hinge_score(logits, y)


# Checkpoints -----------------------------------------------------------------

def _curvature_payload(posterior: LastLayerPosterior) -> dict[str, Any]:
    c = posterior.curvature
    if posterior.kind is CurvatureKind.KFAC:
        return {"A": c.A.tolist(), "B": c.B.tolist()}
    if posterior.kind is CurvatureKind.DIAGONAL:
        return {"diagonal": c.tolist()}
    return {"full": c.tolist()}


def dumps_posterior(posterior: LastLayerPosterior) -> str:
    d = {
        "format_version": POSTERIOR_FORMAT_VERSION,
        "kind": posterior.kind.value,
        "w_map": posterior.w_map.tolist(),
        "curvature": _curvature_payload(posterior),
        "prior_precision": posterior.prior_precision,
        "n_data": posterior.n_data,
        "likelihood": posterior.likelihood,
        "noise_var": posterior.noise_var,
        "data_nll": posterior.data_nll,
    }
    return json.dumps(d, indent=1, sort_keys=True) + "\n"


def loads_posterior(text: str) -> LastLayerPosterior:
    d = json.loads(text)
    if d.get("format_version") != POSTERIOR_FORMAT_VERSION:
        raise ValueError(f"unsupported posterior checkpoint version {d.get('format_version')}")
    kind = CurvatureKind(d["kind"])
    payload = d["curvature"]
    if kind is CurvatureKind.KFAC:
        curvature = KfacFactors(np.array(payload["A"], dtype=np.float64),
                                np.array(payload["B"], dtype=np.float64))
    elif kind is CurvatureKind.DIAGONAL:
        curvature = np.array(payload["diagonal"], dtype=np.float64)
    else:
        curvature = np.array(payload["full"], dtype=np.float64)
    return LastLayerPosterior(kind, np.array(d["w_map"], dtype=np.float64), curvature,
                              d["prior_precision"], d["n_data"], d["likelihood"],
                              d["noise_var"], d["data_nll"])


def save_posterior(path, posterior: LastLayerPosterior) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_posterior(posterior))


def load_posterior(path) -> LastLayerPosterior:
    with open(path, encoding="utf-8") as f:
        return loads_posterior(f.read())
