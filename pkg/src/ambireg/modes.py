"""Mode detection on posterior samples via 1- vs 2-component GMMs and AIC.

Samples are sorted lexicographically before fitting, so every result is a
function of the sample multiset only (row order never matters).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericError, ParameterError
from .geometry import Pose, vector_pose

COV_FLOOR = 1e-6
DEFAULT_THRESHOLD = 2000.0


@dataclass
class Gmm:
    k: int
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood: float
    n_iter: int = 0
    ll_trace: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "log_likelihood": self.log_likelihood,
        }


def _floor_cov(cov, floor=COV_FLOOR):
    """Raise eigenvalues below ``floor``; leaves well-conditioned matrices untouched."""
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    if w.min() >= floor:
        return cov
    return (v * np.maximum(w, floor)) @ v.T


def _component_logpdf(x, mean, cov):
    d = x.shape[1]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError("covariance is not positive definite") from exc
    whiten = solve_triangular(chol, np.eye(d), lower=True)
    sol = (x - mean) @ whiten.T
    maha = np.einsum("ij,ij->i", sol, sol)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (maha + logdet + d * math.log(2.0 * math.pi))


def _log_joint(x, weights, means, covs):
    return np.stack(
        [math.log(w) + _component_logpdf(x, m, c) if w > 0 else np.full(len(x), -np.inf)
         for w, m, c in zip(weights, means, covs)],
        axis=1,
    )


def _logsumexp_rows(a):
    top = a.max(axis=1)
    return top + np.log(np.exp(a - top[:, None]).sum(axis=1))


def _m_step(x, resp):
    nk = resp.sum(axis=0)
    if np.any(nk <= 0):
        raise NumericError("empty mixture component")
    weights = nk / nk.sum()
    means = (resp.T @ x) / nk[:, None]
    covs = []
    for j in range(resp.shape[1]):
        d = x - means[j]
        covs.append(_floor_cov((resp[:, j, None] * d).T @ d / nk[j]))
    return weights, means, np.array(covs)


def _canonical(samples):
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ParameterError("samples must be a 2-d array")
    if len(x) < 50:
        raise ParameterError(f"need at least 50 samples, got {len(x)}")
    if not np.all(np.isfinite(x)):
        raise ParameterError("samples must be finite")
    order = np.lexsort(x.T[::-1])
    return x[order]


def _kmeanspp_resp(x, k, rng):
    centres = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min([np.sum((x - c) ** 2, axis=1) for c in centres], axis=0)
        total = d2.sum()
        if total <= 0:
            centres.append(x[rng.integers(len(x))])
        else:
            centres.append(x[rng.choice(len(x), p=d2 / total)])
    dist = np.stack([np.sum((x - c) ** 2, axis=1) for c in centres], axis=1)
    resp = np.zeros((len(x), k))
    resp[np.arange(len(x)), dist.argmin(axis=1)] = 1.0
    return resp


def _split_resp(x):
    # soft split of the single Gaussian along its principal axis
    mu = x.mean(axis=0)
    w, v = np.linalg.eigh(np.cov(x.T, bias=True))
    proj = (x - mu) @ v[:, -1] / math.sqrt(max(w[-1], COV_FLOOR))
    p = 1.0 / (1.0 + np.exp(-2.0 * proj))
    return np.stack([p, 1.0 - p], axis=1)


def _em(x, resp, tol, max_iter):
    n = len(x)
    weights, means, covs = _m_step(x, resp)
    trace = []
    prev = -np.inf
    for it in range(max_iter + 1):
        lj = _log_joint(x, weights, means, covs)
        lse = _logsumexp_rows(lj)
        ll = float(lse.sum())
        if not math.isfinite(ll):
            raise NumericError("non-finite log-likelihood in EM")
        trace.append(ll)
        if ll < prev - 1e-9 * max(1.0, abs(prev)):
            raise NumericError(f"EM log-likelihood decreased at iteration {it}: {prev} -> {ll}")
        if it == max_iter or ll - prev < tol * n:
            break
        prev = ll
        weights, means, covs = _m_step(x, np.exp(lj - lse[:, None]))
    return Gmm(len(weights), weights, means, covs, ll, len(trace) - 1, trace)


def fit_gmm(samples, k, seed=0, tol=1e-6, max_iter=200, restarts=4) -> Gmm:
    """Fit a ``k``-component (1 or 2) full-covariance Gaussian mixture.

    k=1 is the closed-form MLE.  k=2 runs EM from ``restarts`` k-means++
    seedings plus one principal-axis split of the single Gaussian and keeps
    the best by log-likelihood.  EM stops when the mean per-sample
    log-likelihood gain falls below ``tol`` or after ``max_iter`` iterations.
    """
    x = _canonical(samples)
    if k == 1:
        mean = x.mean(axis=0)
        d = x - mean
        cov = _floor_cov(d.T @ d / len(x))
        ll = float(_component_logpdf(x, mean, cov).sum())
        return Gmm(1, np.ones(1), mean[None], cov[None], ll, 1, [ll])
    if k != 2:
        raise ParameterError("only k=1 and k=2 mixtures are supported")
    rng = np.random.default_rng([seed, 5])
    inits = [_kmeanspp_resp(x, 2, rng) for _ in range(restarts)] + [_split_resp(x)]
    best = None
    for resp in inits:
        try:
            g = _em(x, resp, tol, max_iter)
        except NumericError:
            continue
        if best is None or g.log_likelihood > best.log_likelihood:
            best = g
    if best is None:
        raise NumericError("all EM restarts failed")
    return best


def n_free_params(k: int, dim: int = 5) -> int:
    return k * (dim + dim * (dim + 1) // 2) + (k - 1)


def aic(g: Gmm, n: int | None = None) -> float:
    """Akaike information criterion, 2p - 2 log L.

    ``n`` is accepted for interface symmetry; AIC does not depend on it.
    """
    dim = g.means.shape[1]
    return 2.0 * n_free_params(g.k, dim) - 2.0 * g.log_likelihood


def is_multimodal(aic1: float, aic2: float, threshold: float) -> bool:
    return bool(aic2 < aic1 - threshold)


@dataclass
class ModeReport:
    label: str
    aic1: float
    aic2: float
    threshold: float
    mode_poses: list
    mode_weights: list
    mode_vectors: np.ndarray
    single_pose: Pose
    single_vector: np.ndarray

    @property
    def multimodal(self) -> bool:
        return self.label == "multi-modal"

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "aic1": self.aic1,
            "aic2": self.aic2,
            "threshold": self.threshold,
            "mode_poses": [p.to_dict() for p in self.mode_poses],
            "mode_weights": list(self.mode_weights),
            "single_pose": self.single_pose.to_dict(),
        }


def detect_modes(samples, threshold=DEFAULT_THRESHOLD, seed=0) -> ModeReport:
    x = _canonical(samples)
    g1 = fit_gmm(x, 1, seed)
    g2 = fit_gmm(x, 2, seed)
    a1, a2 = aic(g1, len(x)), aic(g2, len(x))
    single = g1.means[0]
    if is_multimodal(a1, a2, threshold):
        order = np.argsort(-g2.weights, kind="stable")
        vecs = g2.means[order]
        weights = g2.weights[order].tolist()
        label = "multi-modal"
    else:
        vecs = g1.means.copy()
        weights = [1.0]
        label = "uni-modal"
    return ModeReport(
        label=label,
        aic1=a1,
        aic2=a2,
        threshold=float(threshold),
        mode_poses=[vector_pose(v) for v in vecs],
        mode_weights=weights,
        mode_vectors=vecs,
        single_pose=vector_pose(single),
        single_vector=single,
    )
