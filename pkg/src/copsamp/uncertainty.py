"""Per-sample uncertainty scores, exact and ensemble-based.

Exact scores are trace quantities under the inverse Fisher information:
``Tr((psi kron xx^T) M^-1)`` when the label is known (coreset selection)
and ``Tr((phi kron xx^T) M^-1)`` when it is not (active learning). Both
reduce to quadratic forms and are evaluated through a Cholesky
factorization of the ridge-stabilized information matrix.

Ensemble scores avoid the ``(K*d, K*d)`` inverse entirely: fit M probe
models, form the sample covariance of their logit vectors at ``x``, and
take the same traces against that ``(K, K)`` covariance at the ensemble
mean. Scaled by the per-member training size n', the ensemble scores
converge to the exact ones.

Scoring is pure and thread-safe; ensemble members can be trained
concurrently since they share nothing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal
import warnings

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from copsamp.model import (
    Coefficients,
    Dataset,
    FisherInfo,
    phi,
    phi_matrices,
    probability_matrix,
    score_vector,
)
from copsamp.solver import FitConfig, fit_mle

__all__ = [
    "ProbeEnsemble",
    "SingularInformationError",
    "train_ensemble",
    "logit_covariance",
    "ensemble_score_coreset",
    "ensemble_score_active",
    "ensemble_scores",
    "exact_score_coreset",
    "exact_score_active",
    "exact_scores",
]

EnsembleMode = Literal["independent_splits", "bootstrap"]


class SingularInformationError(RuntimeError):
    """Fisher information could not be factorized even after the ridge."""


@dataclass
class ProbeEnsemble:
    """M probe-model coefficient matrices plus their arithmetic mean.

    ``probe_size`` is the per-member training-set size n', the scale
    factor linking ensemble scores to exact ones.
    """

    members: np.ndarray
    mean: Coefficients
    probe_size: int
    mode: str

    def __post_init__(self) -> None:
        self.members = np.asarray(self.members, dtype=float)
        if self.members.ndim != 3 or self.members.shape[0] < 2:
            raise ValueError("members must be (M, K, d) with M >= 2")
        self.mean = np.asarray(self.mean, dtype=float)
        if self.mean.shape != self.members.shape[1:]:
            raise ValueError("mean shape does not match members")

    @property
    def M(self) -> int:
        return self.members.shape[0]

    @property
    def K(self) -> int:
        return self.members.shape[1]

    @property
    def d(self) -> int:
        return self.members.shape[2]


def shard_indices(n: int, M: int, seed: int) -> list[np.ndarray]:
    """M disjoint equal shards of ``range(n)``, shuffled by ``seed``.

    Shards have ``n // M`` rows each; any remainder rows are unused so
    every member trains on the same amount of data.
    """
    shard_size = n // M
    perm = np.random.default_rng(seed).permutation(n)
    return [perm[m * shard_size : (m + 1) * shard_size] for m in range(M)]


def train_ensemble(
    probe: Dataset,
    M: int,
    mode: EnsembleMode = "independent_splits",
    seed: int = 0,
    config: FitConfig = FitConfig(),
) -> ProbeEnsemble:
    """Fit M probe models on shards or bootstrap resamples of ``probe``.

    ``independent_splits`` partitions the probe set into M disjoint equal
    shards (shuffled by ``seed``) and fits one member per shard;
    ``bootstrap`` draws M with-replacement resamples of the full probe
    set, member m using seed ``seed + m``.
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    if not probe.labeled:
        raise ValueError("probe data must be labeled")
    if mode == "independent_splits":
        if probe.n // M < probe.K + probe.d:
            raise ValueError(
                f"probe too small: shards of {probe.n // M} rows for K+d="
                f"{probe.K + probe.d}"
            )
        parts = shard_indices(probe.n, M, seed)
        probe_size = probe.n // M
    elif mode == "bootstrap":
        parts = [
            np.random.default_rng(seed + m).integers(0, probe.n, size=probe.n)
            for m in range(M)
        ]
        probe_size = probe.n
    else:
        raise ValueError(f"unknown ensemble mode {mode!r}")

    members = np.empty((M, probe.K, probe.d))
    for m, idx in enumerate(parts):
        report = fit_mle(probe.subset(idx), config)
        if not report.converged:
            warnings.warn(
                f"ensemble member {m} did not converge "
                f"(grad norm {report.final_grad_norm:.3e})",
                RuntimeWarning,
                stacklevel=2,
            )
        members[m] = report.beta
    return ProbeEnsemble(
        members=members,
        mean=members.mean(axis=0),
        probe_size=probe_size,
        mode=mode,
    )


def logit_covariance(ensemble: ProbeEnsemble, x: np.ndarray) -> np.ndarray:
    """Sample covariance of member logit vectors at ``x``, shape (K, K).

    Uses the M-1 divisor and centers on the mean model's logits.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (ensemble.d,):
        raise ValueError(f"x has shape {x.shape}, expected ({ensemble.d},)")
    if ensemble.M < 2:
        raise ValueError("need at least 2 members")
    Z = ensemble.members @ x
    # the mean model's logits equal the mean of member logits; centering on
    # the computed logit mean keeps identical members at (near) zero
    dev = Z - Z.mean(axis=0)
    dev = _strip_roundoff(dev, Z, axis=0)
    sigma = dev.T @ dev / (ensemble.M - 1)
    return 0.5 * (sigma + sigma.T)


def _clamp(u: np.ndarray | float) -> np.ndarray | float:
    """Zero out round-off negatives of PSD quadratic forms."""
    return np.maximum(u, 0.0)


def _strip_roundoff(dev: np.ndarray, Z: np.ndarray, axis: int) -> np.ndarray:
    """Zero logit deviations within a few ulps of the logit magnitude.

    A spread that small is indistinguishable from identical members
    (the mean of M identical logits need not be bit-exact), and its
    squared contribution to the covariance is pure rounding noise.
    """
    tol = 8 * np.finfo(float).eps * np.abs(Z).max(axis=axis, keepdims=True)
    return np.where(np.abs(dev) <= tol, 0.0, dev)


def ensemble_score_coreset(ensemble: ProbeEnsemble, x: np.ndarray, y: int) -> float:
    """``s^T Sigma_M(x) s`` with the score vector at the ensemble mean."""
    s = score_vector(ensemble.mean, x, y)
    sigma = logit_covariance(ensemble, x)
    return float(_clamp(s @ sigma @ s))


def ensemble_score_active(ensemble: ProbeEnsemble, x: np.ndarray) -> float:
    """``Tr(phi(mean; x) Sigma_M(x))``, the label-averaged coreset score."""
    sigma = logit_covariance(ensemble, x)
    return float(_clamp(np.sum(phi(ensemble.mean, x) * sigma)))


def ensemble_scores(
    ensemble: ProbeEnsemble,
    data: Dataset,
    kind: Literal["coreset", "active"],
) -> np.ndarray:
    """Vectorized ensemble scores over every row of ``data``."""
    X = data.X
    if data.d != ensemble.d:
        raise ValueError(f"data dimension {data.d} != ensemble dimension {ensemble.d}")
    Z = np.einsum("nd,mkd->nmk", X, ensemble.members)
    dev = _strip_roundoff(Z - Z.mean(axis=1, keepdims=True), Z, axis=1)
    sigma = np.einsum("nmk,nml->nkl", dev, dev) / (ensemble.M - 1)
    if kind == "coreset":
        if not data.labeled:
            raise ValueError("coreset scoring needs labels")
        S = -probability_matrix(ensemble.mean, X)[:, 1:]
        rows = np.arange(data.n)
        labeled = data.y >= 1
        S[rows[labeled], data.y[labeled] - 1] += 1.0
        u = np.einsum("nk,nkl,nl->n", S, sigma, S)
    elif kind == "active":
        PHI = phi_matrices(ensemble.mean, X)
        u = np.einsum("nkl,nkl->n", PHI, sigma)
    else:
        raise ValueError(f"unknown score kind {kind!r}")
    return _clamp(u)


def _default_ridge(info: FisherInfo) -> float:
    Kd = info.m.shape[0]
    return 1e-10 * float(np.trace(info.m)) / Kd


def _factorize(info: FisherInfo, ridge: float | None):
    if ridge is None:
        ridge = _default_ridge(info)
    try:
        return cho_factor(info.m + ridge * np.eye(info.m.shape[0]))
    except LinAlgError as err:
        raise SingularInformationError(
            f"information matrix not positive definite with ridge {ridge:.3e}"
        ) from err


def exact_score_coreset(
    beta: Coefficients,
    info: FisherInfo,
    x: np.ndarray,
    y: int,
    ridge: float | None = None,
) -> float:
    """``Tr((psi kron xx^T) M^-1)`` as the quadratic form of ``kron(s, x)``.

    ``ridge`` defaults to ``1e-10 * Tr(M) / (K*d)``.
    """
    factor = _factorize(info, ridge)
    g = np.kron(score_vector(beta, x, y), np.asarray(x, dtype=float))
    if g.shape[0] != info.m.shape[0]:
        raise ValueError("beta/x dimensions do not match the information matrix")
    return float(_clamp(g @ cho_solve(factor, g)))


def exact_score_active(
    beta: Coefficients,
    info: FisherInfo,
    x: np.ndarray,
    ridge: float | None = None,
) -> float:
    """``Tr((phi kron xx^T) M^-1)`` via the eigendecomposition of phi."""
    factor = _factorize(info, ridge)
    x = np.asarray(x, dtype=float)
    eigvals, eigvecs = np.linalg.eigh(phi(beta, x))
    u = 0.0
    for lam, v in zip(eigvals, eigvecs.T):
        if lam <= 0:
            continue
        g = np.kron(v, x)
        u += lam * float(g @ cho_solve(factor, g))
    return float(_clamp(u))


def exact_scores(
    beta: Coefficients,
    info: FisherInfo,
    data: Dataset,
    kind: Literal["coreset", "active"],
    ridge: float | None = None,
) -> np.ndarray:
    """Vectorized exact scores over every row of ``data``.

    Shares one factorization of the ridged information matrix across all
    rows; agrees with the per-sample functions to round-off.
    """
    factor = _factorize(info, ridge)
    X = data.X
    n, d = X.shape
    K = data.K
    if K * d != info.m.shape[0]:
        raise ValueError("data dimensions do not match the information matrix")
    if kind == "coreset":
        if not data.labeled:
            raise ValueError("coreset scoring needs labels")
        S = -probability_matrix(beta, X)[:, 1:]
        rows = np.arange(n)
        labeled = data.y >= 1
        S[rows[labeled], data.y[labeled] - 1] += 1.0
        G = np.einsum("nk,nd->nkd", S, X).reshape(n, K * d)
        sol = cho_solve(factor, G.T)
        return _clamp(np.einsum("nq,qn->n", G, sol))
    if kind == "active":
        eigvals, eigvecs = np.linalg.eigh(phi_matrices(beta, X))
        # rows of G: kron(v_j, x) for each eigenvector j of each sample
        G = np.einsum("nkj,nd->njkd", eigvecs, X).reshape(n * K, K * d)
        sol = cho_solve(factor, G.T)
        quads = np.einsum("nq,qn->n", G, sol).reshape(n, K)
        return _clamp(np.sum(np.maximum(eigvals, 0.0) * quads, axis=1))
    raise ValueError(f"unknown score kind {kind!r}")
