"""Regression of simplex weights on study-level covariates.

Two models map covariates ``W`` to mixing weights: Dirichlet regression with
log-linear concentrations, and per-coordinate ridge regression of log-ratios
against the first component.  Covariates pass through an explicit
:class:`FeatureMap` (identity or polynomial, standardized, with intercept).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from .weight_estimation import SimplexWeights

log = logging.getLogger(__name__)

PI_FLOOR = 1e-6
ALPHA_FLOOR = 1e-8
ALPHA_CAP = 1e8
MAX_ITER = 5000
BACKTRACK = 0.5
INITIAL_STEP = 1.0


class FitError(RuntimeError):
    pass


@dataclass
class FeatureMap:
    kind: str = "identity"
    degree: int = 1
    intercept: bool = True
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "polynomial"):
            raise ValueError(f"unknown feature map kind {self.kind!r}")
        if self.kind == "identity":
            self.degree = 1
        if self.degree < 1:
            raise ValueError("polynomial degree must be >= 1")

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def fit(self, W) -> "FeatureMap":
        W = _as_design(W)
        mean = W.mean(axis=0)
        scale = W.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return FeatureMap(self.kind, self.degree, self.intercept, mean, scale)

    def standardize(self, W) -> np.ndarray:
        W = _as_design(W)
        if W.shape[1] != self.mean.shape[0]:
            raise ValueError(
                f"covariate dimension {W.shape[1]} does not match training dimension "
                f"{self.mean.shape[0]}")
        return (W - self.mean) / self.scale

    def destandardize(self, Z) -> np.ndarray:
        return np.asarray(Z) * self.scale + self.mean

    def transform(self, W) -> np.ndarray:
        Z = self.standardize(W)
        cols = [Z]
        if self.kind == "polynomial":
            p = Z.shape[1]
            for d in range(2, self.degree + 1):
                for combo in combinations_with_replacement(range(p), d):
                    cols.append(np.prod(Z[:, combo], axis=1, keepdims=True))
        X = np.hstack(cols)
        if self.intercept:
            X = np.hstack([np.ones((X.shape[0], 1)), X])
        return X

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "degree": self.degree, "intercept": self.intercept,
            "mean": None if self.mean is None else self.mean.tolist(),
            "scale": None if self.scale is None else self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMap":
        arr = lambda v: None if v is None else np.asarray(v, dtype=float)
        return cls(d["kind"], d["degree"], d["intercept"], arr(d["mean"]), arr(d["scale"]))


def _as_design(W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[None, :]
    return W


def _pi_matrix(pi_hat) -> np.ndarray:
    if isinstance(pi_hat, (list, tuple)) and pi_hat and isinstance(pi_hat[0], SimplexWeights):
        return np.vstack([p.w for p in pi_hat])
    return np.atleast_2d(np.asarray(pi_hat, dtype=float))


def clamp_weights(P: np.ndarray, floor: float = PI_FLOOR) -> np.ndarray:
    P = np.maximum(np.asarray(P, dtype=float), floor)
    return P / P.sum(axis=1, keepdims=True)


@dataclass
class DirichletRegParams:
    coef: np.ndarray            # (K, p')
    feature_map: FeatureMap
    alpha_floor: float = ALPHA_FLOOR
    alpha_cap: float = ALPHA_CAP
    loglik: float = float("nan")
    n_iter: int = 0
    converged: bool = False
    history: list = field(default_factory=list, repr=False)

    kind = "dirichlet"

    @property
    def K(self) -> int:
        return self.coef.shape[0]

    def alpha(self, W) -> np.ndarray:
        X = self.feature_map.transform(W)
        return np.exp(np.clip(X @ self.coef.T, np.log(self.alpha_floor), np.log(self.alpha_cap)))

    def to_dict(self) -> dict:
        return {"kind": "dirichlet", "coef": self.coef.tolist(),
                "feature_map": self.feature_map.to_dict(),
                "alpha_floor": self.alpha_floor, "alpha_cap": self.alpha_cap,
                "loglik": self.loglik, "n_iter": self.n_iter, "converged": self.converged}


@dataclass
class LogRatioRegParams:
    coef: np.ndarray            # (K-1, p'), rows for components 2..K
    ridge_lambda: float
    feature_map: FeatureMap

    kind = "logratio"

    @property
    def K(self) -> int:
        return self.coef.shape[0] + 1

    def to_dict(self) -> dict:
        return {"kind": "logratio", "coef": self.coef.tolist(),
                "ridge_lambda": self.ridge_lambda,
                "feature_map": self.feature_map.to_dict()}


def params_from_dict(d: dict):
    fmap = FeatureMap.from_dict(d["feature_map"])
    if d["kind"] == "dirichlet":
        return DirichletRegParams(np.asarray(d["coef"], dtype=float), fmap,
                                  d["alpha_floor"], d["alpha_cap"], d.get("loglik", float("nan")),
                                  d.get("n_iter", 0), d.get("converged", False))
    if d["kind"] == "logratio":
        return LogRatioRegParams(np.asarray(d["coef"], dtype=float), d["ridge_lambda"], fmap)
    raise ValueError(f"unknown weight model kind {d['kind']!r}")


def dirichlet_loglik(coef, X, logP, lo=np.log(ALPHA_FLOOR), hi=np.log(ALPHA_CAP)):
    """Dirichlet log-likelihood and its gradient with respect to ``coef`` (K, p)."""
    eta = X @ coef.T
    inside = (eta > lo) & (eta < hi)
    A = np.exp(np.clip(eta, lo, hi))
    S = A.sum(axis=1)
    ll = float(np.sum(gammaln(S)) - np.sum(gammaln(A)) + np.sum((A - 1.0) * logP))
    dA = (digamma(S)[:, None] - digamma(A) + logP) * A * inside
    return ll, dA.T @ X


def _initial_coef(X, P, intercept: bool) -> np.ndarray:
    K = P.shape[1]
    coef = np.zeros((K, X.shape[1]))
    mean = P.mean(axis=0)
    var = P.var(axis=0)
    ok = var > 1e-12
    prec = np.median(mean[ok] * (1 - mean[ok]) / var[ok] - 1.0) if ok.any() else 10.0
    prec = float(np.clip(prec, 1.0, 1e4))
    if intercept:
        coef[:, 0] = np.log(mean * prec)
    return coef


def _fisher_direction(coef, X, g, lo=np.log(ALPHA_FLOOR), hi=np.log(ALPHA_CAP)):
    """Gradient preconditioned by the expected information; falls back to ``g``.

    Per study the information in ``eta = log alpha`` is
    ``A (diag(psi'(a)) - psi'(S) 11') A`` with ``A = diag(a)``.
    """
    K, p = coef.shape
    eta = X @ coef.T
    inside = (eta > lo) & (eta < hi)
    A = np.exp(np.clip(eta, lo, hi)) * inside
    S = np.exp(np.clip(eta, lo, hi)).sum(axis=1)
    t1 = polygamma(1, np.exp(np.clip(eta, lo, hi)))
    tS = polygamma(1, S)
    # H[(k,a),(l,b)] = sum_i [A_ik^2 t1_ik d_kl - A_ik A_il tS_i] X_ia X_ib
    D = np.einsum("ik,ia,ib->kab", A * A * t1, X, X)
    C = np.einsum("ik,il,i,ia,ib->kalb", A, A, tS, X, X)
    H = -C
    for k in range(K):
        H[k, :, k, :] += D[k]
    H = H.reshape(K * p, K * p)
    H = 0.5 * (H + H.T)
    H += (1e-10 * max(np.trace(H), 1.0) / (K * p)) * np.eye(K * p)
    try:
        d = np.linalg.solve(H, g.ravel()).reshape(K, p)
    except np.linalg.LinAlgError:
        return g
    if not np.all(np.isfinite(d)) or float(np.sum(d * g)) <= 0:
        return g
    return d


def fit_dirichlet(W, pi_hat, feature_map: FeatureMap | None = None,
                  max_iter: int = MAX_ITER, tol: float = 1e-6) -> DirichletRegParams:
    """Maximum-likelihood Dirichlet regression by monotone gradient ascent.

    The ascent direction is the gradient preconditioned by the expected
    information (Fisher scoring), which copes with concentrations spanning
    many orders of magnitude.  Steps start at ``INITIAL_STEP`` and are halved
    until the Armijo condition holds, so the log-likelihood never decreases.
    Stops when ``||grad|| <= tol (1 + |loglik|)``.
    """
    fmap = (feature_map or FeatureMap()).fit(W)
    X = fmap.transform(W)
    P = clamp_weights(_pi_matrix(pi_hat))
    m, K = P.shape
    if X.shape[0] != m:
        raise ValueError(f"{X.shape[0]} covariate rows for {m} weight vectors")
    if m < K:
        raise ValueError(f"need at least K={K} studies, got {m}")
    logP = np.log(P)
    coef = _initial_coef(X, P, fmap.intercept)
    ll, g = dirichlet_loglik(coef, X, logP)
    if not np.isfinite(ll):
        raise FitError("non-finite Dirichlet log-likelihood at the starting point")
    history = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol * (1.0 + abs(ll)):
            converged = True
            it -= 1
            break
        d = _fisher_direction(coef, X, g)
        slope = float(np.sum(d * g))
        t = INITIAL_STEP
        while True:
            cand = coef + t * d
            ll_new, g_new = dirichlet_loglik(cand, X, logP)
            if np.isfinite(ll_new) and ll_new >= ll + 1e-4 * t * slope:
                break
            t *= BACKTRACK
            if t < 1e-20:
                break
        if t < 1e-20:
            # no ascent left at machine precision
            converged = gnorm <= 1e-3 * (1.0 + abs(ll))
            break
        coef, ll, g = cand, ll_new, g_new
        history.append(ll)
    if not np.isfinite(ll):
        raise FitError("Dirichlet log-likelihood became non-finite")
    if not converged:
        log.info("Dirichlet fit stopped after %d iterations, |grad|=%.3g",
                 it, float(np.linalg.norm(g)))
    return DirichletRegParams(coef, fmap, loglik=ll, n_iter=it, converged=converged,
                              history=history)


def fit_logratio(W, pi_hat, feature_map: FeatureMap | None = None,
                 ridge_lambda: float = 0.0) -> LogRatioRegParams:
    """Ridge regression of ``log(pi_k / pi_1)`` on the features, k = 2..K.

    The intercept is not penalized.
    """
    fmap = (feature_map or FeatureMap()).fit(W)
    X = fmap.transform(W)
    P = clamp_weights(_pi_matrix(pi_hat))
    if X.shape[0] != P.shape[0]:
        raise ValueError(f"{X.shape[0]} covariate rows for {P.shape[0]} weight vectors")
    eta = np.log(P[:, 1:]) - np.log(P[:, :1])
    pen = np.full(X.shape[1], float(ridge_lambda))
    if fmap.intercept:
        pen[0] = 0.0
    A = X.T @ X + np.diag(pen)
    try:
        coef = np.linalg.solve(A, X.T @ eta).T
    except np.linalg.LinAlgError as exc:
        raise FitError(f"singular log-ratio design: {exc}") from exc
    if not np.all(np.isfinite(coef)):
        raise FitError("log-ratio coefficients are not finite")
    return LogRatioRegParams(coef, float(ridge_lambda), fmap)


def predict_weight_matrix(params, W0) -> np.ndarray:
    """Predicted simplex weights, one row per covariate vector."""
    W0 = _as_design(W0)
    if params.kind == "dirichlet":
        A = params.alpha(W0)
        P = A / A.sum(axis=1, keepdims=True)
    else:
        X = params.feature_map.transform(W0)
        eta = np.hstack([np.zeros((X.shape[0], 1)), X @ params.coef.T])
        eta -= eta.max(axis=1, keepdims=True)
        E = np.exp(eta)
        P = E / E.sum(axis=1, keepdims=True)
    return P / P.sum(axis=1, keepdims=True)


def predict_weights(params, W0) -> SimplexWeights:
    W0 = np.asarray(W0, dtype=float)
    if W0.ndim != 1:
        raise ValueError("predict_weights takes one covariate vector")
    return SimplexWeights(predict_weight_matrix(params, W0)[0])


def fit_weight_model(W, pi_hat, kind: str = "dirichlet", feature_map: FeatureMap | None = None,
                     ridge_lambda: float = 0.0):
    if kind == "dirichlet":
        return fit_dirichlet(W, pi_hat, feature_map)
    if kind == "logratio":
        return fit_logratio(W, pi_hat, feature_map, ridge_lambda)
    raise ValueError(f"unknown weight model {kind!r}")
