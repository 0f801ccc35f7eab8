"""Convex-hull projection of functions, reconstruction error and choice of K."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .function_space import EvalGrid, as_values, cross_gram, gram_matrix, l2_norm

QP_TOL = 1e-10
QP_MAX_ITER = 10_000
ELBOW_THRESHOLD = 0.05


@dataclass(frozen=True)
class SimplexWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=float).ravel()
        if np.any(w < -1e-12):
            raise ValueError(f"negative simplex weight {w.min()!r}")
        w = np.maximum(w, 0.0)
        s = w.sum()
        if abs(s - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {s!r}, expected 1")
        w = w / s
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    def __len__(self):
        return self.w.shape[0]


@dataclass
class KSelectionReport:
    k_values: list
    reconstruction_errors: list
    chosen_k: int
    method: str
    cv_errors: list | None = None
    extra: dict = field(default_factory=dict)

    def rows(self):
        cv = self.cv_errors or [None] * len(self.k_values)
        return [
            {"k": k, "recon_error": r, "cv_error": c}
            for k, r, c in zip(self.k_values, self.reconstruction_errors, cv)
        ]


def project_to_simplex(V: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``V`` onto the probability simplex.

    Sort-based algorithm: find the threshold ``t`` with ``sum(max(v - t, 0)) = 1``.
    """
    V = np.asarray(V, dtype=float)
    single = V.ndim == 1
    V2 = np.atleast_2d(V)
    n, k = V2.shape
    U = -np.sort(-V2, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    idx = np.arange(1, k + 1)
    cond = U - css / idx > 0
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(n), rho] / (rho + 1)
    out = np.maximum(V2 - theta[:, None], 0.0)
    return out[0] if single else out


def _normalize_rows(W: np.ndarray) -> np.ndarray:
    W = np.where(W < 1e-12, 0.0, W)
    return W / W.sum(axis=1, keepdims=True)


def _support_solve(Gamma, b, w, L, thresh, floor=1e-12):
    """Exact minimiser on the support ``w > floor`` if it passes the KKT test, else None."""
    S = np.nonzero(w > floor)[0]
    if S.size == 0:
        return None
    k = len(S)
    A = np.zeros((k + 1, k + 1))
    A[:k, :k] = Gamma[np.ix_(S, S)]
    A[:k, k] = A[k, :k] = 1.0
    rhs = np.append(b[S], 1.0)
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        return None
    if np.any(sol[:k] < 0) or not np.all(np.isfinite(sol)):
        return None
    out = np.zeros_like(w)
    out[S] = sol[:k]
    g = Gamma @ out - b
    pg = L * np.linalg.norm(out - project_to_simplex(out - g / L))
    return out if pg <= thresh else None


def simplex_qp(Gamma: np.ndarray, B: np.ndarray, tol: float = QP_TOL,
               max_iter: int = QP_MAX_ITER, polish_every: int = 20):
    """Minimise ``w' Gamma w - 2 b' w`` over the simplex for every row ``b`` of B.

    Accelerated projected gradient (FISTA with gradient restart) using step
    ``1/L``, ``L`` the largest eigenvalue of Gamma.  Every ``polish_every``
    iterations the current support is tried as the optimal face: the
    equality-constrained solution there is accepted when it meets the same
    projected-gradient tolerance.  Returns ``(W, n_iter)``.
    """
    Gamma = np.asarray(Gamma, dtype=float)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    m, k = B.shape
    if k == 1:
        return np.ones((m, 1)), 0
    L = float(np.linalg.eigvalsh(Gamma)[-1])
    if L <= 0:
        return np.full((m, k), 1.0 / k), 0
    # warm start at the best vertex
    vert_obj = np.diag(Gamma)[None, :] - 2.0 * B
    W = np.zeros((m, k))
    W[np.arange(m), np.argmin(vert_obj, axis=1)] = 1.0
    Y = W.copy()
    t = np.ones(m)
    active = np.ones(m, dtype=bool)
    thresh = tol * max(1.0, L)
    it = 0
    for it in range(1, max_iter + 1):
        a = np.nonzero(active)[0]
        Ya = Y[a]
        grad = Ya @ Gamma - B[a]
        Wn = project_to_simplex(Ya - grad / L)
        Wold = W[a]
        # restart momentum when it points uphill
        restart = np.einsum("ij,ij->i", grad, Wn - Wold) > 0
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t[a] ** 2))
        mom = ((t[a] - 1.0) / tn)[:, None]
        Yn = Wn + mom * (Wn - Wold)
        Yn[restart] = Wn[restart]
        tn[restart] = 1.0
        W[a] = Wn
        Y[a] = Yn
        t[a] = tn
        # projected-gradient norm at the new iterate
        g2 = Wn @ Gamma - B[a]
        pg = L * np.linalg.norm(Wn - project_to_simplex(Wn - g2 / L), axis=1)
        done = pg <= thresh
        if polish_every and it % polish_every == 0:
            for j in np.nonzero(~done)[0]:
                row = a[j]
                exact = _support_solve(Gamma, B[row], Wn[j], L, thresh)
                if exact is not None:
                    W[row] = exact
                    done[j] = True
        active[a[done]] = False
        if not active.any():
            break
    # finish on the exact face solution wherever it is at least as good
    for row in range(m):
        for floor in (1e-12, 1e-9, 1e-6):
            exact = _support_solve(Gamma, B[row], W[row], L, thresh, floor)
            if exact is not None and \
                    _qp_obj(Gamma, B[row], exact) <= _qp_obj(Gamma, B[row], W[row]):
                W[row] = exact
                break
    return _normalize_rows(W), it


def _qp_obj(Gamma, b, w):
    return float(w @ Gamma @ w - 2.0 * b @ w)


def hull_weights(F, basis, grid: EvalGrid):
    """Simplex weights and residual norms for every row of ``F`` against ``basis``.

    Returns ``(W, residual_norms)`` with ``W`` of shape (m, K).
    """
    Fm = np.atleast_2d(as_values(F, grid))
    S = np.atleast_2d(as_values(_basis_values(basis), grid))
    Gamma = gram_matrix(S, grid)
    B = cross_gram(Fm, S, grid)
    W, _ = simplex_qp(Gamma, B)
    R = Fm - W @ S
    return W, np.atleast_1d(l2_norm(R, grid))


def _basis_values(basis):
    return basis.values if hasattr(basis, "source_indices") else basis


def project_to_hull(f, basis, grid: EvalGrid):
    """Closest point of the basis convex hull to ``f``.

    Returns ``(SimplexWeights, residual_norm)``.
    """
    W, r = hull_weights(np.atleast_2d(as_values(f, grid)), basis, grid)
    return SimplexWeights(W[0]), float(r[0])


def reconstruction_error(functions, basis, grid: EvalGrid) -> float:
    """Mean distance from each function to the hull of ``basis``."""
    _, r = hull_weights(functions, basis, grid)
    return float(np.mean(r))


def choose_elbow(errors, threshold: float = ELBOW_THRESHOLD) -> int:
    """Index-1-based K after which the relative error drop stalls.

    The drop at K is ``(E(K-1) - E(K)) / max(E(1), eps)``; the chosen K is the
    last one before the first drop below ``threshold``.
    """
    e = np.asarray(errors, dtype=float)
    scale = max(e[0], np.finfo(float).tiny)
    for k in range(1, len(e)):
        if (e[k - 1] - e[k]) / scale < threshold:
            return k
    return len(e)


def elbow_curve(functions, grid: EvalGrid, k_max: int, params=None,
                threshold: float = ELBOW_THRESHOLD) -> KSelectionReport:
    """Reconstruction error for K = 1..k_max from a single d-fSPA run."""
    from .basis_hunting import dfspa, default_tuning

    F = np.atleast_2d(as_values(functions, grid))
    if params is None:
        params = default_tuning(F, grid, F.shape[0])
    full = dfspa(F, k_max, params, grid)
    errs = [reconstruction_error(F, full.values[:k], grid) for k in range(1, k_max + 1)]
    return KSelectionReport(
        k_values=list(range(1, k_max + 1)),
        reconstruction_errors=errs,
        chosen_k=choose_elbow(errs, threshold),
        method="elbow",
    )


def cv_select_k(studies, grid: EvalGrid, k_candidates, folds: int = 5,
                pipeline_config=None, seed: int = 0) -> KSelectionReport:
    """Choose K by K-fold cross-validation of the whole prediction pipeline.

    Each held-out study is scored by the L2 distance between its observed
    function and the function predicted from its covariates.
    """
    from .pipeline import PipelineConfig, fit_pipeline_path, study_arrays

    cfg = pipeline_config or PipelineConfig()
    ks = sorted(int(k) for k in k_candidates)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    Wcov, F = study_arrays(studies, grid)
    m = F.shape[0]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(m)
    parts = np.array_split(perm, folds)
    for j, part in enumerate(parts):
        if m - len(part) < ks[-1]:
            raise ValueError(
                f"fold {j} leaves {m - len(part)} training studies, fewer than K={ks[-1]}")
    errs = np.zeros((folds, len(ks)))
    recon = np.zeros((folds, len(ks)))
    for j, test in enumerate(parts):
        train = np.setdiff1d(np.arange(m), test)
        pipes = fit_pipeline_path(Wcov[train], F[train], grid, ks, cfg)
        for c, k in enumerate(ks):
            pred = pipes[k].predict_values(Wcov[test])
            errs[j, c] = float(np.mean(l2_norm(pred - F[test], grid)))
            recon[j, c] = pipes[k].recon_error
    cv = errs.mean(axis=0)
    recon = [float(v) for v in recon.mean(axis=0)]
    chosen = ks[int(np.argmin(cv))]
    return KSelectionReport(k_values=ks, reconstruction_errors=recon,
                            cv_errors=[float(v) for v in cv], chosen_k=chosen,
                            method="cv", extra={"fold_errors": errs})
