"""Two-layer hierarchical simulator and Monte Carlo experiments.

Studies draw covariates ``W ~ N(0, I_3)``, concentrations
``alpha = 20 exp((1, W)' beta)``, weights ``pi ~ Dirichlet(alpha)`` and the
oracle function ``sum_k pi_k g_k``.  Individuals draw ``X ~ N(0, 5^2)`` and
``Y | X ~ N(f(X), 5^2)``.  Each study's function is then estimated from its
individuals by a Nadaraya-Watson smoother.

Randomness comes from ``numpy.random.SeedSequence`` children: one stream for
the grid, one per study, one per experiment replicate, so results do not
depend on execution order.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .function_space import EvalGrid, FuncSample, l2_norm
from .pipeline import PipelineConfig, StudyRecord, fit_pipeline, fit_pipeline_path
from .weight_estimation import SimplexWeights

log = logging.getLogger(__name__)

DEFAULT_BETA = np.array([
    [1.0, -1.0, -1.0, 1.0],
    [2.0, 1.0, -1.0, -1.0],
    [0.0, 4.0, 0.0, 0.0],
    [1.0, 0.0, -3.0, 0.0],
])

BASIS_FORMULAS = ("-2x+3", "x^2/4", "10 sin(x/3)", "-2|x+4|")


def paper_basis(x) -> np.ndarray:
    """The four closed-form bases evaluated at ``x``; shape (4, len(x))."""
    x = np.asarray(x, dtype=float)
    return np.vstack([
        -2.0 * x + 3.0,
        x ** 2 / 4.0,
        10.0 * np.sin(x / 3.0),
        -2.0 * np.abs(x + 4.0),
    ])


@dataclass(frozen=True)
class GenerativeConfig:
    m: int = 100
    n_per_study: int = 200
    beta: np.ndarray = field(default_factory=lambda: DEFAULT_BETA.copy())
    w_dim: int = 3
    x_sd: float = 5.0
    noise_sd: float = 5.0
    dirichlet_scale: float = 20.0
    seed: int = 0

    @property
    def K(self) -> int:
        return self.beta.shape[1]

    def alpha(self, W) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=float))
        Z = np.hstack([np.ones((W.shape[0], 1)), W])
        return self.dirichlet_scale * np.exp(Z @ self.beta)

    def to_dict(self) -> dict:
        return {"m": self.m, "n_per_study": self.n_per_study, "beta": self.beta.tolist(),
                "w_dim": self.w_dim, "x_sd": self.x_sd, "noise_sd": self.noise_sd,
                "dirichlet_scale": self.dirichlet_scale, "seed": self.seed,
                "bases": list(BASIS_FORMULAS)}


def paper_defaults(seed: int = 0) -> GenerativeConfig:
    return GenerativeConfig(seed=seed)


def sample_dirichlet(alpha, rng: np.random.Generator) -> SimplexWeights:
    """Normalized independent Gamma(alpha_k, 1) draws."""
    return SimplexWeights(_dirichlet_rows(np.atleast_2d(alpha), rng)[0])


def _dirichlet_rows(A: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if np.any(A <= 0):
        raise ValueError("Dirichlet parameters must be positive")
    G = rng.standard_gamma(A)
    # tiny alphas can underflow every coordinate
    bad = G.sum(axis=1) <= 0
    if np.any(bad):
        G[bad] = 0.0
        G[bad, np.argmax(A[bad], axis=1)] = 1.0
    return G / G.sum(axis=1, keepdims=True)


def nw_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    return 1.06 * float(np.std(x, ddof=1)) * len(x) ** (-0.2)


def estimate_study_function(individuals, grid: EvalGrid, bandwidth: float | None = None
                            ) -> FuncSample:
    """Nadaraya-Watson estimate with a Gaussian kernel evaluated on the grid.

    Grid points more than three bandwidths from every observation take the
    response of the nearest observation.
    """
    x, y = _xy(individuals)
    if len(x) < 10:
        raise ValueError("need at least 10 individuals to smooth")
    return FuncSample(_nw(x, y, grid.x, bandwidth), grid)


def _xy(individuals):
    if isinstance(individuals, tuple) and len(individuals) == 2:
        x, y = individuals
    else:
        arr = np.asarray(individuals, dtype=float)
        x, y = arr[:, 0], arr[:, 1]
    return np.asarray(x, dtype=float), np.asarray(y, dtype=float)


def _nw(x, y, grid_x, bandwidth=None) -> np.ndarray:
    h = nw_bandwidth(x) if bandwidth is None else float(bandwidth)
    U = (grid_x[:, None] - x[None, :]) / h
    K = np.exp(-0.5 * U * U)
    s = K.sum(axis=1)
    far = np.abs(U).min(axis=1) > 3.0
    out = np.empty(len(grid_x))
    ok = ~far
    out[ok] = (K[ok] @ y) / s[ok]
    if np.any(far):
        out[far] = y[np.abs(U[far]).argmin(axis=1)]
    return out


@dataclass
class SimulatedStudy:
    W: np.ndarray
    pi_true: np.ndarray
    f_true: FuncSample
    f_hat: FuncSample
    x: np.ndarray = field(repr=False, default=None)
    y: np.ndarray = field(repr=False, default=None)

    @property
    def individuals(self):
        return np.column_stack([self.x, self.y])

    def record(self, i: int) -> StudyRecord:
        return StudyRecord(self.W, self.f_hat, id=f"study-{i}", f_true=self.f_true,
                           pi_true=self.pi_true)


@dataclass
class SimulatedData:
    grid: EvalGrid
    studies: list
    config: GenerativeConfig
    basis: np.ndarray           # true bases on the grid, (K, G)

    @property
    def W(self) -> np.ndarray:
        return np.vstack([s.W for s in self.studies])

    @property
    def F_hat(self) -> np.ndarray:
        return np.vstack([s.f_hat.values for s in self.studies])

    @property
    def F_true(self) -> np.ndarray:
        return np.vstack([s.f_true.values for s in self.studies])

    @property
    def pi(self) -> np.ndarray:
        return np.vstack([s.pi_true for s in self.studies])

    def records(self) -> list:
        return [s.record(i) for i, s in enumerate(self.studies)]


def make_grid(config: GenerativeConfig, grid_size: int, rng: np.random.Generator) -> EvalGrid:
    return EvalGrid.uniform(rng.normal(0.0, config.x_sd, size=grid_size))


def generate(config: GenerativeConfig, grid_size: int = 1000, estimator=None) -> SimulatedData:
    """Simulate ``config.m`` studies and estimate their functions on a fresh grid.

    ``estimator(x, y, grid_x) -> values`` replaces the kernel smoother when given.
    """
    root = np.random.SeedSequence(config.seed)
    grid_ss, study_ss = root.spawn(2)
    grid = make_grid(config, grid_size, np.random.default_rng(grid_ss))
    G = paper_basis(grid.x)
    est = estimator or _nw
    studies = []
    for ss in study_ss.spawn(config.m):
        rng = np.random.default_rng(ss)
        W = rng.standard_normal(config.w_dim)
        pi = _dirichlet_rows(config.alpha(W), rng)[0]
        x = rng.normal(0.0, config.x_sd, size=config.n_per_study)
        fx = pi @ paper_basis(x)
        y = fx + rng.normal(0.0, config.noise_sd, size=config.n_per_study)
        f_true = FuncSample(pi @ G, grid)
        f_hat = FuncSample(est(x, y, grid.x), grid)
        studies.append(SimulatedStudy(W, pi, f_true, f_hat, x, y))
    return SimulatedData(grid, studies, config, G)


def draw_targets(config: GenerativeConfig, n: int, rng: np.random.Generator, basis: np.ndarray):
    """Fresh target covariates, weights and oracle functions."""
    W0 = rng.standard_normal((n, config.w_dim))
    P0 = _dirichlet_rows(config.alpha(W0), rng)
    return W0, P0, P0 @ basis


def mean_weights_mc(config: GenerativeConfig, W0, draws: int, rng) -> np.ndarray:
    """Monte Carlo estimate of E[pi | W = W0]."""
    A = np.repeat(config.alpha(W0), draws, axis=0)
    return _dirichlet_rows(A, rng).mean(axis=0)


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("METAHUNT_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items) -> list:
    """Map preserving input order; threads capped by METAHUNT_THREADS."""
    items = list(items)
    k = n_threads()
    if k == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=k) as ex:
        return list(ex.map(fn, items))


def replicate_seeds(seed: int, runs: int) -> list:
    """Independent integer seeds for ``runs`` replicates."""
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(runs)]


# ----------------------------------------------------------------- experiments

def run_k_selection(config: GenerativeConfig, k_candidates=range(2, 9), runs: int = 50,
                    folds: int = 5, grid_size: int = 1000, seed: int = 0,
                    pipeline_config: PipelineConfig | None = None) -> list:
    """Elbow- and CV-selected K per replicate."""
    from .weight_estimation import choose_elbow, cv_select_k, reconstruction_error
    from .basis_hunting import dfspa, fspa

    ks = sorted(int(k) for k in k_candidates)
    kmax = max(ks)
    cfg = pipeline_config or PipelineConfig()

    def one(rep):
        r, s = rep
        data = generate(replace(config, seed=s), grid_size)
        F, W, grid = data.F_hat, data.W, data.grid
        rows = {}
        for label, denoise in (("dfspa", True), ("fspa", False)):
            c = replace(cfg, denoise=denoise)
            dp = c.denoise_params(F, grid)
            full = dfspa(F, kmax, dp, grid) if denoise else fspa(F, kmax, grid)
            recon = [reconstruction_error(F, full.values[:k], grid) for k in range(1, kmax + 1)]
            rows[label] = recon
        elbow_k = choose_elbow(rows["dfspa"])
        rep_cv = cv_select_k((W, F), grid, ks, folds, cfg, seed=s)
        return {"run": r, "seed": s, "elbow_k": elbow_k, "cv_k": rep_cv.chosen_k,
                "recon_dfspa": rows["dfspa"], "recon_fspa": rows["fspa"],
                "cv_errors": rep_cv.cv_errors}

    return parallel_map(one, enumerate(replicate_seeds(seed, runs)))


def k_selection_rows(results, k_candidates) -> list:
    """CSV rows: per-K mean reconstruction and CV error plus selection counts."""
    ks = sorted(int(k) for k in k_candidates)
    rows = []
    for j, k in enumerate(ks):
        rows.append({
            "k": k,
            "recon_error": float(np.mean([r["recon_dfspa"][k - 1] for r in results])),
            "recon_error_fspa": float(np.mean([r["recon_fspa"][k - 1] for r in results])),
            "cv_error": float(np.mean([r["cv_errors"][j] for r in results])),
            "cv_selected": sum(r["cv_k"] == k for r in results),
            "elbow_selected": sum(r["elbow_k"] == k for r in results),
        })
    return rows


def run_mse_experiment(config: GenerativeConfig, m_values=(50, 100, 200, 400),
                       k_values=(2, 4, 6, 8), runs: int = 50, targets: int = 100,
                       grid_size: int = 1000, seed: int = 0,
                       pipeline_config: PipelineConfig | None = None,
                       delta_schedule: bool = False) -> list:
    """Seed-averaged MSE of the predicted target function for each (m, K).

    ``delta_schedule`` switches on the Delta divisor that grows with m above
    100; with the kernel smoother it prunes every study by m = 200, so it is
    off by default.
    """
    base = replace(pipeline_config or PipelineConfig(), delta_schedule=delta_schedule)
    ks = sorted(int(k) for k in k_values)
    seeds = replicate_seeds(seed, runs)
    jobs = [(m, r, s) for m in m_values for r, s in enumerate(seeds)]

    def one(job):
        m, r, s = job
        data = generate(replace(config, m=m, seed=s), grid_size)
        rng = np.random.default_rng(np.random.SeedSequence([s, 1]))
        W0, _, F0 = draw_targets(config, targets, rng, data.basis)
        pipes = fit_pipeline_path(data.W, data.F_hat, data.grid, ks, base)
        out = {}
        for k in ks:
            err = pipes[k].predict_values(W0) - F0
            out[k] = float(np.mean((err * err) @ data.grid.weights))
        return m, r, out

    results = parallel_map(one, jobs)
    rows = []
    for m in m_values:
        for k in ks:
            vals = [o[k] for (mm, _, o) in results if mm == m]
            rows.append({"m": m, "k": k, "mse": float(np.mean(vals)),
                         "se": float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0,
                         "runs": len(vals)})
    return rows


def run_coverage_experiment(config: GenerativeConfig, alpha: float = 0.05, runs: int = 50,
                            targets_per_run: int = 100, grid_size: int = 1000,
                            split_fraction: float = 0.7, seed: int = 0, oracle: bool = False,
                            pipeline_config: PipelineConfig | None = None, n_bins: int = 20):
    """Split-conformal pointwise coverage of fresh target functions.

    Returns the :func:`evaluate_coverage` report (overall and per
    equal-width x-bin)
    with ``per_run`` coverages added.  With ``oracle`` the study functions fed
    to the pipeline are the true ones.
    """
    from .conformal import Functional, evaluate_coverage, split_conformal_arrays

    cfg = pipeline_config or PipelineConfig()
    seeds = replicate_seeds(seed, runs)

    def one(rep):
        r, s = rep
        data = generate(replace(config, seed=s), grid_size)
        F = data.F_true if oracle else data.F_hat
        rng = np.random.default_rng(np.random.SeedSequence([s, 2]))
        W0, _, F0 = draw_targets(config, targets_per_run, rng, data.basis)
        fn = Functional.pointwise(data.grid)
        center, half = split_conformal_arrays(data.W, F, data.grid, W0, fn, alpha,
                                              split_fraction, s, cfg)
        return data.grid.x, F0, center, half

    out = parallel_map(one, enumerate(seeds))
    xs = np.concatenate([o[0] for o in out])
    truth = np.vstack([o[1] for o in out]).ravel()
    lo_all, hi_all, x_all = [], [], []
    per_run = []
    for x, F0, center, half in out:
        lo = center - half[None, :]
        hi = center + half[None, :]
        lo_all.append(lo.ravel())
        hi_all.append(hi.ravel())
        x_all.append(np.broadcast_to(x, lo.shape).ravel())
        per_run.append(float(np.mean((F0 >= lo) & (F0 <= hi))))
    x_all = np.concatenate(x_all)
    edges = np.linspace(xs.min(), xs.max(), n_bins + 1)
    report = evaluate_coverage(truth, np.concatenate(lo_all), np.concatenate(hi_all),
                               x=x_all, bins=edges)
    report["per_run"] = per_run
    report["alpha"] = alpha
    report["oracle"] = oracle
    return report
