"""Standardized linear regression: OLS, ridge, elastic net, PCR and PLSR,
plus seeded k-fold cross-validation scored in cycles.

All fits work on standardized features (training mean removed, divided by the
training standard deviation) with an unpenalized intercept. Coefficients are
reported in standardized-feature space.

Penalty conventions
-------------------
ridge:       ||y - Zb||^2 + lam * ||b||^2
elastic net: ||y - Zb||^2 / (2n) + lam * (alpha * ||b||_1 + (1 - alpha) / 2 * ||b||^2)

so ``fit_elastic_net(alpha=0, lam)`` equals ``fit_ridge(lam * n)``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .evaluation import LOG10_CYCLES, rmse_cycles, to_cycles

FORMAT_VERSION = 1
DEFAULT_LAMBDAS = tuple(np.logspace(-5, 2, 30).tolist())
DEFAULT_ALPHAS = (0.01, 0.1, 0.5, 0.9, 1.0)
MAX_COMPONENTS = 30
ENET_TOL = 1e-7
ENET_MAX_SWEEPS = 10_000
METHODS = ("ols", "ridge", "enet", "pcr", "plsr")


class RankDeficientError(np.linalg.LinAlgError):
    pass


class ConvergenceWarning(UserWarning):
    pass


class DegenerateFeatureWarning(UserWarning):
    pass


@dataclass
class Standardizer:
    means: np.ndarray
    stds: np.ndarray
    keep: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError(f"expected a 2-D feature matrix, got shape {X.shape}")
        means = X.mean(axis=0)
        stds = X.std(axis=0)
        keep = stds > 1e-12 * np.maximum(1.0, np.abs(means))
        if not keep.all():
            warnings.warn(
                f"dropping {int((~keep).sum())} zero-variance feature column(s); their coefficients are 0",
                DegenerateFeatureWarning,
                stacklevel=3,
            )
        return cls(means, stds, keep)

    @property
    def n_features(self) -> int:
        return self.means.size

    def transform(self, X) -> np.ndarray:
        """Standardized kept columns only."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        k = self.keep
        return (X[:, k] - self.means[k]) / self.stds[k]

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist(), "keep": self.keep.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.array(d["means"], float), np.array(d["stds"], float), np.array(d["keep"], bool))


@dataclass
class LinearModel:
    coefficients: np.ndarray
    intercept: float
    standardizer: Standardizer
    target_space: str = LOG10_CYCLES
    method: str = "ols"
    hyperparameters: dict = field(default_factory=dict)
    feature_names: list[str] | None = None
    n_iter: int | None = None

    def predict(self, X) -> np.ndarray:
        Z = self.standardizer.transform(X)
        return self.intercept + Z @ self.coefficients[self.standardizer.keep]

    def predict_cycles(self, X) -> np.ndarray:
        return to_cycles(self.predict(X), self.target_space)

    def contributions(self, X) -> np.ndarray:
        """Element-wise coefficient x standardized feature; rows sum to prediction - intercept."""
        Z = self.standardizer.transform(X)
        out = np.zeros((Z.shape[0], self.coefficients.size))
        out[:, self.standardizer.keep] = Z * self.coefficients[self.standardizer.keep]
        return out

    def to_dict(self) -> dict:
        names = self.feature_names or [f"x{i}" for i in range(self.coefficients.size)]
        return {
            "format_version": FORMAT_VERSION,
            "kind": "linear",
            "method": self.method,
            "target_space": self.target_space,
            "hyperparameters": self.hyperparameters,
            "intercept": float(self.intercept),
            "feature_names": list(names),
            "coefficients": {n: float(c) for n, c in zip(names, self.coefficients)},
            "standardizer": self.standardizer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "LinearModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('format_version')}")
        names = d["feature_names"]
        return cls(
            coefficients=np.array([d["coefficients"][n] for n in names], float),
            intercept=float(d["intercept"]),
            standardizer=Standardizer.from_dict(d["standardizer"]),
            target_space=d["target_space"],
            method=d["method"],
            hyperparameters=d.get("hyperparameters", {}),
            feature_names=list(names),
        )


def save_model(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.to_dict(), indent=1))
    return path


def load_model(path):
    d = json.loads(Path(path).read_text())
    if d.get("kind") == "forest":
        from .forest import Forest

        return Forest.from_dict(d)
    return LinearModel.from_dict(d)


def _prepare(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.size:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.size}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in X or y")
    st = Standardizer.fit(X)
    Z = st.transform(X)
    ybar = float(y.mean())
    return st, Z, y - ybar, ybar


def _expand(st: Standardizer, beta_kept: np.ndarray) -> np.ndarray:
    full = np.zeros(st.n_features)
    full[st.keep] = beta_kept
    return full


def _rank(s: np.ndarray, shape) -> int:
    if s.size == 0 or s[0] == 0:
        return 0
    tol = s[0] * max(shape) * np.finfo(float).eps
    return int((s > tol).sum())


def fit_ols(X, y, target_space: str = LOG10_CYCLES, feature_names=None) -> LinearModel:
    st, Z, yc, ybar = _prepare(X, y)
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    if _rank(s, Z.shape) < Z.shape[1]:
        raise RankDeficientError(
            f"standardized design has rank {_rank(s, Z.shape)} < {Z.shape[1]} features"
        )
    beta = Vt.T @ ((U.T @ yc) / s)
    return LinearModel(_expand(st, beta), ybar, st, target_space, "ols", {}, feature_names)


def fit_ridge(X, y, lam: float, target_space: str = LOG10_CYCLES, feature_names=None) -> LinearModel:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    st, Z, yc, ybar = _prepare(X, y)
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    if lam == 0 and _rank(s, Z.shape) < Z.shape[1]:
        raise RankDeficientError("ridge with lambda=0 on a rank-deficient design")
    beta = Vt.T @ (s / (s * s + lam) * (U.T @ yc))
    return LinearModel(_expand(st, beta), ybar, st, target_space, "ridge", {"lambda": lam}, feature_names)


@numba.njit(cache=True)
def _enet_path(Z, y, alpha, lambdas, tol, max_sweeps, beta0):
    """Cyclic coordinate descent along a lambda path with warm starts.

    A lambda is done when the largest coefficient change in a sweep, or the
    largest KKT violation after it, drops below `tol`. Returns coefficients
    (n_lambda x p), sweeps used and the final convergence measure per lambda.
    """
    n, p = Z.shape
    norms = np.empty(p)
    for j in range(p):
        s = 0.0
        for i in range(n):
            s += Z[i, j] * Z[i, j]
        norms[j] = s / n
    beta = beta0.copy()
    r = y.copy()
    for j in range(p):
        if beta[j] != 0.0:
            for i in range(n):
                r[i] -= Z[i, j] * beta[j]
    nl = lambdas.size
    out = np.empty((nl, p))
    sweeps = np.zeros(nl, dtype=np.int64)
    last = np.zeros(nl)
    for li in range(nl):
        l1 = lambdas[li] * alpha
        l2 = lambdas[li] * (1.0 - alpha)
        maxd = 0.0
        it = 0
        while it < max_sweeps:
            it += 1
            maxd = 0.0
            for j in range(p):
                denom = norms[j] + l2
                bj = beta[j]
                if denom <= 0.0:
                    new = 0.0
                else:
                    rho = 0.0
                    for i in range(n):
                        rho += Z[i, j] * r[i]
                    rho = rho / n + norms[j] * bj
                    if rho > l1:
                        new = (rho - l1) / denom
                    elif rho < -l1:
                        new = (rho + l1) / denom
                    else:
                        new = 0.0
                d = new - bj
                if d != 0.0:
                    for i in range(n):
                        r[i] -= Z[i, j] * d
                    beta[j] = new
                    if abs(d) > maxd:
                        maxd = abs(d)
            if maxd < tol:
                break
            # KKT check: flat valleys of collinear designs stall the step test
            kkt = 0.0
            for j in range(p):
                g = 0.0
                for i in range(n):
                    g += Z[i, j] * r[i]
                g = -g / n + l2 * beta[j]
                if beta[j] > 0.0:
                    v = abs(g + l1)
                elif beta[j] < 0.0:
                    v = abs(g - l1)
                else:
                    v = abs(g) - l1
                if v > kkt:
                    kkt = v
            if kkt < tol:
                maxd = kkt
                break
        out[li] = beta
        sweeps[li] = it
        last[li] = maxd
    return out, sweeps, last


def enet_path(Z, yc, alpha: float, lambdas, tol=ENET_TOL, max_sweeps=ENET_MAX_SWEEPS, beta0=None):
    """Coefficient path on already standardized, centered data.

    `lambdas` are visited in the given order with warm starts; pass them in
    decreasing order for speed.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas < 0):
        raise ValueError("lambda must be >= 0")
    Z = np.ascontiguousarray(Z, dtype=float)
    beta0 = np.zeros(Z.shape[1]) if beta0 is None else np.array(beta0, dtype=float)
    coefs, sweeps, last = _enet_path(Z, np.ascontiguousarray(yc, dtype=float), float(alpha), lambdas, tol, max_sweeps, beta0)
    for lam, s, d in zip(lambdas, sweeps, last):
        if d >= tol:
            warnings.warn(
                f"elastic net (alpha={alpha}, lambda={lam:.3g}) did not converge after {s} sweeps "
                f"(max coefficient change / KKT violation {d:.2e})",
                ConvergenceWarning,
                stacklevel=2,
            )
    return coefs, sweeps


def fit_elastic_net(
    X,
    y,
    alpha: float,
    lam: float,
    target_space: str = LOG10_CYCLES,
    feature_names=None,
    tol: float = ENET_TOL,
    max_sweeps: int = ENET_MAX_SWEEPS,
) -> LinearModel:
    """Cyclic coordinate descent with soft-thresholding.

    Stops when the largest coefficient change in a sweep or the largest KKT
    violation drops below `tol`, or after `max_sweeps` sweeps (a
    ConvergenceWarning reports the count).
    """
    st, Z, yc, ybar = _prepare(X, y)
    coefs, sweeps = enet_path(Z, yc, alpha, [lam], tol, max_sweeps)
    model = LinearModel(
        _expand(st, coefs[0]), ybar, st, target_space, "enet", {"alpha": alpha, "lambda": lam}, feature_names
    )
    model.n_iter = int(sweeps[0])
    return model


def enet_kkt_residuals(model: LinearModel, X, y) -> tuple[np.ndarray, np.ndarray]:
    """Stationarity residuals for active coefficients and subgradient slack for
    zero ones; both should be ~0 / <= 0 at an optimum."""
    alpha = model.hyperparameters["alpha"]
    lam = model.hyperparameters["lambda"]
    st = model.standardizer
    Z = st.transform(X)
    y = np.asarray(y, float)
    b = model.coefficients[st.keep]
    r = (y - y.mean()) - Z @ b
    grad = -(Z.T @ r) / y.size
    active = b != 0
    stat = grad[active] + lam * alpha * np.sign(b[active]) + lam * (1 - alpha) * b[active]
    slack = np.abs(grad[~active]) - lam * alpha
    return stat, slack


def fit_pcr(X, y, n_components: int, target_space: str = LOG10_CYCLES, feature_names=None) -> LinearModel:
    st, Z, yc, ybar = _prepare(X, y)
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    rank = _rank(s, Z.shape)
    if not 1 <= n_components <= rank:
        raise RankDeficientError(f"n_components={n_components} outside [1, rank={rank}]")
    k = n_components
    beta = Vt[:k].T @ ((U[:, :k].T @ yc) / s[:k])
    return LinearModel(_expand(st, beta), ybar, st, target_space, "pcr", {"n_components": k}, feature_names)


def _nipals_pls1(Z, yc, n_components, strict=True):
    """PLS1 by NIPALS; returns weights W, loadings P and y-loadings q.

    With ``strict=False`` the path stops early (fewer columns) once
    deflation leaves no usable direction instead of raising.
    """
    Xa = Z.copy()
    ya = yc.copy()
    n, p = Z.shape
    W = np.zeros((p, n_components))
    P = np.zeros((p, n_components))
    q = np.zeros(n_components)
    scale = max(1.0, float(np.abs(Z.T @ yc).max()))
    for a in range(n_components):
        w = Xa.T @ ya
        nw = np.linalg.norm(w)
        if nw <= 1e-12 * scale:
            if not strict:
                return W[:, :a], P[:, :a], q[:a]
            raise RankDeficientError(f"PLS deflation degenerate at component {a + 1} (zero-norm weights)")
        w /= nw
        t = Xa @ w
        tt = t @ t
        if tt <= 0:
            if not strict:
                return W[:, :a], P[:, :a], q[:a]
            raise RankDeficientError(f"PLS component {a + 1} has zero-norm scores")
        pa = Xa.T @ t / tt
        qa = (ya @ t) / tt
        Xa -= np.outer(t, pa)
        ya -= qa * t
        W[:, a], P[:, a], q[a] = w, pa, qa
    return W, P, q


def _pls_coefs(W, P, q, k):
    Wk, Pk = W[:, :k], P[:, :k]
    return Wk @ np.linalg.solve(Pk.T @ Wk, q[:k])


def fit_plsr(X, y, n_components: int, target_space: str = LOG10_CYCLES, feature_names=None) -> LinearModel:
    st, Z, yc, ybar = _prepare(X, y)
    rank = _rank(np.linalg.svd(Z, compute_uv=False), Z.shape)
    if not 1 <= n_components <= rank:
        raise RankDeficientError(f"n_components={n_components} outside [1, rank={rank}]")
    W, P, q = _nipals_pls1(Z, yc, n_components)
    beta = _pls_coefs(W, P, q, n_components)
    return LinearModel(_expand(st, beta), ybar, st, target_space, "plsr", {"n_components": n_components}, feature_names)


# ---------------------------------------------------------------- cross-validation


@dataclass(frozen=True)
class CVConfig:
    n_folds: int = 5
    seed: int = 0


@dataclass
class FitResult:
    model: object
    method: str
    chosen_hyperparameters: dict
    cv_rmse: float
    cv_table: list[dict] = field(default_factory=list)
    per_split_rmse: dict[str, float] = field(default_factory=dict)


def fold_assignment(n: int, cv: CVConfig) -> np.ndarray:
    if n < 2 * cv.n_folds:
        raise ValueError(f"{n} training rows cannot fill {cv.n_folds} folds of at least 2 rows")
    perm = np.random.default_rng(cv.seed).permutation(n)
    folds = np.empty(n, dtype=int)
    folds[perm] = np.arange(n) % cv.n_folds
    return folds


def default_grid(method: str, n_features: int | None = None, n_train: int | None = None, n_folds: int = 5) -> list[dict]:
    if method == "enet":
        return [{"alpha": a, "lambda": l} for a in DEFAULT_ALPHAS for l in DEFAULT_LAMBDAS]
    if method == "ridge":
        return [{"lambda": l} for l in DEFAULT_LAMBDAS]
    if method in ("pcr", "plsr"):
        cap = MAX_COMPONENTS
        if n_features is not None:
            cap = min(cap, n_features)
        if n_train is not None:
            # fold-train rows, minus one for centering
            cap = min(cap, n_train - int(np.ceil(n_train / n_folds)) - 1)
        return [{"n_components": k} for k in range(1, max(cap, 1) + 1)]
    if method == "ols":
        return [{}]
    raise ValueError(f"no default grid for {method!r}")


def _strength_key(method, hp):
    # sort key: stronger regularization / fewer components first
    if method == "enet":
        return (-hp["lambda"], -hp["alpha"])
    if method == "ridge":
        return (-hp["lambda"],)
    if method in ("pcr", "plsr"):
        return (hp["n_components"],)
    return tuple(sorted(hp.items()))


def _fold_predictions(method, grid, Ztr, yc, ybar, Zva):
    """Validation predictions (target space) for each grid point; None where infeasible."""
    out = [None] * len(grid)
    if method == "ols":
        U, s, Vt = np.linalg.svd(Ztr, full_matrices=False)
        if _rank(s, Ztr.shape) == Ztr.shape[1]:
            out[0] = ybar + Zva @ (Vt.T @ ((U.T @ yc) / s))
        return out
    if method == "ridge":
        U, s, Vt = np.linalg.svd(Ztr, full_matrices=False)
        uty = U.T @ yc
        for g, hp in enumerate(grid):
            lam = hp["lambda"]
            if lam == 0 and _rank(s, Ztr.shape) < Ztr.shape[1]:
                continue
            out[g] = ybar + Zva @ (Vt.T @ (s / (s * s + lam) * uty))
        return out
    if method == "enet":
        by_alpha: dict = {}
        for g, hp in enumerate(grid):
            by_alpha.setdefault(hp["alpha"], []).append(g)
        for alpha, idx in by_alpha.items():
            order = sorted(idx, key=lambda g: -grid[g]["lambda"])
            lams = [grid[g]["lambda"] for g in order]
            coefs, _ = enet_path(Ztr, yc, alpha, lams)
            for g, b in zip(order, coefs):
                out[g] = ybar + Zva @ b
        return out
    if method == "pcr":
        U, s, Vt = np.linalg.svd(Ztr, full_matrices=False)
        rank = _rank(s, Ztr.shape)
        gamma = (U.T @ yc) / np.where(s > 0, s, 1.0)
        for g, hp in enumerate(grid):
            k = hp["n_components"]
            if 1 <= k <= rank:
                out[g] = ybar + Zva @ (Vt[:k].T @ gamma[:k])
        return out
    if method == "plsr":
        rank = _rank(np.linalg.svd(Ztr, compute_uv=False), Ztr.shape)
        kmax = min(max(hp["n_components"] for hp in grid), rank)
        if kmax < 1:
            return out
        W, P, q = _nipals_pls1(Ztr, yc, kmax, strict=False)
        kmax = q.size
        for g, hp in enumerate(grid):
            k = hp["n_components"]
            if 1 <= k <= kmax:
                out[g] = ybar + Zva @ _pls_coefs(W, P, q, k)
        return out
    raise ValueError(f"unknown method {method!r}")


def fit_model(method: str, X, y, hp: dict, target_space=LOG10_CYCLES, feature_names=None, seed: int = 0):
    if method == "ols":
        return fit_ols(X, y, target_space, feature_names)
    if method == "ridge":
        return fit_ridge(X, y, hp["lambda"], target_space, feature_names)
    if method == "enet":
        return fit_elastic_net(X, y, hp["alpha"], hp["lambda"], target_space, feature_names)
    if method == "pcr":
        return fit_pcr(X, y, hp["n_components"], target_space, feature_names)
    if method == "plsr":
        return fit_plsr(X, y, hp["n_components"], target_space, feature_names)
    if method == "forest":
        from .forest import ForestParams, fit_forest

        return fit_forest(X, y, ForestParams(**hp), seed=seed, target_space=target_space, feature_names=feature_names)
    raise ValueError(f"unknown method {method!r}")


def cross_validate(
    X,
    y,
    method: str,
    hyperparameter_grid: Sequence[dict] | None = None,
    cv_config: CVConfig = CVConfig(),
    target_space: str = LOG10_CYCLES,
    feature_names=None,
) -> FitResult:
    """Pick hyperparameters by k-fold CV on RMSE in cycles, then refit on all rows.

    `y` is in `target_space`; validation predictions are back-transformed to
    cycles before scoring. The standardizer is refit inside every fold. Ties
    (within 1e-9 relative) go to stronger regularization or fewer components.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    n, p = X.shape
    grid = list(hyperparameter_grid) if hyperparameter_grid is not None else default_grid(method, p, n, cv_config.n_folds)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    folds = fold_assignment(n, cv_config)
    actual = to_cycles(y, target_space)

    fold_rmse = np.full((len(grid), cv_config.n_folds), np.inf)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("ignore", DegenerateFeatureWarning)
        warnings.simplefilter("always", ConvergenceWarning)
        for f in range(cv_config.n_folds):
            tr, va = folds != f, folds == f
            if method == "forest":
                for g, hp in enumerate(grid):
                    m = fit_model(method, X[tr], y[tr], hp, target_space, seed=cv_config.seed)
                    fold_rmse[g, f] = rmse_cycles(m.predict(X[va]), actual[va], target_space)
                continue
            st = Standardizer.fit(X[tr])
            Ztr, Zva = st.transform(X[tr]), st.transform(X[va])
            ybar = y[tr].mean()
            preds = _fold_predictions(method, grid, Ztr, y[tr] - ybar, ybar, Zva)
            for g, pr in enumerate(preds):
                if pr is not None and np.all(np.isfinite(pr)):
                    with np.errstate(over="ignore"):
                        fold_rmse[g, f] = rmse_cycles(pr, actual[va], target_space)
    n_unconverged = sum(issubclass(w.category, ConvergenceWarning) for w in caught)
    for w in caught:
        if not issubclass(w.category, ConvergenceWarning):
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    if n_unconverged:
        # one summary instead of a warning per fold and grid point
        warnings.warn(
            f"{method}: {n_unconverged} cross-validation fit(s) stopped at the sweep limit",
            ConvergenceWarning,
            stacklevel=2,
        )
    mean_rmse = fold_rmse.mean(axis=1)
    finite = np.isfinite(mean_rmse)
    if not finite.any():
        raise ValueError(f"no feasible grid point for {method}")
    best = mean_rmse[finite].min()
    ties = [g for g in range(len(grid)) if finite[g] and mean_rmse[g] <= best * (1 + 1e-9)]
    chosen = min(ties, key=lambda g: _strength_key(method, grid[g]))
    hp = dict(grid[chosen])
    model = fit_model(method, X, y, hp, target_space, feature_names, seed=cv_config.seed)
    table = [dict(grid[g], cv_rmse=float(mean_rmse[g])) for g in range(len(grid))]
    return FitResult(model, method, hp, float(mean_rmse[chosen]), table)
