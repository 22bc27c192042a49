"""Diagonal-covariance Gaussian mixture over the input space.

Fit offline by expectation maximization with k-means++ initialization, the
component count chosen by BIC, then frozen.  Sampling the frozen mixture
produces the synthetic pseudo-inputs used for rehearsal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
VARIANCE_FLOOR_FRACTION = 1e-6
MAX_RESEED_ATTEMPTS = 10


class GmmFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    var_diag: np.ndarray


@dataclass(frozen=True)
class GmmModel:
    """Frozen mixture: no mutating operations are exposed."""

    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    var_diag: np.ndarray  # (k, d)
    train_loglik: float
    bic: float
    n_train: int
    loglik_history: tuple = ()

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list:
        return [
            GaussianComponent(float(w), m.copy(), v.copy())
            for w, m, v in zip(self.weights, self.means, self.var_diag)
        ]

    def mixture_mean(self) -> np.ndarray:
        return self.weights @ self.means

    def mixture_var(self) -> np.ndarray:
        second = self.weights @ (self.var_diag + self.means**2)
        return second - self.mixture_mean() ** 2

    def log_pdf(self, xs: np.ndarray) -> np.ndarray:
        return _logsumexp(_component_log_pdf(xs, self.weights, self.means, self.var_diag))

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "weights": self.weights.tolist(),
                "means": self.means.tolist(),
                "var_diag": self.var_diag.tolist(),
                "train_loglik": self.train_loglik,
                "bic": self.bic,
                "n_train": self.n_train,
            }
        )

    @staticmethod
    def from_json(text: str) -> "GmmModel":
        d = json.loads(text)
        return GmmModel(
            weights=np.array(d["weights"]),
            means=np.array(d["means"]),
            var_diag=np.array(d["var_diag"]),
            train_loglik=float(d["train_loglik"]),
            bic=float(d["bic"]),
            n_train=int(d["n_train"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @staticmethod
    def load(path) -> "GmmModel":
        with open(path) as f:
            return GmmModel.from_json(f.read())


def bic_parameter_count(k: int, dim: int) -> int:
    """Free parameters: k-1 weights + k*dim means + k*dim variances."""
    return k * (1 + 2 * dim) - 1


def _component_log_pdf(xs, weights, means, var_diag) -> np.ndarray:
    """log(w_j * N(x_i; mu_j, var_j)) as an (n, k) matrix.

    The quadratic form is expanded so the heavy lifting is two matrix
    products instead of an (n, k, d) intermediate.
    """
    inv = 1.0 / var_diag
    quad = (xs**2) @ inv.T - 2.0 * (xs @ (means * inv).T) + np.sum(means**2 * inv, axis=1)
    log_det = np.sum(np.log(var_diag), axis=1)
    d = xs.shape[1]
    return np.log(weights)[None, :] - 0.5 * (quad + log_det[None, :] + d * LOG_2PI)


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _kmeanspp_centers(xs: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(xs)
    centers = [xs[rng.integers(n)]]
    for _ in range(k - 1):
        d2 = np.min(
            np.sum((xs[:, None, :] - np.array(centers)[None, :, :]) ** 2, axis=2), axis=1
        )
        total = d2.sum()
        if total <= 0:
            centers.append(xs[rng.integers(n)])
            continue
        centers.append(xs[rng.choice(n, p=d2 / total)])
    return np.array(centers)


def fit_em(
    data: np.ndarray,
    k: int,
    tol: float = 1e-6,
    max_iter: int = 200,
    seed: int = 0,
) -> GmmModel:
    """EM fit with a fixed component count.

    The per-iteration training log-likelihood is non-decreasing (up to
    numerical slack); components that lose all responsibility mass are
    re-seeded at the lowest-likelihood data point.
    """
    xs = np.asarray(data, dtype=float)
    n, d = xs.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < 10 * k:
        raise ValueError(f"need at least 10*k={10 * k} points, got {n}")

    rng = np.random.default_rng(seed)
    floor = VARIANCE_FLOOR_FRACTION * np.maximum(xs.var(axis=0), 1e-12)
    floor = np.maximum(floor, 1e-12)

    means = _kmeanspp_centers(xs, k, rng)
    var_diag = np.tile(np.maximum(xs.var(axis=0), floor), (k, 1))
    weights = np.full(k, 1.0 / k)

    history = []
    loglik = -np.inf
    reseeds = 0
    for _ in range(max_iter):
        log_joint = _component_log_pdf(xs, weights, means, var_diag)
        log_norm = _logsumexp(log_joint)
        resp = np.exp(log_joint - log_norm[:, None])
        new_loglik = float(log_norm.sum())
        history.append(new_loglik)

        nk = resp.sum(axis=0)
        empty = nk < 1e-10
        if np.any(empty):
            reseeds += int(empty.sum())
            if reseeds > MAX_RESEED_ATTEMPTS:
                raise GmmFitError("EM repeatedly produced empty components")
            worst = int(np.argmin(log_norm))
            for j in np.flatnonzero(empty):
                means[j] = xs[worst]
                var_diag[j] = np.maximum(xs.var(axis=0), floor)
                weights[j] = 1.0 / n
            weights /= weights.sum()
            loglik = -np.inf  # restart convergence tracking after a reseed
            continue

        weights = nk / n
        means = (resp.T @ xs) / nk[:, None]
        second_moment = (resp.T @ xs**2) / nk[:, None]
        var_diag = np.maximum(second_moment - means**2, 0.0)
        var_diag = np.maximum(var_diag, floor[None, :])

        if new_loglik - loglik < tol:
            loglik = new_loglik
            break
        loglik = new_loglik

    final_loglik = float(_logsumexp(_component_log_pdf(xs, weights, means, var_diag)).sum())
    p = bic_parameter_count(k, d)
    bic = -2.0 * final_loglik + p * np.log(n)
    return GmmModel(
        weights=weights,
        means=means,
        var_diag=var_diag,
        train_loglik=final_loglik,
        bic=float(bic),
        n_train=n,
        loglik_history=tuple(history),
    )


def select_k(
    data: np.ndarray,
    k_min: int = 1,
    k_max: int = 32,
    restarts: int = 3,
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> GmmModel:
    """Fit every k in [k_min, k_max], return the minimum-BIC model.

    Ties break toward smaller k.  Each k uses `restarts` seeded restarts and
    keeps the best-likelihood fit.
    """
    if k_min > k_max:
        raise ValueError("k_min must be <= k_max")
    best = None
    for k in range(k_min, k_max + 1):
        best_for_k = None
        for r in range(restarts):
            try:
                model = fit_em(data, k, tol=tol, max_iter=max_iter, seed=seed + 1000 * k + r)
            except (GmmFitError, ValueError):
                continue
            if best_for_k is None or model.train_loglik > best_for_k.train_loglik:
                best_for_k = model
        if best_for_k is None:
            continue
        if best is None or best_for_k.bic < best.bic:
            best = best_for_k
    if best is None:
        raise GmmFitError("no k in the requested range could be fit")
    return best


def sample_gmm(model: GmmModel, n: int, seed: int = 0) -> np.ndarray:
    """Draw n points: categorical component choice, then diagonal Gaussian."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    comp = rng.choice(model.k, size=n, p=model.weights / model.weights.sum())
    noise = rng.standard_normal((n, model.dim))
    return model.means[comp] + noise * np.sqrt(model.var_diag[comp])
