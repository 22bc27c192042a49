"""Incremental locally weighted regression.

A model is a growing set of receptive fields, each a Gaussian activation
region (center + diagonal distance metric) holding one local linear model fit
by forgetting-factor recursive weighted least squares.  The global prediction
is the activation-weighted average of the local predictions.  Updates touch
only fields activated above the generation threshold, which is what makes the
model immune to catastrophic interference.

One model is kept per output channel; the four-channel ensemble maps a
6-dimensional input (dynamic state + control, standardized) to the four
dynamic-state derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATION_CUTOFF = 1e-8
DEFAULT_W_GEN = 0.1
DEFAULT_FORGETTING = 0.999
DEFAULT_RIDGE = 0.05
DEFAULT_INIT_METRIC = 25.0

OUTPUT_NAMES = ("roll_rate", "long_acc", "lat_acc", "heading_acc")

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ReceptiveField:
    """Read-only snapshot of one local model."""

    center: np.ndarray
    metric_diag: np.ndarray
    linear_coeffs: np.ndarray
    offset: float
    weight_sum: float
    activation_count: float


@dataclass
class UpdateReport:
    created: bool = False
    updated: list = field(default_factory=list)
    singular: bool = False


def rf_activation(center: np.ndarray, metric_diag: np.ndarray, x: np.ndarray) -> float:
    """exp(-1/2 (x-c)^T D (x-c)) with diagonal D."""
    d = x - center
    return float(np.exp(-0.5 * np.dot(metric_diag, d * d)))


class LwprModel:
    """Receptive-field regression for a single output channel.

    Field state is stored in parallel arrays so that prediction over a batch
    is a single broadcast; ``field(i)`` exposes a value-type view.
    """

    def __init__(
        self,
        output_index: int = 0,
        dim: int = 6,
        w_gen: float = DEFAULT_W_GEN,
        init_metric_diag=None,
        forgetting_factor: float = DEFAULT_FORGETTING,
        ridge: float = DEFAULT_RIDGE,
    ):
        if not (0.0 < w_gen < 1.0):
            raise ValueError("w_gen must be in (0, 1)")
        if not (0.0 < forgetting_factor <= 1.0):
            raise ValueError("forgetting_factor must be in (0, 1]")
        self.output_index = output_index
        self.dim = dim
        self.w_gen = w_gen
        self.forgetting_factor = forgetting_factor
        self.ridge = ridge
        if init_metric_diag is None:
            init_metric_diag = np.full(dim, DEFAULT_INIT_METRIC)
        self.init_metric_diag = np.asarray(init_metric_diag, dtype=float)
        if np.any(self.init_metric_diag <= 0):
            raise ValueError("init_metric_diag must be strictly positive")

        self.centers = np.zeros((0, dim))
        self.metrics = np.zeros((0, dim))
        self.coeffs = np.zeros((0, dim))
        self.offsets = np.zeros(0)
        # sufficient statistics of the augmented regression z = [1, x - c];
        # the prior_* arrays hold frozen (non-decaying) statistics, see
        # freeze_prior()
        self.stats_a = np.zeros((0, dim + 1, dim + 1))
        self.stats_b = np.zeros((0, dim + 1))
        self.prior_a = np.zeros((0, dim + 1, dim + 1))
        self.prior_b = np.zeros((0, dim + 1))
        self.weight_sums = np.zeros(0)
        self.activation_counts = np.zeros(0)

    @property
    def n_fields(self) -> int:
        return self.centers.shape[0]

    def field(self, i: int) -> ReceptiveField:
        return ReceptiveField(
            center=self.centers[i].copy(),
            metric_diag=self.metrics[i].copy(),
            linear_coeffs=self.coeffs[i].copy(),
            offset=float(self.offsets[i]),
            weight_sum=float(self.weight_sums[i]),
            activation_count=float(self.activation_counts[i]),
        )

    # -- prediction --------------------------------------------------------

    def activations(self, x: np.ndarray) -> np.ndarray:
        d = x[None, :] - self.centers
        return np.exp(-0.5 * np.sum(self.metrics * d * d, axis=1))

    def predict(self, x: np.ndarray) -> tuple[float, float]:
        """Return (prediction, total activation weight).

        A total weight below the activation cutoff marks extrapolation; the
        nearest field's local model is returned in that case.
        """
        if self.n_fields == 0:
            raise ValueError("model has no receptive fields yet")
        w = self.activations(x)
        local = self.offsets + np.sum(self.coeffs * (x[None, :] - self.centers), axis=1)
        total = float(w.sum())
        active = w >= ACTIVATION_CUTOFF
        if not np.any(active):
            return float(local[np.argmax(w)]), total
        return float(np.dot(w[active], local[active]) / w[active].sum()), total

    def predict_batch(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized predict over rows of xs; same semantics as predict.

        The quadratic form is expanded into matrix products to avoid an
        (n, fields, dim) intermediate.
        """
        quad = (
            (xs**2) @ self.metrics.T
            - 2.0 * (xs @ (self.metrics * self.centers).T)
            + np.sum(self.metrics * self.centers**2, axis=1)
        )
        w = np.exp(-0.5 * quad)
        local = xs @ self.coeffs.T + (self.offsets - np.sum(self.coeffs * self.centers, axis=1))
        w_masked = np.where(w >= ACTIVATION_CUTOFF, w, 0.0)
        totals = w.sum(axis=1)
        denom = w_masked.sum(axis=1)
        ok = denom > 0.0
        yhat = np.empty(xs.shape[0])
        yhat[ok] = (w_masked[ok] * local[ok]).sum(axis=1) / denom[ok]
        if np.any(~ok):
            nearest = np.argmax(w[~ok], axis=1)
            yhat[~ok] = local[~ok, nearest]
        return yhat, totals

    # -- updates -----------------------------------------------------------

    def _append_field(self, x: np.ndarray, y: float) -> None:
        z = np.zeros(self.dim + 1)
        z[0] = 1.0
        self.centers = np.vstack([self.centers, x[None, :]])
        self.metrics = np.vstack([self.metrics, self.init_metric_diag[None, :]])
        self.coeffs = np.vstack([self.coeffs, np.zeros((1, self.dim))])
        self.offsets = np.append(self.offsets, y)
        self.stats_a = np.concatenate([self.stats_a, np.outer(z, z)[None, :, :]])
        self.stats_b = np.vstack([self.stats_b, (z * y)[None, :]])
        self.prior_a = np.concatenate([self.prior_a, np.zeros((1, self.dim + 1, self.dim + 1))])
        self.prior_b = np.vstack([self.prior_b, np.zeros(self.dim + 1)])
        self.weight_sums = np.append(self.weight_sums, 1.0)
        self.activation_counts = np.append(self.activation_counts, 1.0)

    def update(self, x: np.ndarray, y: float) -> UpdateReport:
        """Incorporate one sample; may create a new receptive field.

        Fields activated above w_gen decay their statistics by the forgetting
        factor, absorb the weighted sample, and re-solve the local
        ridge-regularized weighted least squares.  Fields below the threshold
        are untouched bit-for-bit.
        """
        x = np.asarray(x, dtype=float)
        if not (np.all(np.isfinite(x)) and np.isfinite(y)):
            raise ValueError("non-finite training sample")
        report = UpdateReport()
        if self.n_fields == 0 or float(np.max(self.activations(x))) <= self.w_gen:
            self._append_field(x, float(y))
            report.created = True
            return report

        w = self.activations(x)
        lam = self.forgetting_factor
        # ridge on the slope coefficients only; the intercept is unpenalized
        reg = self.ridge * np.eye(self.dim + 1)
        reg[0, 0] = 0.0
        idx = np.flatnonzero(w > self.w_gen)
        wi = w[idx]
        z = np.hstack([np.ones((len(idx), 1)), x[None, :] - self.centers[idx]])
        self.stats_a[idx] = lam * self.stats_a[idx] + wi[:, None, None] * (
            z[:, :, None] * z[:, None, :]
        )
        self.stats_b[idx] = lam * self.stats_b[idx] + (wi * y)[:, None] * z
        self.weight_sums[idx] = lam * self.weight_sums[idx] + wi
        self.activation_counts[idx] += wi
        lhs = self.prior_a[idx] + self.stats_a[idx] + reg
        rhs = self.prior_b[idx] + self.stats_b[idx]
        try:
            betas = np.linalg.solve(lhs, rhs[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            betas = np.full_like(rhs, np.nan)
            for j in range(len(idx)):
                try:
                    betas[j] = np.linalg.solve(lhs[j], rhs[j])
                except np.linalg.LinAlgError:
                    pass  # stays NaN, handled as singular below
        for j, i in enumerate(idx):
            beta = betas[j]
            if not np.all(np.isfinite(beta)):
                report.singular = True
                continue
            self.offsets[i] = beta[0]
            self.coeffs[i] = beta[1:]
            report.updated.append(int(i))
        return report

    def freeze_prior(self) -> None:
        """Fold the accumulated statistics into a non-decaying prior.

        Subsequent updates decay only post-freeze statistics, so a long
        monotonous stream can specialize the touched fields but can never
        wash out what was learned before the freeze.  Solutions are
        unchanged at the moment of the call.
        """
        self.prior_a = self.prior_a + self.stats_a
        self.prior_b = self.prior_b + self.stats_b
        self.stats_a = np.zeros_like(self.stats_a)
        self.stats_b = np.zeros_like(self.stats_b)

    def train_batch(self, xs: np.ndarray, ys: np.ndarray, epochs: int = 1, seed: int = 0) -> int:
        """Shuffled-epoch training over a dataset; returns the field count."""
        if len(xs) == 0:
            raise ValueError("empty dataset")
        rng = np.random.default_rng(seed)
        n = len(xs)
        for _ in range(epochs):
            for i in rng.permutation(n):
                self.update(xs[i], float(ys[i]))
        return self.n_fields


class LwprEnsemble:
    """One LwprModel per output channel of the dynamics target."""

    def __init__(self, dim: int = 6, n_outputs: int = 4, **model_kwargs):
        self.models = [LwprModel(output_index=k, dim=dim, **model_kwargs) for k in range(n_outputs)]

    @property
    def n_outputs(self) -> int:
        return len(self.models)

    def field_counts(self) -> list[int]:
        return [m.n_fields for m in self.models]

    def update(self, x: np.ndarray, y: np.ndarray) -> list[UpdateReport]:
        return [m.update(x, float(y[k])) for k, m in enumerate(self.models)]

    def train_batch(self, xs: np.ndarray, ys: np.ndarray, epochs: int = 1, seed: int = 0) -> list[int]:
        return [
            m.train_batch(xs, ys[:, k], epochs=epochs, seed=seed + k)
            for k, m in enumerate(self.models)
        ]

    def freeze_prior(self) -> None:
        for m in self.models:
            m.freeze_prior()

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        preds, weights = zip(*(m.predict(x) for m in self.models))
        return np.array(preds), np.array(weights)

    def predict_batch(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (predictions (n, 4), total weights (n, 4))."""
        outs = [m.predict_batch(xs) for m in self.models]
        return np.column_stack([o[0] for o in outs]), np.column_stack([o[1] for o in outs])

    # -- FLOP accounting ---------------------------------------------------

    def flop_lower_bound(self) -> dict:
        """Lower bound of 25 FLOPs per receptive-field activation."""
        rows = [
            {"output": OUTPUT_NAMES[k], "fields": m.n_fields, "flops": 25 * m.n_fields}
            for k, m in enumerate(self.models)
        ]
        total = sum(r["fields"] for r in rows)
        return {"rows": rows, "total_fields": total, "total_flops": 25 * total}

    # -- checkpointing -----------------------------------------------------

    def save(self, path) -> None:
        payload = {"version": np.array(CHECKPOINT_VERSION), "n_models": np.array(len(self.models))}
        for k, m in enumerate(self.models):
            payload[f"m{k}_centers"] = m.centers
            payload[f"m{k}_metrics"] = m.metrics
            payload[f"m{k}_coeffs"] = m.coeffs
            payload[f"m{k}_offsets"] = m.offsets
            payload[f"m{k}_stats_a"] = m.stats_a
            payload[f"m{k}_stats_b"] = m.stats_b
            payload[f"m{k}_prior_a"] = m.prior_a
            payload[f"m{k}_prior_b"] = m.prior_b
            payload[f"m{k}_weight_sums"] = m.weight_sums
            payload[f"m{k}_activation_counts"] = m.activation_counts
            payload[f"m{k}_hyper"] = np.array(
                [m.w_gen, m.forgetting_factor, m.ridge, float(m.output_index), float(m.dim)]
            )
            payload[f"m{k}_init_metric"] = m.init_metric_diag
        np.savez(path, **payload)

    @staticmethod
    def load(path) -> "LwprEnsemble":
        data = np.load(path)
        if int(data["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(data['version'])}")
        n_models = int(data["n_models"])
        ens = LwprEnsemble.__new__(LwprEnsemble)
        ens.models = []
        for k in range(n_models):
            hyper = data[f"m{k}_hyper"]
            m = LwprModel(
                output_index=int(hyper[3]),
                dim=int(hyper[4]),
                w_gen=float(hyper[0]),
                init_metric_diag=data[f"m{k}_init_metric"],
                forgetting_factor=float(hyper[1]),
                ridge=float(hyper[2]),
            )
            m.centers = data[f"m{k}_centers"]
            m.metrics = data[f"m{k}_metrics"]
            m.coeffs = data[f"m{k}_coeffs"]
            m.offsets = data[f"m{k}_offsets"]
            m.stats_a = data[f"m{k}_stats_a"]
            m.stats_b = data[f"m{k}_stats_b"]
            m.prior_a = data[f"m{k}_prior_a"]
            m.prior_b = data[f"m{k}_prior_b"]
            m.weight_sums = data[f"m{k}_weight_sums"]
            m.activation_counts = data[f"m{k}_activation_counts"]
            ens.models.append(m)
        return ens
