"""Online model-update engine.

Maintains the local operating set (a ring of recent samples), builds real and
synthetic mini-batches, computes the constrained gradient, and applies ADAM
steps.  The constraint scales the local-data gradient so the combined step
never opposes the gradient computed on synthetic rehearsal data, which is
what prevents the network from forgetting the system-identification regime.

Prequential bookkeeping: every incoming pair is scored by the current model
*before* any learning sees it.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from lwpr2.dynamics import TrainingPair, pairs_to_arrays
from lwpr2.gmm import GmmModel, select_k, sample_gmm
from lwpr2.lwpr import LwprEnsemble
from lwpr2.mlp import AdamState, MlpParams, adam_step, forward_batch, init_params, mse_gradient
from lwpr2.standardize import Standardizer

METHODS = ("none", "sgd", "lwpr2", "lwpr-only")

# Minimum receptive-field activation for a sampled input to be used as a
# rehearsal target.  Raising this keeps rehearsal inside the regions where
# the local models are confident, which is what protects the network from
# being dragged toward their extrapolation error.
EXTRAPOLATION_WEIGHT_CUTOFF = 0.5

CHECKPOINT_VERSION = 1


class SynthBatchError(RuntimeError):
    """Could not draw a synthetic batch inside the attempt budget."""


@dataclass
class TrainerConfig:
    lr: float = 1e-4
    init_lr: float = 1e-3
    real_batch: int = 64
    synth_batch: int = 64
    updates_per_ingest: int = 1
    ring_capacity: int = 750
    lwpr_epochs: int = 3
    # wide, strongly regularized receptive fields generalize best across the
    # full identification distribution, which is what rehearsal targets need
    lwpr_metric: float = 10.0
    lwpr_ridge: float = 0.3
    gmm_k_min: int = 1
    gmm_k_max: int = 20
    gmm_restarts: int = 2
    init_steps: int = 800
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.init_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.real_batch < 1 or self.synth_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if not (1 <= self.ring_capacity):
            raise ValueError("ring capacity must be >= 1")

    def active_preset(self) -> "TrainerConfig":
        """More conservative learning rate for closed-loop (active) use."""
        return replace(self, lr=self.lr / 2.0)


class LocalOperatingSet:
    """Fixed-capacity ring of the most recent training pairs."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.xs = np.zeros((capacity, 6))
        self.ys = np.zeros((capacity, 4))
        self.ts = np.zeros(capacity)
        self.size = 0
        self.next_index = 0

    def __len__(self) -> int:
        return self.size

    def push(self, pair: TrainingPair) -> None:
        i = self.next_index
        self.xs[i] = pair.x
        self.ys[i] = pair.y
        self.ts[i] = pair.timestamp
        self.next_index = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Uniform-with-replacement mini-batch over current contents."""
        if self.size == 0:
            raise ValueError("local operating set is empty")
        idx = rng.integers(0, self.size, size=n)
        return self.xs[idx].copy(), self.ys[idx].copy()


def constrained_alpha(g_l: np.ndarray, g_id: np.ndarray) -> float:
    """Largest a in [0, 1] with <a*g_l + g_id, g_id> >= 0, in closed form.

    With d = <g_l, g_id> and n = ||g_id||^2: a=1 when d >= 0 (constraint
    inactive) or when n = 0 (vacuous); otherwise min(1, n / -d).
    """
    if g_l.shape != g_id.shape:
        raise ValueError("gradient dimension mismatch")
    d = float(np.dot(g_l, g_id))
    n = float(np.dot(g_id, g_id))
    if n == 0.0 or d >= 0.0:
        return 1.0
    return min(1.0, n / (-d))


def synth_batch(
    gmm: GmmModel,
    lwpr: LwprEnsemble,
    n: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic rehearsal batch: inputs from the GMM, targets from LWPR.

    Samples whose LWPR prediction is an extrapolation (no activated field in
    some channel) are redrawn; gives up after 10*n attempted draws.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    xs_out = np.empty((n, 6))
    ys_out = np.empty((n, 4))
    accepted = 0
    attempts = 0
    draw = 0
    while accepted < n:
        if attempts >= 10 * n:
            raise SynthBatchError(f"accepted {accepted}/{n} after {attempts} draws")
        want = n - accepted
        xs = sample_gmm(gmm, want, seed=seed * 100003 + draw)
        draw += 1
        attempts += want
        ys, weights = lwpr.predict_batch(xs)
        ok = np.all(weights >= EXTRAPOLATION_WEIGHT_CUTOFF, axis=1)
        m = int(ok.sum())
        xs_out[accepted : accepted + m] = xs[ok]
        ys_out[accepted : accepted + m] = ys[ok]
        accepted += m
    return xs_out, ys_out


@dataclass
class StepReport:
    step: int
    alpha: float
    mse_real: float
    mse_synth: float
    inner_product: float
    skipped: bool = False

    def csv_row(self) -> str:
        return ",".join(
            [
                str(self.step),
                repr(self.alpha),
                repr(self.mse_real),
                repr(self.mse_synth),
                repr(self.inner_product),
                str(int(self.skipped)),
            ]
        )

    CSV_HEADER = "step,alpha,mse_real,mse_synth,inner_product,skipped"


def update_step(
    net: MlpParams,
    adam: AdamState,
    xs_real: np.ndarray,
    ys_real: np.ndarray,
    gmm: GmmModel,
    lwpr: LwprEnsemble,
    lr: float,
    synth_n: int,
    synth_seed: int,
    step_index: int = 0,
) -> tuple[MlpParams, AdamState, StepReport]:
    """One constrained ADAM step from an explicit real mini-batch.

    On synthetic-batch failure the step degrades to a no-op (never to
    unconstrained SGD).
    """
    try:
        xs_syn, ys_syn = synth_batch(gmm, lwpr, synth_n, seed=synth_seed)
    except SynthBatchError:
        return net, adam, StepReport(step_index, 1.0, np.nan, np.nan, np.nan, skipped=True)

    g_l, mse_real = mse_gradient(net, xs_real, ys_real)
    g_id, mse_synth = mse_gradient(net, xs_syn, ys_syn)
    alpha = constrained_alpha(g_l, g_id)
    combined = alpha * g_l + g_id
    net, adam = adam_step(net, adam, combined, lr)
    report = StepReport(
        step=step_index,
        alpha=alpha,
        mse_real=mse_real,
        mse_synth=mse_synth,
        inner_product=float(np.dot(combined, g_id)),
    )
    return net, adam, report


@dataclass
class IngestReport:
    """Prequential record for one incoming pair."""

    residual_raw: np.ndarray  # (4,) current-model residual in raw units
    residual_std: np.ndarray  # (4,) residual in standardized units
    ring_size: int
    step_report: StepReport | None = None
    dropped: bool = False


@dataclass
class InitializedModels:
    net: MlpParams
    gmm: GmmModel
    lwpr: LwprEnsemble
    standardizer: Standardizer
    adam: AdamState
    init_reports: list = field(default_factory=list)
    lwpr_field_counts: list = field(default_factory=list)


def initialize_joint(sysid_pairs, cfg: TrainerConfig) -> InitializedModels:
    """Joint initialization on the system-identification dataset.

    Order: freeze standardization constants, fit + freeze the GMM, train the
    LWPR ensemble for several epochs, then train the network with constrained
    steps whose real mini-batches come from the sysid dataset itself.
    """
    if len(sysid_pairs) == 0:
        raise ValueError("empty sysid dataset")
    xs_raw, ys_raw = pairs_to_arrays(sysid_pairs)
    std = Standardizer.fit(xs_raw, ys_raw)
    xs = std.transform_x(xs_raw)
    ys = std.transform_y(ys_raw)

    gmm = select_k(
        xs,
        k_min=cfg.gmm_k_min,
        k_max=cfg.gmm_k_max,
        restarts=cfg.gmm_restarts,
        seed=cfg.seed,
    )
    lwpr = LwprEnsemble(
        dim=6,
        n_outputs=4,
        init_metric_diag=np.full(6, cfg.lwpr_metric),
        ridge=cfg.lwpr_ridge,
    )
    counts = lwpr.train_batch(xs, ys, epochs=cfg.lwpr_epochs, seed=cfg.seed + 7)
    # The identification dataset is permanent memory: later streaming updates
    # may specialize fields but must not decay away what was learned here.
    lwpr.freeze_prior()

    net = init_params(seed=cfg.seed + 11)
    adam = AdamState.zeros()
    rng = np.random.default_rng(cfg.seed + 13)
    reports = []
    n = len(xs)
    for i in range(cfg.init_steps):
        idx = rng.integers(0, n, size=cfg.real_batch)
        net, adam, rep = update_step(
            net,
            adam,
            xs[idx],
            ys[idx],
            gmm,
            lwpr,
            lr=cfg.init_lr,
            synth_n=cfg.synth_batch,
            synth_seed=cfg.seed * 1000 + i,
            step_index=i,
        )
        reports.append(rep)
    return InitializedModels(
        net=net,
        gmm=gmm,
        lwpr=lwpr,
        standardizer=std,
        adam=adam,
        init_reports=reports,
        lwpr_field_counts=counts,
    )


def train_sgd_init(sysid_pairs, cfg: TrainerConfig, standardizer: Standardizer | None = None):
    """Plain-ADAM baseline initialization (no synthetic machinery)."""
    xs_raw, ys_raw = pairs_to_arrays(sysid_pairs)
    std = standardizer or Standardizer.fit(xs_raw, ys_raw)
    xs = std.transform_x(xs_raw)
    ys = std.transform_y(ys_raw)
    net = init_params(seed=cfg.seed + 11)
    adam = AdamState.zeros()
    rng = np.random.default_rng(cfg.seed + 13)
    n = len(xs)
    for _ in range(cfg.init_steps):
        idx = rng.integers(0, n, size=cfg.real_batch)
        g, _ = mse_gradient(net, xs[idx], ys[idx])
        net, adam = adam_step(net, adam, g, cfg.init_lr)
    return net, std


class OnlineTrainer:
    """Streaming adaptation: prequential scoring, ring insertion, LWPR
    updates, and periodic constrained network steps.

    ``method`` selects the adaptation rule:
      * ``none``      -- frozen network (prequential scoring only),
      * ``sgd``       -- plain ADAM on real mini-batches,
      * ``lwpr2``     -- the constrained pseudo-rehearsal update,
      * ``lwpr-only`` -- the LWPR ensemble is both predictor and learner.
    """

    def __init__(
        self,
        models: InitializedModels,
        cfg: TrainerConfig,
        method: str = "lwpr2",
        lr: float | None = None,
    ):
        if method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        self.method = method
        self.cfg = cfg
        self.net = models.net
        self.adam = AdamState.zeros(
            beta1=models.adam.beta1, beta2=models.adam.beta2, eps=models.adam.eps
        )
        self.gmm = models.gmm
        self.lwpr = models.lwpr
        self.std = models.standardizer
        self.lr = lr if lr is not None else cfg.lr
        self.ring = LocalOperatingSet(cfg.ring_capacity)
        self.batch_rng = np.random.default_rng(cfg.seed + 101)
        self.ingest_count = 0
        self.step_count = 0
        self.reports: list[StepReport] = []

    # -- prediction --------------------------------------------------------

    def predict_std(self, x_std: np.ndarray) -> np.ndarray:
        """Current-model prediction of the standardized target."""
        if self.method == "lwpr-only":
            pred, _ = self.lwpr.predict(x_std)
            return pred
        return forward_batch(self.net, x_std[None, :])[0]

    def snapshot(self) -> MlpParams:
        """Immutable network snapshot for concurrent readers (MPC)."""
        return self.net

    # -- streaming ---------------------------------------------------------

    def ingest(self, pair: TrainingPair) -> IngestReport:
        """Score the pair with the current model, then learn from it."""
        if not (np.all(np.isfinite(pair.x)) and np.all(np.isfinite(pair.y))):
            return IngestReport(
                residual_raw=np.full(4, np.nan),
                residual_std=np.full(4, np.nan),
                ring_size=len(self.ring),
                dropped=True,
            )
        x_std = self.std.transform_x(pair.x)
        y_std = self.std.transform_y(pair.y)
        pred_std = self.predict_std(x_std)
        residual_std = y_std - pred_std
        residual_raw = residual_std * self.std.y_scale

        self.ring.push(pair)
        self.ingest_count += 1

        if self.method in ("lwpr2", "lwpr-only"):
            self.lwpr.update(x_std, y_std)

        step_report = None
        if self.method in ("sgd", "lwpr2") and self.ingest_count % self.cfg.updates_per_ingest == 0:
            step_report = self._network_step()
        return IngestReport(
            residual_raw=residual_raw,
            residual_std=residual_std,
            ring_size=len(self.ring),
            step_report=step_report,
        )

    def _network_step(self) -> StepReport:
        xs_raw, ys_raw = self.ring.sample(self.cfg.real_batch, self.batch_rng)
        xs = self.std.transform_x(xs_raw)
        ys = self.std.transform_y(ys_raw)
        if self.method == "sgd":
            g, mse_real = mse_gradient(self.net, xs, ys)
            self.net, self.adam = adam_step(self.net, self.adam, g, self.lr)
            report = StepReport(self.step_count, 1.0, mse_real, np.nan, np.nan)
        else:
            self.net, self.adam, report = update_step(
                self.net,
                self.adam,
                xs,
                ys,
                self.gmm,
                self.lwpr,
                lr=self.lr,
                synth_n=self.cfg.synth_batch,
                synth_seed=self.cfg.seed * 7919 + self.step_count,
                step_index=self.step_count,
            )
        self.step_count += 1
        self.reports.append(report)
        return report

    # -- checkpointing -----------------------------------------------------

    def save_checkpoint(self, path) -> None:
        """Full trainer state for resume: models, optimizer, ring, RNG."""
        buf = io.BytesIO()
        self.lwpr.save(buf)
        meta = {
            "version": CHECKPOINT_VERSION,
            "method": self.method,
            "lr": self.lr,
            "cfg": self.cfg.__dict__,
            "ingest_count": self.ingest_count,
            "step_count": self.step_count,
            "adam": {
                "t": self.adam.t,
                "beta1": self.adam.beta1,
                "beta2": self.adam.beta2,
                "eps": self.adam.eps,
            },
            "rng_state": self.batch_rng.bit_generator.state,
            "ring": {"size": self.ring.size, "next_index": self.ring.next_index},
            "gmm": json.loads(self.gmm.to_json()),
            "standardizer": self.std.to_dict(),
        }
        np.savez(
            path,
            meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
            net=self.net.flatten(),
            adam_m=self.adam.m,
            adam_v=self.adam.v,
            ring_xs=self.ring.xs,
            ring_ys=self.ring.ys,
            ring_ts=self.ring.ts,
            lwpr=np.frombuffer(buf.getvalue(), dtype=np.uint8),
        )

    @staticmethod
    def load_checkpoint(path) -> "OnlineTrainer":
        data = np.load(path)
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cfg = TrainerConfig(**meta["cfg"])
        trainer = OnlineTrainer.__new__(OnlineTrainer)
        trainer.method = meta["method"]
        trainer.cfg = cfg
        trainer.lr = meta["lr"]
        trainer.net = MlpParams.unflatten(data["net"])
        trainer.adam = AdamState(
            m=data["adam_m"],
            v=data["adam_v"],
            t=meta["adam"]["t"],
            beta1=meta["adam"]["beta1"],
            beta2=meta["adam"]["beta2"],
            eps=meta["adam"]["eps"],
        )
        trainer.gmm = GmmModel.from_json(json.dumps(meta["gmm"]))
        trainer.std = Standardizer.from_dict(meta["standardizer"])
        trainer.lwpr = LwprEnsemble.load(io.BytesIO(bytes(data["lwpr"])))
        trainer.ring = LocalOperatingSet(cfg.ring_capacity)
        trainer.ring.xs = data["ring_xs"].copy()
        trainer.ring.ys = data["ring_ys"].copy()
        trainer.ring.ts = data["ring_ts"].copy()
        trainer.ring.size = meta["ring"]["size"]
        trainer.ring.next_index = meta["ring"]["next_index"]
        trainer.batch_rng = np.random.default_rng()
        trainer.batch_rng.bit_generator.state = meta["rng_state"]
        trainer.ingest_count = meta["ingest_count"]
        trainer.step_count = meta["step_count"]
        trainer.reports = []
        return trainer


def write_step_reports(reports, path) -> None:
    with open(path, "w") as f:
        f.write(StepReport.CSV_HEADER + "\n")
        for r in reports:
            f.write(r.csv_row() + "\n")
