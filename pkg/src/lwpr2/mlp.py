"""Feedforward dynamics network: 6-32-32-4, tanh hidden layers, linear output.

Exact backpropagation gradients and a hand-rolled bias-corrected ADAM step.
Parameters are immutable snapshots; every update returns new objects, so any
number of controller rollouts can read a snapshot while training produces the
next one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

LAYER_SIZES = (6, 32, 32, 4)
N_PARAMS = sum(m * n + m for n, m in zip(LAYER_SIZES[:-1], LAYER_SIZES[1:]))  # 1412

CHECKPOINT_VERSION = 1
ARCHITECTURE_TAG = "mlp-6-32-32-4-tanh"


@dataclass(frozen=True)
class MlpParams:
    w1: np.ndarray  # (32, 6)
    b1: np.ndarray  # (32,)
    w2: np.ndarray  # (32, 32)
    b2: np.ndarray  # (32,)
    w3: np.ndarray  # (4, 32)
    b3: np.ndarray  # (4,)

    def __post_init__(self):
        shapes = [(32, 6), (32,), (32, 32), (32,), (4, 32), (4,)]
        for arr, shape in zip(self._arrays(), shapes):
            if arr.shape != shape:
                raise ValueError(f"bad parameter shape {arr.shape}, expected {shape}")

    def _arrays(self):
        return (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays()])

    @staticmethod
    def unflatten(flat: np.ndarray) -> "MlpParams":
        if flat.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters, got {flat.shape}")
        arrs, off = [], 0
        for shape in [(32, 6), (32,), (32, 32), (32,), (4, 32), (4,)]:
            size = int(np.prod(shape))
            arrs.append(flat[off : off + size].reshape(shape))
            off += size
        return MlpParams(*arrs)


def init_params(seed: int = 0) -> MlpParams:
    """Fan-in-scaled uniform initialization."""
    rng = np.random.default_rng(seed)

    def layer(m, n):
        bound = 1.0 / np.sqrt(n)
        return rng.uniform(-bound, bound, size=(m, n)), rng.uniform(-bound, bound, size=m)

    w1, b1 = layer(32, 6)
    w2, b2 = layer(32, 32)
    w3, b3 = layer(4, 32)
    return MlpParams(w1, b1, w2, b2, w3, b3)


def forward(p: MlpParams, x: np.ndarray) -> np.ndarray:
    """Single-input forward pass; x is a 6-vector."""
    h1 = np.tanh(p.w1 @ x + p.b1)
    h2 = np.tanh(p.w2 @ h1 + p.b2)
    return p.w3 @ h2 + p.b3


def forward_batch(p: MlpParams, xs: np.ndarray) -> np.ndarray:
    """Batched forward pass; xs is (n, 6), returns (n, 4)."""
    h1 = np.tanh(xs @ p.w1.T + p.b1)
    h2 = np.tanh(h1 @ p.w2.T + p.b2)
    return h2 @ p.w3.T + p.b3


def mse_gradient(p: MlpParams, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, float]:
    """Gradient of mean ||y - f(x)||^2 over the batch, plus the batch MSE.

    Returns the gradient flattened to the parameter vector layout.
    """
    xs = np.atleast_2d(xs)
    ys = np.atleast_2d(ys)
    n = xs.shape[0]
    if n == 0:
        raise ValueError("empty batch")

    h1 = np.tanh(xs @ p.w1.T + p.b1)
    h2 = np.tanh(h1 @ p.w2.T + p.b2)
    out = h2 @ p.w3.T + p.b3

    err = out - ys  # (n, 4)
    mse = float(np.mean(np.sum(err**2, axis=1)))

    # d(mean ||err||^2)/d out = 2 err / n
    g_out = 2.0 * err / n
    g_w3 = g_out.T @ h2
    g_b3 = g_out.sum(axis=0)
    g_h2 = (g_out @ p.w3) * (1.0 - h2**2)
    g_w2 = g_h2.T @ h1
    g_b2 = g_h2.sum(axis=0)
    g_h1 = (g_h2 @ p.w2) * (1.0 - h1**2)
    g_w1 = g_h1.T @ xs
    g_b1 = g_h1.sum(axis=0)

    grad = np.concatenate(
        [g_w1.ravel(), g_b1, g_w2.ravel(), g_b2, g_w3.ravel(), g_b3]
    )
    return grad, mse


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def zeros(beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return AdamState(m=np.zeros(N_PARAMS), v=np.zeros(N_PARAMS), t=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(
    p: MlpParams, state: AdamState, grad: np.ndarray, lr: float
) -> tuple[MlpParams, AdamState]:
    """Bias-corrected ADAM update; rejects non-finite gradients."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    theta = p.flatten() - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return MlpParams.unflatten(theta), replace(state, m=m, v=v, t=t)


def flop_count() -> dict:
    """Per-layer FLOPs under the 2MN-M matrix-vector rule.

    Each hidden layer adds M bias additions and M tanh evaluations; the
    output layer is linear.  The per-row sum is reported alongside the
    figure printed in the reference accounting (2,688), which differs.
    """
    rows = []
    for i, (n, m) in enumerate(zip(LAYER_SIZES[:-1], LAYER_SIZES[1:])):
        matvec = 2 * m * n - m
        bias = m
        nonlin = m if i < len(LAYER_SIZES) - 2 else 0
        rows.append(
            {
                "layer": f"{n}-{m}",
                "matvec": matvec,
                "bias": bias,
                "nonlinear": nonlin,
                "flops": matvec + bias + nonlin,
            }
        )
    return {"rows": rows, "total": sum(r["flops"] for r in rows), "reference_total": 2688}


def save_params(p: MlpParams, path, standardizer=None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "architecture": ARCHITECTURE_TAG,
        "w1": p.w1.tolist(),
        "b1": p.b1.tolist(),
        "w2": p.w2.tolist(),
        "b2": p.b2.tolist(),
        "w3": p.w3.tolist(),
        "b3": p.b3.tolist(),
    }
    if standardizer is not None:
        doc["standardizer"] = standardizer.to_dict()
    with open(path, "w") as f:
        json.dump(doc, f)


def load_params(path):
    """Returns (MlpParams, Standardizer | None)."""
    from lwpr2.standardize import Standardizer

    with open(path) as f:
        doc = json.load(f)
    if doc.get("architecture") != ARCHITECTURE_TAG:
        raise ValueError(f"unsupported architecture {doc.get('architecture')!r}")
    p = MlpParams(
        np.array(doc["w1"]),
        np.array(doc["b1"]),
        np.array(doc["w2"]),
        np.array(doc["b2"]),
        np.array(doc["w3"]),
        np.array(doc["b3"]),
    )
    std = Standardizer.from_dict(doc["standardizer"]) if "standardizer" in doc else None
    return p, std
