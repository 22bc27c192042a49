"""Frozen per-channel standardization of inputs and targets.

Statistics are computed once from the system-identification dataset and never
updated afterwards; every learned component (LWPR, GMM, network) operates in
the standardized space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MIN_SCALE = 1e-8


@dataclass(frozen=True)
class Standardizer:
    x_mean: np.ndarray  # (6,)
    x_scale: np.ndarray  # (6,)
    y_mean: np.ndarray  # (4,)
    y_scale: np.ndarray  # (4,)

    @staticmethod
    def fit(xs: np.ndarray, ys: np.ndarray) -> "Standardizer":
        return Standardizer(
            x_mean=xs.mean(axis=0),
            x_scale=np.maximum(xs.std(axis=0), _MIN_SCALE),
            y_mean=ys.mean(axis=0),
            y_scale=np.maximum(ys.std(axis=0), _MIN_SCALE),
        )

    def transform_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_scale

    def transform_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_scale

    def inverse_y(self, y_std: np.ndarray) -> np.ndarray:
        return y_std * self.y_scale + self.y_mean

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean.tolist(),
            "y_scale": self.y_scale.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "Standardizer":
        return Standardizer(
            x_mean=np.array(d["x_mean"]),
            x_scale=np.array(d["x_scale"]),
            y_mean=np.array(d["y_mean"]),
            y_scale=np.array(d["y_scale"]),
        )
