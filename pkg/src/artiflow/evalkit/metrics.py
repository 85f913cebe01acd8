"""Flow-prediction metrics.

RMSE is per-component over all 3N entries (stated in every report header);
cosine similarity averages over points with nonzero ground-truth flow, with
zero-norm predictions contributing 0; MAG is the mean absolute difference of
per-point norms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..artkin import FlowField

ZERO_NORM = 1e-8


@dataclass(frozen=True)
class FlowMetrics:
    rmse: float
    cosine: float
    mag: float

    def __post_init__(self):
        if self.rmse < 0 or self.mag < 0:
            raise ValueError("rmse and mag must be non-negative")


def _vectors(f) -> np.ndarray:
    return f.vectors if isinstance(f, FlowField) else np.asarray(f, dtype=float)


def flow_metrics(pred, gt) -> FlowMetrics:
    p = _vectors(pred)
    g = _vectors(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth {g.shape}")
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    pn = np.linalg.norm(p, axis=1)
    gn = np.linalg.norm(g, axis=1)
    valid = gn > ZERO_NORM
    if valid.any():
        dots = np.einsum("ij,ij->i", p[valid], g[valid])
        denom = pn[valid] * gn[valid]
        cos = np.where(pn[valid] > ZERO_NORM, dots / np.where(denom > 0, denom, 1.0), 0.0)
        cosine = float(cos.mean())
    else:
        cosine = 0.0
    mag = float(np.mean(np.abs(pn - gn)))
    return FlowMetrics(rmse=rmse, cosine=cosine, mag=mag)


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric chamfer distance (mean nearest-neighbor distance, averaged
    both ways)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))
