"""History states: the previous observation paired with the previous flow.

During dataset generation the "previous" observation is synthesized by
perturbing the joint a small random amount toward closed and re-rendering;
the paired flow is the analytic ground truth at that perturbed state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..artkin import JointState, KinematicTree, ground_truth_flow
from .camera import CameraModel
from .render import render_observation

PERTURB_RANGE = (0.01, 0.10)  # fraction of the joint range


@dataclass
class HistoryState:
    points: np.ndarray
    flow: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.flow = np.asarray(self.flow, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] == 0:
            raise ValueError(f"history points must be non-empty Mx3, got {self.points.shape}")
        if self.flow.shape != self.points.shape:
            raise ValueError("history flow must align with history points")
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.flow))):
            raise ValueError("history contains non-finite values")
        m = float(np.linalg.norm(self.flow, axis=1).max(initial=0.0))
        if m > 1.0 + 1e-6:
            raise ValueError(f"history flow max norm {m} exceeds 1")

    @property
    def m(self) -> int:
        return self.points.shape[0]


def history_from_prediction(points: np.ndarray, flow: np.ndarray) -> HistoryState:
    """Build a history from a raw predicted field, rescaling to max-norm 1 if
    the prediction overshoots (training histories are always max-norm 1)."""
    flow = np.asarray(flow, dtype=float)
    m = float(np.linalg.norm(flow, axis=1).max(initial=0.0))
    if m > 1.0:
        flow = flow / m
    return HistoryState(points=np.asarray(points, dtype=float).copy(), flow=flow)


def synth_history(tree: KinematicTree, state: JointState, target_joint: str,
                  camera: CameraModel, rng: np.random.Generator,
                  n_points: int = 1200) -> HistoryState:
    """Render the object at a slightly-less-open state and pair it with the
    ground-truth flow there. The perturbation is clamped so the history never
    goes below fully closed."""
    joint = tree.joints[target_joint]
    delta = rng.uniform(*PERTURB_RANGE) * joint.range
    q_prev = max(joint.q_closed, state.q[target_joint] - delta)
    prev_state = state.copy()
    prev_state.q[target_joint] = q_prev
    seed = int(rng.integers(2 ** 31))
    obs = render_observation(tree, prev_state, camera, n_points, seed=seed)
    flow = ground_truth_flow(tree, prev_state, obs, target_joint)
    return HistoryState(points=obs.points, flow=flow.vectors)
