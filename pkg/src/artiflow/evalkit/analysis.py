"""Multi-modality counting and occlusion sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..artkin import (KinematicTree, ground_truth_flow, object_bounds)
from ..synthgen.camera import CameraModel
from ..synthgen.history import HistoryState, history_from_prediction
from ..synthgen.render import link_hit_count, render_observation
from .metrics import flow_metrics
from ..flowdiff.train import rmse_flow

RMSE_CORRECT = 0.2     # a draw this close to ground truth counts as the true mode
RMSE_OTHER_MODE = 0.6  # a draw this far off counts as a different mode


@dataclass
class MultimodalityReport:
    per_object: dict[str, dict]
    per_category: dict[str, float]
    k: int
    thresholds: tuple[float, float]

    def flagged(self) -> list[str]:
        return [oid for oid, d in self.per_object.items() if d["multimodal"]]


def multimodality_count(sampler, objects: Sequence[dict], k: int = 50,
                        thresholds: tuple[float, float] = (RMSE_CORRECT, RMSE_OTHER_MODE),
                        n_points: int = 64, seed: int = 0,
                        open_ratio: float = 0.0) -> MultimodalityReport:
    """Draw k predictions per object at the given open ratio and flag objects
    whose draws include both a near-ground-truth sample (RMSE < lo) and a
    different-mode sample (RMSE > hi).

    `objects` entries need: object_id, category, tree or spec, target_joint,
    camera (optional; a default camera is placed if missing).
    """
    from ..synthgen.objects import build_object
    from ..synthgen.camera import camera_at

    lo, hi = thresholds
    per_object = {}
    for oi, obj in enumerate(objects):
        tree = obj.get("tree") or build_object(obj["spec"])
        joint = obj["target_joint"]
        camera = obj.get("camera")
        if camera is None:
            center = np.mean(object_bounds(tree), axis=0)
            camera = camera_at(center, np.deg2rad(20.0), np.deg2rad(25.0), 1.8)
        state = tree.state_at(joint, open_ratio)
        obs = render_observation(tree, state, camera, n_points, seed=seed + oi)
        gt = ground_truth_flow(tree, state, obs, joint)
        draws = sampler.sample(obs, None, k)
        rmses = [rmse_flow(d.vectors, gt.vectors) for d in draws]
        per_object[obj["object_id"]] = {
            "category": obj["category"],
            "rmses": rmses,
            "has_correct": bool(min(rmses) < lo),
            "has_other_mode": bool(max(rmses) > hi),
            "multimodal": bool(min(rmses) < lo and max(rmses) > hi),
        }
    per_category: dict[str, list[bool]] = {}
    for d in per_object.values():
        per_category.setdefault(d["category"], []).append(d["multimodal"])
    ratios = {c: float(np.mean(v)) for c, v in per_category.items()}
    return MultimodalityReport(per_object=per_object, per_category=ratios,
                               k=k, thresholds=(lo, hi))


@dataclass
class SweepRow:
    open_ratio: float
    panel_fraction: float
    rmse_plain: float
    cosine_plain: float
    mag_plain: float
    rmse_hist: float
    cosine_hist: float
    mag_hist: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    panel_link: str
    closed_mean: dict = field(default_factory=dict)
    open_mean: dict = field(default_factory=dict)

    def min_visibility_ratio(self) -> float:
        """Grid ratio where the moving panel is least visible (edge-on)."""
        r = min(self.rows, key=lambda row: row.panel_fraction)
        return r.open_ratio

    def row_at(self, ratio: float) -> SweepRow:
        return min(self.rows, key=lambda row: abs(row.open_ratio - ratio))


def occlusion_sweep(sampler, tree: KinematicTree, target_joint: str,
                    camera: CameraModel, ratios: Optional[Sequence[float]] = None,
                    n_points: int = 64, k: int = 1, seed: int = 0,
                    split_ratio: float = 0.1) -> SweepResult:
    """Open the object across a grid of ratios; at each grid point predict
    with and without history (history = the previous grid point's render plus
    the history-track prediction there) and record metrics alongside the
    moving panel's visibility fraction.

    Aggregates split at `split_ratio` open: closed_mean vs open_mean.
    """
    if ratios is None:
        ratios = np.linspace(0.0, 1.0, 21)
    joint = tree.joints[target_joint]
    panel_link = joint.child_link
    ref_count = link_hit_count(tree, tree.state_at(target_joint, 0.0), camera, panel_link)
    ref_count = max(ref_count, 1)

    rows: list[SweepRow] = []
    history: Optional[HistoryState] = None
    for gi, ratio in enumerate(ratios):
        state = tree.state_at(target_joint, float(ratio))
        if hasattr(sampler, "set_state"):  # state-aware oracle samplers
            sampler.set_state(state)
        obs = render_observation(tree, state, camera, n_points, seed=seed + gi)
        gt = ground_truth_flow(tree, state, obs, target_joint)
        frac = link_hit_count(tree, state, camera, panel_link) / ref_count

        plain = sampler.sample(obs, None, k)
        hist = sampler.sample(obs, history, k) if history is not None else plain
        mp = [flow_metrics(d, gt) for d in plain]
        mh = [flow_metrics(d, gt) for d in hist]
        rows.append(SweepRow(
            open_ratio=float(ratio), panel_fraction=float(frac),
            rmse_plain=float(np.mean([m.rmse for m in mp])),
            cosine_plain=float(np.mean([m.cosine for m in mp])),
            mag_plain=float(np.mean([m.mag for m in mp])),
            rmse_hist=float(np.mean([m.rmse for m in mh])),
            cosine_hist=float(np.mean([m.cosine for m in mh])),
            mag_hist=float(np.mean([m.mag for m in mh])),
        ))
        # the history fed forward is this grid point's render + its
        # history-track prediction (continuity through the occluded angle)
        history = history_from_prediction(obs.points, hist[0].vectors)

    def agg(selected: list[SweepRow]) -> dict:
        if not selected:
            return {}
        return {key: float(np.mean([getattr(r, key) for r in selected]))
                for key in ("rmse_plain", "cosine_plain", "mag_plain",
                            "rmse_hist", "cosine_hist", "mag_hist")}

    closed = [r for r in rows if r.open_ratio <= split_ratio]
    opened = [r for r in rows if r.open_ratio > split_ratio]
    return SweepResult(rows=rows, panel_link=panel_link,
                       closed_mean=agg(closed), open_mean=agg(opened))


def door_sweep_azimuth(mode: str, magnitude_deg: float = 30.0) -> float:
    """Signed camera azimuth (degrees) that puts a door's edge-on pose inside
    the sweep; the camera must sit on the side the panel swings toward."""
    return -magnitude_deg if mode in ("push_left", "pull_right") else magnitude_deg


def edge_on_ratio(tree: KinematicTree, target_joint: str,
                  camera: CameraModel) -> Optional[float]:
    """Open ratio at which a revolute panel becomes edge-on: the camera lies
    in the plane spanned by the hinge axis and the panel direction. None if
    that pose is outside the joint range."""
    from ..artkin import forward_kinematics, pose_boxes

    j = tree.joints[target_joint]
    if j.kind != "revolute":
        return None
    poses = forward_kinematics(tree, tree.closed_state())
    parent = poses[j.parent_link]
    axis_w = parent.rotation @ j.axis
    pivot_w = parent.rotation @ j.origin + parent.translation
    moving = tree.subtree_links(target_joint)
    boxes = [b for b in pose_boxes(tree, poses) if b.link_id in moving]
    centroid = np.mean([b.center for b in boxes], axis=0)

    def in_plane(v: np.ndarray) -> np.ndarray:
        v = v - axis_w * float(v @ axis_w)
        n = np.linalg.norm(v)
        return v / n if n > 0 else v

    d0 = in_plane(centroid - pivot_w)
    v = in_plane(camera.position - pivot_w)
    # d0 is the panel direction at the closed state, so the candidates are
    # deltas from q_closed (the plane contains both +v and -v)
    ang = float(np.arctan2(axis_w @ np.cross(d0, v), float(d0 @ v)))
    candidates = [ang, ang - np.pi if ang > 0 else ang + np.pi]
    ratios = sorted(a / j.range for a in candidates)
    valid = [r for r in ratios if 0.0 <= r <= 1.0]
    return valid[0] if valid else None


class GroundTruthSweepSampler:
    """State-aware oracle for sweeps: occlusion_sweep announces each grid
    state through set_state, so the returned field is the exact ground truth."""

    def __init__(self, tree: KinematicTree, target_joint: str):
        self.tree = tree
        self.target_joint = target_joint
        self._state = None

    def set_state(self, state) -> None:
        self._state = state

    def sample(self, obs, history, k: int = 1):
        if self._state is None:
            raise RuntimeError("set_state was never called")
        f = ground_truth_flow(self.tree, self._state, obs, self.target_joint)
        return [f] * k


def sweep_to_csv(result: SweepResult, path) -> None:
    import csv
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["open_ratio", "panel_fraction", "rmse_plain", "cosine_plain",
                    "mag_plain", "rmse_hist", "cosine_hist", "mag_hist"])
        for r in result.rows:
            w.writerow([r.open_ratio, r.panel_fraction, r.rmse_plain, r.cosine_plain,
                        r.mag_plain, r.rmse_hist, r.cosine_hist, r.mag_hist])
