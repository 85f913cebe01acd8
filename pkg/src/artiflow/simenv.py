"""Quasi-static articulation environment with a suction-style point gripper.

Contact physics is replaced by projection dynamics: a commanded motion moves
the target joint in proportion to the command's projection onto the attachment
point's instantaneous tangent, capped at 5% of the joint range per step. This
keeps episodes deterministic and makes failures attributable to prediction
quality rather than simulator noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .artkin import (FlowField, JointState, KinematicTree, PointCloudObs, Pose,
                     bbox_diagonal, forward_kinematics, ground_truth_flow,
                     open_ratio, pose_boxes, raw_point_velocities)
from .synthgen.camera import CameraModel
from .synthgen.render import render_observation

STEP_FRACTION = 0.05        # joint range advanced by a perfectly aligned command
CAPTURE_RADIUS = 0.02       # in units of the object bounding-box diagonal


@dataclass
class ActionResult:
    g_cur: np.ndarray
    dq: float
    contact_ok: bool


@dataclass
class ContactResult:
    contact_ok: bool
    link_id: Optional[str] = None
    world_point: Optional[np.ndarray] = None


@dataclass
class EnvState:
    tree: KinematicTree
    q: JointState
    target_joint: str
    camera: CameraModel
    gripper: Optional[tuple[str, np.ndarray]] = None  # (link id, point in link frame)
    step_count: int = 0
    obs_seed: int = 0
    diag: float = field(init=False)

    def __post_init__(self):
        self.diag = bbox_diagonal(self.tree)

    # -- derived quantities --------------------------------------------------
    def poses(self) -> dict[str, Pose]:
        return forward_kinematics(self.tree, self.q)

    def attachment_world(self) -> Optional[np.ndarray]:
        if self.gripper is None:
            return None
        link, local = self.gripper
        return self.poses()[link].apply(local)

    def open_ratio(self) -> float:
        return open_ratio(self.tree, self.target_joint, self.q)

    def goal_gap(self) -> float:
        return 1.0 - self.open_ratio()


def reset(tree: KinematicTree, target_joint: str, init_ratio: float = 0.0,
          camera: Optional[CameraModel] = None, obs_seed: int = 0) -> EnvState:
    if target_joint not in tree.joints:
        raise KeyError(f"unknown target joint '{target_joint}'")
    if camera is None:
        from .synthgen.camera import camera_at
        from .artkin import object_bounds
        center = np.mean(object_bounds(tree), axis=0)
        camera = camera_at(center, np.deg2rad(20.0), np.deg2rad(25.0), 1.8)
    q = tree.state_at(target_joint, float(np.clip(init_ratio, 0.0, 1.0)))
    return EnvState(tree=tree, q=q, target_joint=target_joint, camera=camera,
                    obs_seed=obs_seed)


def _closest_surface_point(box_rot: np.ndarray, box_center: np.ndarray,
                           half_extents: np.ndarray, p: np.ndarray
                           ) -> tuple[np.ndarray, float]:
    """Nearest point on the box *surface* (interior points project to a face)."""
    local = box_rot.T @ (p - box_center)
    clamped = np.clip(local, -half_extents, half_extents)
    if np.any(np.abs(local) > half_extents):
        surf = clamped
    else:
        # inside: push out through the closest face
        surf = local.copy()
        gaps = half_extents - np.abs(local)
        ax = int(np.argmin(gaps))
        surf[ax] = np.sign(local[ax]) * half_extents[ax] if local[ax] != 0 else half_extents[ax]
    world = box_rot @ surf + box_center
    return world, float(np.linalg.norm(world - p))


def attach(env: EnvState, world_point) -> ContactResult:
    """Snap the suction gripper to the nearest surface point within the
    capture radius; nearest-link ties break by link id order."""
    p = np.asarray(world_point, dtype=float)
    poses = env.poses()
    best: Optional[tuple[float, str, np.ndarray]] = None
    for box in sorted(pose_boxes(env.tree, poses), key=lambda b: b.link_id):
        surf, dist = _closest_surface_point(box.rotation, box.center, box.half_extents, p)
        if best is None or dist < best[0] - 1e-12:
            best = (dist, box.link_id, surf)
    radius = CAPTURE_RADIUS * env.diag
    if best is None or best[0] > radius:
        env.gripper = None
        return ContactResult(contact_ok=False)
    _, link, surf = best
    env.gripper = (link, poses[link].inverse_apply(surf))
    return ContactResult(contact_ok=True, link_id=link, world_point=surf)


def detach(env: EnvState) -> None:
    env.gripper = None


def step(env: EnvState, direction) -> ActionResult:
    """Move the gripper along `direction`; the joint advances by the command's
    projection on the attachment tangent, up to 5% of range per step."""
    if env.gripper is None:
        raise RuntimeError("cannot step: gripper is not attached")
    d = np.asarray(direction, dtype=float)
    dn = np.linalg.norm(d)
    if dn == 0:
        raise ValueError("direction must be nonzero")
    d = d / dn

    joint = env.tree.joints[env.target_joint]
    link, local = env.gripper
    before = env.attachment_world()

    vel = raw_point_velocities(env.tree, env.q, before[None, :], [link],
                               env.target_joint)[0]
    vn = np.linalg.norm(vel)
    cap = STEP_FRACTION * joint.range
    if vn == 0:
        dq = 0.0  # static link (or exactly on the hinge axis): nothing to move
    else:
        dq_raw = cap * float(d @ (vel / vn))
        q_now = env.q.q[env.target_joint]
        dq = float(np.clip(dq_raw, -cap, cap))
        dq = float(np.clip(dq, joint.q_closed - q_now, joint.q_open - q_now))
    env.q.q[env.target_joint] += dq
    env.step_count += 1
    after = env.attachment_world()
    return ActionResult(g_cur=after - before, dq=dq, contact_ok=True)


def observe(env: EnvState, n_points: int) -> PointCloudObs:
    """Render the current state from the episode camera."""
    return render_observation(env.tree, env.q, env.camera, n_points,
                              seed=env.obs_seed + env.step_count,
                              timestamp=env.step_count)


class OracleSampler:
    """Flow 'sampler' that returns the analytic ground truth for the current
    environment state; used for sanity rollouts and feasibility filtering."""

    def __init__(self, env: EnvState):
        self.env = env
        self.n_points = None  # any observation size works

    def sample(self, obs: PointCloudObs, history, k: int = 1) -> list[FlowField]:
        f = ground_truth_flow(self.env.tree, self.env.q, obs, self.env.target_joint)
        return [f] * k


def feasibility_filter(tree: KinematicTree, target_joint: str,
                       camera: Optional[CameraModel] = None,
                       config=None, n_points: int = 256, obs_seed: int = 0) -> bool:
    """True iff a ground-truth-flow rollout opens the object within the step
    budget. Objects failing this are excluded from policy evaluation."""
    from .policy import PolicyConfig, rollout

    config = config or PolicyConfig()
    env = reset(tree, target_joint, 0.0, camera, obs_seed=obs_seed)
    trace = rollout(env, OracleSampler(env), config, n_points=n_points)
    return trace.success
