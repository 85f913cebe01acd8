"""Kinematic trees for articulated objects: forward kinematics, the analytic
per-point articulation-flow oracle, and joint-progress arithmetic.

Conventions:
  - every joint has a single degree of freedom (revolute or prismatic),
  - joint ranges are oriented at load time so that q_closed < q_open and a
    positive joint displacement always moves the part toward the open state,
  - flow fields are normalized by the maximum raw norm so max ||f_i|| = 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Optional, TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:  # pragma: no cover - import cycle guard, typing only
    from .synthgen.camera import CameraModel

log = logging.getLogger(__name__)

REVOLUTE = "revolute"
PRISMATIC = "prismatic"

_UNIT_TOL = 1e-9


class KinematicError(ValueError):
    """Structural problem in an object description (cycles, bad refs, ...)."""


def _as_vec3(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (3,):
        raise KinematicError(f"{name} must be a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise KinematicError(f"{name} contains non-finite values")
    return a


@dataclass(frozen=True)
class Box:
    """Oriented box in its link frame."""

    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec3(self.center, "box center"))
        he = _as_vec3(self.half_extents, "box half_extents")
        if np.any(he <= 0):
            raise KinematicError(f"box half_extents must be positive, got {he}")
        object.__setattr__(self, "half_extents", he)
        R = np.asarray(self.rotation, dtype=float)
        if R.shape != (3, 3):
            raise KinematicError(f"box rotation must be 3x3, got {R.shape}")
        object.__setattr__(self, "rotation", R)


@dataclass(frozen=True)
class JointSpec:
    id: str
    kind: str
    axis: np.ndarray
    origin: np.ndarray
    q_closed: float
    q_open: float
    parent_link: str
    child_link: str

    def __post_init__(self):
        if self.kind not in (REVOLUTE, PRISMATIC):
            raise KinematicError(f"unsupported joint kind '{self.kind}' (joint '{self.id}')")
        axis = _as_vec3(self.axis, f"joint '{self.id}' axis")
        n = np.linalg.norm(axis)
        if abs(n - 1.0) > _UNIT_TOL:
            raise KinematicError(f"joint '{self.id}' axis must be unit length (|axis|={n:.3g})")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "origin", _as_vec3(self.origin, f"joint '{self.id}' origin"))
        if self.q_open == self.q_closed:
            raise KinematicError(f"joint '{self.id}' has zero range (q_closed == q_open)")

    @property
    def range(self) -> float:
        return self.q_open - self.q_closed

    def oriented(self) -> "JointSpec":
        """Flip axis/limits so q_closed < q_open and dq>0 opens the joint."""
        if self.q_open > self.q_closed:
            return self
        return replace(self, axis=-self.axis, q_closed=-self.q_closed, q_open=-self.q_open)


@dataclass(frozen=True)
class LinkSpec:
    id: str
    geometry: tuple[Box, ...] = ()
    parent_joint: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "geometry", tuple(self.geometry))


class Pose(NamedTuple):
    """Rigid transform: world point = rotation @ local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)


IDENTITY_POSE = Pose(np.eye(3), np.zeros(3))


@dataclass
class KinematicTree:
    links: dict[str, LinkSpec]
    joints: dict[str, JointSpec]
    root: str

    def __post_init__(self):
        self.joints = {jid: j.oriented() for jid, j in self.joints.items()}
        self._validate()

    def _validate(self):
        if self.root not in self.links:
            raise KinematicError(f"root link '{self.root}' not defined")
        children_of: dict[str, list[str]] = {}
        for jid, j in self.joints.items():
            for ref in (j.parent_link, j.child_link):
                if ref not in self.links:
                    raise KinematicError(f"joint '{jid}' references missing link '{ref}'")
            if j.child_link in children_of:
                raise KinematicError(
                    f"link '{j.child_link}' has two parent joints "
                    f"('{children_of[j.child_link]}' and '{jid}')")
            children_of[j.child_link] = jid
            if j.child_link == self.root:
                raise KinematicError(f"joint '{jid}' makes the root link a child")
        # reachability / cycle check via walk from root
        seen = {self.root}
        frontier = [self.root]
        by_parent: dict[str, list[JointSpec]] = {}
        for j in self.joints.values():
            by_parent.setdefault(j.parent_link, []).append(j)
        while frontier:
            link = frontier.pop()
            for j in by_parent.get(link, ()):
                if j.child_link in seen:
                    raise KinematicError(f"cycle detected at link '{j.child_link}'")
                seen.add(j.child_link)
                frontier.append(j.child_link)
        missing = set(self.links) - seen
        if missing:
            raise KinematicError(f"links not reachable from root: {sorted(missing)}")

    # -- traversal helpers -------------------------------------------------
    def joint_for_child(self, link_id: str) -> Optional[JointSpec]:
        for j in self.joints.values():
            if j.child_link == link_id:
                return j
        return None

    def topological_links(self) -> list[str]:
        order = [self.root]
        by_parent: dict[str, list[str]] = {}
        for j in self.joints.values():
            by_parent.setdefault(j.parent_link, []).append(j.child_link)
        i = 0
        while i < len(order):
            order.extend(sorted(by_parent.get(order[i], ())))
            i += 1
        return order

    def subtree_links(self, joint_id: str) -> frozenset[str]:
        """All link ids at or below the joint's child link."""
        j = self.joints[joint_id]
        by_parent: dict[str, list[str]] = {}
        for jj in self.joints.values():
            by_parent.setdefault(jj.parent_link, []).append(jj.child_link)
        out = {j.child_link}
        frontier = [j.child_link]
        while frontier:
            link = frontier.pop()
            for ch in by_parent.get(link, ()):
                if ch not in out:
                    out.add(ch)
                    frontier.append(ch)
        return frozenset(out)

    def closed_state(self) -> "JointState":
        return JointState({jid: j.q_closed for jid, j in self.joints.items()})

    def state_at(self, joint_id: str, ratio: float) -> "JointState":
        """All joints closed except `joint_id` opened to the given ratio."""
        st = self.closed_state()
        j = self.joints[joint_id]
        st.q[joint_id] = j.q_closed + ratio * j.range
        return st


@dataclass
class JointState:
    q: dict[str, float]

    def copy(self) -> "JointState":
        return JointState(dict(self.q))


@dataclass
class PointCloudObs:
    """Single-view observation: world-frame points with per-point link labels.

    `link_ids` are indices into `link_names` (int labels keep the binary
    dataset format compact); `camera` may be None for synthetic clouds that
    were not produced by a renderer.
    """

    points: np.ndarray
    link_ids: np.ndarray
    link_names: tuple[str, ...]
    camera: Optional["CameraModel"] = None
    timestamp: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.link_ids = np.asarray(self.link_ids, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] == 0:
            raise ValueError(f"points must be non-empty Nx3, got {self.points.shape}")
        if self.link_ids.shape != (self.points.shape[0],):
            raise ValueError("link_ids must align with points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points contain non-finite coordinates")
        if self.link_ids.size and (self.link_ids.min() < 0
                                   or self.link_ids.max() >= len(self.link_names)):
            raise ValueError("link_ids out of range for link_names")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def labels(self) -> np.ndarray:
        """Per-point link name array."""
        return np.asarray(self.link_names, dtype=object)[self.link_ids]


GROUND_TRUTH = "ground_truth"
PREDICTED = "predicted"


@dataclass
class FlowField:
    """Per-point 3D flow vectors. Ground-truth fields are max-norm normalized;
    predicted fields are stored raw."""

    vectors: np.ndarray
    source: str = GROUND_TRUTH

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != 3:
            raise ValueError(f"vectors must be Nx3, got {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("flow vectors contain non-finite values")
        if self.source == GROUND_TRUTH:
            m = self.max_norm()
            if m > 0 and abs(m - 1.0) > 1e-6:
                raise ValueError(f"ground-truth flow must be max-norm 1, got {m}")

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1)

    def max_norm(self) -> float:
        return float(self.norms().max(initial=0.0))


# ---------------------------------------------------------------------------
# Forward kinematics
# ---------------------------------------------------------------------------

def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis."""
    x, y, z = axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def joint_transform(joint: JointSpec, q: float) -> Pose:
    """Child-link pose in the parent-link frame at joint value q."""
    if joint.kind == REVOLUTE:
        return Pose(rotation_about_axis(joint.axis, q), joint.origin.copy())
    return Pose(np.eye(3), joint.origin + q * joint.axis)


def forward_kinematics(tree: KinematicTree, state: JointState) -> dict[str, Pose]:
    """World pose of every link; the root pose is the identity."""
    missing = [jid for jid in tree.joints if jid not in state.q]
    if missing:
        raise KinematicError(f"state missing joint values for {sorted(missing)}")
    poses = {tree.root: IDENTITY_POSE}
    for link_id in tree.topological_links():
        if link_id == tree.root:
            continue
        j = tree.joint_for_child(link_id)
        poses[link_id] = poses[j.parent_link].compose(joint_transform(j, state.q[j.id]))
    return poses


class WorldBox(NamedTuple):
    rotation: np.ndarray
    center: np.ndarray
    half_extents: np.ndarray
    link_id: str


def pose_boxes(tree: KinematicTree, poses: Mapping[str, Pose]) -> list[WorldBox]:
    """All link geometry transformed into the world frame."""
    out = []
    for link_id in tree.topological_links():
        pose = poses[link_id]
        for box in tree.links[link_id].geometry:
            out.append(WorldBox(pose.rotation @ box.rotation,
                                pose.rotation @ box.center + pose.translation,
                                box.half_extents,
                                link_id))
    return out


def object_bounds(tree: KinematicTree, state: Optional[JointState] = None) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounds of the posed geometry (default: closed state)."""
    state = state or tree.closed_state()
    boxes = pose_boxes(tree, forward_kinematics(tree, state))
    if not boxes:
        raise KinematicError("object has no geometry")
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for b in boxes:
        # extent of a rotated box along each world axis
        ext = np.abs(b.rotation) @ b.half_extents
        lo = np.minimum(lo, b.center - ext)
        hi = np.maximum(hi, b.center + ext)
    return lo, hi


def bbox_diagonal(tree: KinematicTree, state: Optional[JointState] = None) -> float:
    lo, hi = object_bounds(tree, state)
    return float(np.linalg.norm(hi - lo))


# ---------------------------------------------------------------------------
# Articulation flow
# ---------------------------------------------------------------------------

def raw_point_velocities(tree: KinematicTree, state: JointState, points: np.ndarray,
                         point_links: Iterable[str], target_joint: str,
                         poses: Optional[Mapping[str, Pose]] = None) -> np.ndarray:
    """Instantaneous world velocity of each point for dq > 0 of the target
    joint; zero for points whose link is not in the joint's child subtree."""
    j = tree.joints[target_joint]
    poses = poses or forward_kinematics(tree, state)
    parent_pose = poses[j.parent_link]
    axis_w = parent_pose.rotation @ j.axis
    moving = tree.subtree_links(target_joint)
    points = np.asarray(points, dtype=float)
    vel = np.zeros_like(points)
    mask = np.fromiter((l in moving for l in point_links), dtype=bool, count=len(points))
    if not mask.any():
        return vel
    if j.kind == PRISMATIC:
        vel[mask] = axis_w
    else:
        pivot_w = parent_pose.rotation @ j.origin + parent_pose.translation
        vel[mask] = np.cross(axis_w, points[mask] - pivot_w)
    return vel


def ground_truth_flow(tree: KinematicTree, state: JointState, obs: PointCloudObs,
                      target_joint: str) -> FlowField:
    """Analytic articulation flow of the observed points, normalized so the
    largest raw norm becomes 1. Points on links outside the target joint's
    subtree get exactly zero flow."""
    if target_joint not in tree.joints:
        raise KinematicError(f"unknown target joint '{target_joint}'")
    raw = raw_point_velocities(tree, state, obs.points, obs.labels(), target_joint)
    m = np.linalg.norm(raw, axis=1).max(initial=0.0)
    if m > 0:
        raw = raw / m
    return FlowField(raw, source=GROUND_TRUTH)


# ---------------------------------------------------------------------------
# Joint progress and episode metrics
# ---------------------------------------------------------------------------

def open_ratio(tree: KinematicTree, joint: str, state: JointState) -> float:
    """Joint progress in [0, 1] from fully closed to fully open."""
    j = tree.joints[joint]
    r = (state.q[joint] - j.q_closed) / j.range
    if r < -1e-12 or r > 1.0 + 1e-12:
        log.warning("open_ratio %.4f outside [0,1] for joint '%s'; clamping", r, joint)
    return float(min(1.0, max(0.0, r)))


def normalized_distance(q_end: float, q_closed: float, q_open: float) -> float:
    """Distance traveled from the closed state, normalized by the joint range
    (1.0 means fully open). See also goal_gap()."""
    rng = abs(q_open - q_closed)
    if rng == 0:
        raise ValueError("joint has zero range")
    return abs(q_end - q_closed) / rng


def goal_gap(q_end: float, q_closed: float, q_open: float) -> float:
    """Fraction of the range still remaining to fully open (lower is better)."""
    return 1.0 - normalized_distance(q_end, q_closed, q_open)


def is_success(q_end: float, q_closed: float, q_open: float, threshold: float = 0.1) -> bool:
    """An episode succeeds when less than `threshold` of the range remains."""
    return goal_gap(q_end, q_closed, q_open) < threshold


# ---------------------------------------------------------------------------
# Whole-object transforms (used by invariance checks)
# ---------------------------------------------------------------------------

def translate_tree(tree: KinematicTree, offset) -> KinematicTree:
    """Rigidly translate the whole object in the world frame."""
    offset = _as_vec3(offset, "offset")
    links = {}
    for lid, link in tree.links.items():
        if lid == tree.root:
            geom = tuple(replace(b, center=b.center + offset) for b in link.geometry)
            links[lid] = replace(link, geometry=geom)
        else:
            links[lid] = link
    joints = {jid: (replace(j, origin=j.origin + offset) if j.parent_link == tree.root else j)
              for jid, j in tree.joints.items()}
    return KinematicTree(links=links, joints=joints, root=tree.root)


def scale_tree(tree: KinematicTree, s: float) -> KinematicTree:
    """Uniformly scale all geometry and joint origins by s > 0. Prismatic
    limits scale with the geometry; revolute limits are angles and do not."""
    if s <= 0:
        raise ValueError("scale must be positive")
    links = {lid: replace(link, geometry=tuple(
        replace(b, center=b.center * s, half_extents=b.half_extents * s)
        for b in link.geometry)) for lid, link in tree.links.items()}
    joints = {}
    for jid, j in tree.joints.items():
        if j.kind == PRISMATIC:
            joints[jid] = replace(j, origin=j.origin * s,
                                  q_closed=j.q_closed * s, q_open=j.q_open * s)
        else:
            joints[jid] = replace(j, origin=j.origin * s)
    return KinematicTree(links=links, joints=joints, root=tree.root)


def scale_state(tree: KinematicTree, state: JointState, s: float) -> JointState:
    """Joint state matching scale_tree(tree, s)."""
    q = {}
    for jid, val in state.q.items():
        q[jid] = val * s if tree.joints[jid].kind == PRISMATIC else val
    return JointState(q)


# ---------------------------------------------------------------------------
# Surface sampling (camera-free point clouds for oracle checks)
# ---------------------------------------------------------------------------

def surface_point_cloud(tree: KinematicTree, state: JointState, n: int,
                        rng: np.random.Generator) -> PointCloudObs:
    """Uniform-ish samples on the posed box surfaces with link labels."""
    boxes = pose_boxes(tree, forward_kinematics(tree, state))
    areas = []
    for b in boxes:
        hx, hy, hz = b.half_extents
        areas.append(8.0 * (hx * hy + hy * hz + hz * hx))
    areas = np.asarray(areas)
    counts = rng.multinomial(n, areas / areas.sum())
    link_names = tuple(tree.topological_links())
    name_to_idx = {nm: i for i, nm in enumerate(link_names)}
    pts, ids = [], []
    for b, cnt in zip(boxes, counts):
        if cnt == 0:
            continue
        he = b.half_extents
        face_areas = np.repeat([he[1] * he[2], he[0] * he[2], he[0] * he[1]], 2)
        faces = rng.choice(6, size=cnt, p=face_areas / face_areas.sum())
        local = rng.uniform(-1.0, 1.0, size=(cnt, 3)) * he
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        local[np.arange(cnt), axis] = sign * he[axis]
        pts.append(local @ b.rotation.T + b.center)
        ids.extend([name_to_idx[b.link_id]] * cnt)
    return PointCloudObs(points=np.concatenate(pts, axis=0),
                         link_ids=np.asarray(ids, dtype=np.int64),
                         link_names=link_names)


# ---------------------------------------------------------------------------
# Object loading
# ---------------------------------------------------------------------------

def load_object(spec) -> KinematicTree:
    """Build a KinematicTree from a procedural object spec, a URDF-subset
    document path, or a URDF string."""
    from .synthgen.objects import DoorSpec, PrismaticSpec, make_door, make_prismatic_object
    from .urdf import load_urdf

    if isinstance(spec, KinematicTree):
        return spec
    if isinstance(spec, DoorSpec):
        return make_door(spec)
    if isinstance(spec, PrismaticSpec):
        return make_prismatic_object(spec)
    if isinstance(spec, (str, Path)):
        return load_urdf(spec)
    raise KinematicError(f"cannot build an object from {type(spec).__name__}")
