"""Single-view depth rendering of posed box geometry.

Rays are cast from the camera through every pixel against all posed boxes
(nearest hit wins), back-projected to world points carrying the hit link's
label, and finally downsampled to an exact point count with farthest-point
sampling. Only visible surfaces ever appear, which is what produces the
self-occlusion regime the rest of the system is designed around.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..artkin import JointState, KinematicTree, PointCloudObs, forward_kinematics, pose_boxes
from .camera import CameraModel

_RAY_CHUNK = 8192
_T_EPS = 1e-9


class RenderError(RuntimeError):
    pass


def raycast(tree: KinematicTree, state: JointState, camera: CameraModel
            ) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    """Full-resolution depth hits: (points (K,3), link_idx (K,), link_names).

    K is the number of pixels whose ray hits the object; points are exact
    surface intersections in the world frame.
    """
    boxes = pose_boxes(tree, forward_kinematics(tree, state))
    link_names = tuple(tree.topological_links())
    name_to_idx = {nm: i for i, nm in enumerate(link_names)}
    box_link = np.asarray([name_to_idx[b.link_id] for b in boxes], dtype=np.int64)

    dirs = camera.ray_directions()
    origin = camera.position
    pts_out, idx_out = [], []
    for start in range(0, dirs.shape[0], _RAY_CHUNK):
        d = dirs[start:start + _RAY_CHUNK]
        best_t = np.full(d.shape[0], np.inf)
        best_box = np.full(d.shape[0], -1, dtype=np.int64)
        for bi, box in enumerate(boxes):
            o_local = box.rotation.T @ (origin - box.center)
            d_local = d @ box.rotation
            # robust slab test; tiny direction components are clamped away from 0
            d_safe = np.where(np.abs(d_local) < 1e-12,
                              np.where(d_local < 0, -1e-12, 1e-12), d_local)
            t1 = (-box.half_extents - o_local) / d_safe
            t2 = (box.half_extents - o_local) / d_safe
            tnear = np.minimum(t1, t2).max(axis=1)
            tfar = np.maximum(t1, t2).min(axis=1)
            hit = (tnear <= tfar) & (tnear > _T_EPS)
            closer = hit & (tnear < best_t)
            best_t[closer] = tnear[closer]
            best_box[closer] = bi
        got = best_box >= 0
        if got.any():
            pts_out.append(origin + best_t[got, None] * d[got])
            idx_out.append(box_link[best_box[got]])
    if not pts_out:
        raise RenderError("empty render: object outside the camera frustum")
    return np.concatenate(pts_out), np.concatenate(idx_out), link_names


def farthest_point_indices(points: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Classic farthest-point downsampling; deterministic given the start index."""
    count = points.shape[0]
    if n >= count:
        # cycle indices so the caller still gets exactly n rows
        return np.resize(np.arange(count), n)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start % count
    dists = np.linalg.norm(points - points[chosen[0]], axis=1)
    for i in range(1, n):
        idx = int(np.argmax(dists))
        chosen[i] = idx
        np.minimum(dists, np.linalg.norm(points - points[idx], axis=1), out=dists)
    return chosen


def render_observation(tree: KinematicTree, state: JointState, camera: CameraModel,
                       n_points: int, seed: int = 0, timestamp: int = 0) -> PointCloudObs:
    """Depth render downsampled to exactly n_points via farthest-point sampling."""
    if n_points <= 0:
        raise ValueError("n_points must be positive")
    points, link_idx, link_names = raycast(tree, state, camera)
    start = int(np.random.Generator(np.random.PCG64(seed)).integers(points.shape[0]))
    keep = farthest_point_indices(points, n_points, start=start)
    return PointCloudObs(points=points[keep], link_ids=link_idx[keep],
                         link_names=link_names, camera=camera, timestamp=timestamp)


def visible_fraction(tree: KinematicTree, state: JointState, camera: CameraModel,
                     link: str, reference_count: Optional[int] = None) -> float:
    """Fraction of rays hitting `link`, optionally relative to a reference count."""
    _, link_idx, link_names = raycast(tree, state, camera)
    count = int((link_idx == link_names.index(link)).sum())
    if reference_count:
        return count / reference_count
    total = camera.resolution[0] * camera.resolution[1]
    return count / total


def link_hit_count(tree: KinematicTree, state: JointState, camera: CameraModel,
                   link: str) -> int:
    try:
        _, link_idx, link_names = raycast(tree, state, camera)
    except RenderError:
        return 0
    return int((link_idx == link_names.index(link)).sum())
