"""Loader for a small URDF subset: box collision geometry plus revolute and
prismatic joints. Anything outside the subset is rejected with the element
path so bad files fail loudly instead of half-loading.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .artkin import Box, JointSpec, KinematicError, KinematicTree, LinkSpec

SUPPORTED_JOINTS = ("revolute", "prismatic")


class UrdfError(KinematicError):
    """Unsupported or malformed URDF content, with the offending element path."""

    def __init__(self, message: str, path: str):
        super().__init__(f"{message} (at {path})")
        self.path = path


def _parse_vec3(text: str | None, path: str, default=(0.0, 0.0, 0.0)) -> np.ndarray:
    if text is None:
        return np.asarray(default, dtype=float)
    try:
        v = np.asarray([float(x) for x in text.split()], dtype=float)
    except ValueError:
        raise UrdfError(f"cannot parse '{text}' as a vector", path)
    if v.shape != (3,):
        raise UrdfError(f"expected 3 values, got {len(v)}", path)
    return v


def _rotation_from_rpy(rpy: np.ndarray) -> np.ndarray:
    r, p, y = rpy
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
    Ry = np.array([[cp, 0, sp], [0, 1.0, 0], [-sp, 0, cp]])
    Rx = np.array([[1.0, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz @ Ry @ Rx


def _parse_link(el: ET.Element, path: str) -> LinkSpec:
    name = el.get("name")
    if not name:
        raise UrdfError("link without a name", path)
    boxes = []
    for ci, coll in enumerate(el.findall("collision")):
        cpath = f"{path}/collision[{ci}]"
        origin_el = coll.find("origin")
        xyz = _parse_vec3(origin_el.get("xyz") if origin_el is not None else None,
                          f"{cpath}/origin")
        rpy = _parse_vec3(origin_el.get("rpy") if origin_el is not None else None,
                          f"{cpath}/origin")
        geom = coll.find("geometry")
        if geom is None:
            raise UrdfError("collision without geometry", cpath)
        shapes = list(geom)
        if len(shapes) != 1:
            raise UrdfError("geometry must hold exactly one shape", f"{cpath}/geometry")
        shape = shapes[0]
        if shape.tag != "box":
            raise UrdfError(f"unsupported geometry '{shape.tag}' (box only)",
                            f"{cpath}/geometry/{shape.tag}")
        size = _parse_vec3(shape.get("size"), f"{cpath}/geometry/box")
        if np.any(size <= 0):
            raise UrdfError(f"box size must be positive, got {size}", f"{cpath}/geometry/box")
        boxes.append(Box(center=xyz, half_extents=size / 2.0,
                         rotation=_rotation_from_rpy(rpy)))
    return LinkSpec(id=name, geometry=tuple(boxes))


def _parse_joint(el: ET.Element, path: str) -> JointSpec:
    name = el.get("name") or path
    kind = el.get("type")
    if kind not in SUPPORTED_JOINTS:
        raise UrdfError(f"unsupported joint kind '{kind}' (joint '{name}')", path)
    parent = el.find("parent")
    child = el.find("child")
    if parent is None or parent.get("link") is None:
        raise UrdfError(f"joint '{name}' missing parent link", path)
    if child is None or child.get("link") is None:
        raise UrdfError(f"joint '{name}' missing child link", path)
    origin_el = el.find("origin")
    xyz = _parse_vec3(origin_el.get("xyz") if origin_el is not None else None, f"{path}/origin")
    rpy = _parse_vec3(origin_el.get("rpy") if origin_el is not None else None, f"{path}/origin")
    if np.any(rpy != 0):
        # a rotated joint frame has no home in the flat axis+origin joint model
        raise UrdfError(f"joint '{name}' has a rotated origin (rpy), which is unsupported",
                        f"{path}/origin")
    axis_el = el.find("axis")
    axis = _parse_vec3(axis_el.get("xyz") if axis_el is not None else "1 0 0",
                       f"{path}/axis")
    n = np.linalg.norm(axis)
    if n == 0:
        raise UrdfError(f"joint '{name}' axis is zero", f"{path}/axis")
    limit = el.find("limit")
    if limit is None or limit.get("lower") is None or limit.get("upper") is None:
        raise UrdfError(f"joint '{name}' missing limit lower/upper", f"{path}/limit")
    lower = float(limit.get("lower"))
    upper = float(limit.get("upper"))
    if lower == upper:
        raise UrdfError(f"joint '{name}' has zero range", f"{path}/limit")
    # lower is taken as the closed state, upper as fully open
    return JointSpec(id=name, kind=kind, axis=axis / n, origin=xyz,
                     q_closed=lower, q_open=upper,
                     parent_link=parent.get("link"), child_link=child.get("link"))


def load_urdf(source: str | Path) -> KinematicTree:
    """Parse a URDF-subset document (path or XML string) into a KinematicTree."""
    text = source
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and source.strip().endswith(".urdf")):
        text = Path(source).read_text()
    try:
        root = ET.fromstring(text)
    except ET.ParseError as e:
        raise UrdfError(f"XML parse failure: {e}", "robot")
    if root.tag != "robot":
        raise UrdfError(f"top-level element must be 'robot', got '{root.tag}'", root.tag)

    links: dict[str, LinkSpec] = {}
    for li, el in enumerate(root.findall("link")):
        link = _parse_link(el, f"robot/link[{li}]")
        if link.id in links:
            raise UrdfError(f"duplicate link '{link.id}'", f"robot/link[{li}]")
        links[link.id] = link

    joints: dict[str, JointSpec] = {}
    for ji, el in enumerate(root.findall("joint")):
        joint = _parse_joint(el, f"robot/joint[{ji}]")
        if joint.id in joints:
            raise UrdfError(f"duplicate joint '{joint.id}'", f"robot/joint[{ji}]")
        joints[joint.id] = joint

    if not links:
        raise UrdfError("no links defined", "robot")
    children = {j.child_link for j in joints.values()}
    roots = [lid for lid in links if lid not in children]
    if len(roots) != 1:
        raise UrdfError(f"expected exactly one root link, found {sorted(roots)}", "robot")
    return KinematicTree(links=links, joints=joints, root=roots[0])
