"""Procedural ambiguous articulated objects: hinged doors in four opening
modes and prismatic sliders (drawers and lids).

Geometry convention: the object front faces -y (where cameras live), x points
to the viewer's right, z is up. Doors are built so that all four modes share
bit-identical closed-state geometry when no handle is present: the mode lives
entirely in the joint (hinge side + swing sign), which is what makes a closed
door visually ambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..artkin import Box, JointSpec, KinematicError, KinematicTree, LinkSpec

DOOR_MODES = ("push_left", "push_right", "pull_left", "pull_right")

FRAME_LINK = "base"
PANEL_LINK = "panel"
DOOR_JOINT = "hinge"
SLIDE_JOINT = "slide"


@dataclass(frozen=True)
class DoorSpec:
    width: float = 0.7
    height: float = 0.9
    thickness: float = 0.04
    mode: str = "push_left"
    handle: str = "none"  # none | small | large
    frame_width: float = 0.05
    frame_depth: float = 0.06
    open_angle: float = np.pi / 2
    frame_style: str = "full"  # full rectangle, or minimal side jambs only

    def __post_init__(self):
        for name in ("width", "height", "thickness", "frame_width", "frame_depth"):
            if getattr(self, name) <= 0:
                raise KinematicError(f"door {name} must be positive")
        if self.mode not in DOOR_MODES:
            raise KinematicError(f"unknown door mode '{self.mode}'")
        if self.handle not in ("none", "small", "large"):
            raise KinematicError(f"unknown handle kind '{self.handle}'")
        if not 0 < self.open_angle <= np.pi:
            raise KinematicError("open_angle must be in (0, pi]")
        if self.frame_style not in ("full", "jambs"):
            raise KinematicError(f"unknown frame style '{self.frame_style}'")

    @property
    def hinge_side(self) -> str:
        return "left" if self.mode.endswith("left") else "right"

    @property
    def swings_away(self) -> bool:
        return self.mode.startswith("push")

    def to_dict(self) -> dict:
        return {"type": "door", "width": self.width, "height": self.height,
                "thickness": self.thickness, "mode": self.mode, "handle": self.handle,
                "frame_width": self.frame_width, "frame_depth": self.frame_depth,
                "open_angle": self.open_angle, "frame_style": self.frame_style}


@dataclass(frozen=True)
class PrismaticSpec:
    body_size: tuple[float, float, float] = (0.6, 0.4, 0.4)
    panel_size: tuple[float, float, float] = (0.64, 0.03, 0.44)
    axis: tuple[float, float, float] = (0.0, -1.0, 0.0)
    travel: float = 0.3
    mount: str = "front"  # front face (drawer) or top face (sliding lid)

    def __post_init__(self):
        if min(self.body_size) <= 0 or min(self.panel_size) <= 0:
            raise KinematicError("sizes must be positive")
        if self.travel == 0:
            raise KinematicError("slide travel must be nonzero")
        if np.linalg.norm(self.axis) == 0:
            raise KinematicError("slide axis must be nonzero")
        if self.mount not in ("front", "top"):
            raise KinematicError(f"unknown mount '{self.mount}'")

    def to_dict(self) -> dict:
        return {"type": "prismatic", "body_size": list(self.body_size),
                "panel_size": list(self.panel_size), "axis": list(self.axis),
                "travel": self.travel, "mount": self.mount}


def spec_from_dict(d: dict):
    kind = d.get("type")
    if kind == "door":
        args = {k: v for k, v in d.items() if k != "type"}
        return DoorSpec(**args)
    if kind == "prismatic":
        return PrismaticSpec(body_size=tuple(d["body_size"]), panel_size=tuple(d["panel_size"]),
                             axis=tuple(d["axis"]), travel=d["travel"],
                             mount=d.get("mount", "front"))
    raise KinematicError(f"unknown object spec type '{kind}'")


def make_door(spec: DoorSpec) -> KinematicTree:
    """Frame (root) plus a panel on a revolute hinge realizing the mode."""
    w, h, t = spec.width, spec.height, spec.thickness
    fw, fd = spec.frame_width, spec.frame_depth

    if spec.frame_style == "jambs":
        # minimal flush side posts; the panel dominates every view
        frame_boxes = (
            Box(center=(-(w / 2 + fw / 2), 0.0, 0.0), half_extents=(fw / 2, t / 2, h / 2)),
            Box(center=(w / 2 + fw / 2, 0.0, 0.0), half_extents=(fw / 2, t / 2, h / 2)),
        )
    else:
        frame_boxes = (
            # jambs, lintel, sill: a closed rectangle around the panel opening
            Box(center=(-(w / 2 + fw / 2), 0.0, 0.0),
                half_extents=(fw / 2, fd / 2, h / 2 + fw)),
            Box(center=(w / 2 + fw / 2, 0.0, 0.0),
                half_extents=(fw / 2, fd / 2, h / 2 + fw)),
            Box(center=(0.0, 0.0, h / 2 + fw / 2), half_extents=(w / 2, fd / 2, fw / 2)),
            Box(center=(0.0, 0.0, -(h / 2 + fw / 2)), half_extents=(w / 2, fd / 2, fw / 2)),
        )

    hinge_x = -w / 2 if spec.hinge_side == "left" else w / 2
    # rotation about +z swings a left-hinged panel's free edge toward +y
    # (away from the camera); flip the axis for the other three modes
    axis_sign = 1.0 if (spec.hinge_side == "left") == spec.swings_away else -1.0

    panel_center_x = w / 2 if spec.hinge_side == "left" else -w / 2
    panel_boxes = [Box(center=(panel_center_x, 0.0, 0.0), half_extents=(w / 2, t / 2, h / 2))]
    if spec.handle != "none":
        hx, hy, hz = (0.02, 0.015, 0.02) if spec.handle == "small" else (0.02, 0.02, 0.06)
        handle_x = panel_center_x + (w / 2 - 0.08) * (1 if spec.hinge_side == "left" else -1)
        panel_boxes.append(Box(center=(handle_x, -(t / 2 + hy), 0.0),
                               half_extents=(hx, hy, hz)))

    joint = JointSpec(id=DOOR_JOINT, kind="revolute", axis=(0.0, 0.0, axis_sign),
                      origin=(hinge_x, 0.0, 0.0), q_closed=0.0, q_open=spec.open_angle,
                      parent_link=FRAME_LINK, child_link=PANEL_LINK)
    return KinematicTree(
        links={FRAME_LINK: LinkSpec(id=FRAME_LINK, geometry=frame_boxes),
               PANEL_LINK: LinkSpec(id=PANEL_LINK, geometry=tuple(panel_boxes),
                                    parent_joint=DOOR_JOINT)},
        joints={DOOR_JOINT: joint},
        root=FRAME_LINK)


def make_prismatic_object(spec: PrismaticSpec) -> KinematicTree:
    """Static body plus a sliding panel; closed at q = 0, open at q = travel."""
    axis = np.asarray(spec.axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    travel = spec.travel
    if travel < 0:
        axis, travel = -axis, -travel
    bw, bd, bh = spec.body_size
    pw, pd, ph = spec.panel_size
    if spec.mount == "front":
        origin = (0.0, -(bd / 2 + pd / 2), 0.0)
    else:
        origin = (0.0, 0.0, bh / 2 + ph / 2)
    joint = JointSpec(id=SLIDE_JOINT, kind="prismatic", axis=axis, origin=origin,
                      q_closed=0.0, q_open=travel,
                      parent_link=FRAME_LINK, child_link=PANEL_LINK)
    return KinematicTree(
        links={FRAME_LINK: LinkSpec(id=FRAME_LINK, geometry=(
            Box(center=(0.0, 0.0, 0.0), half_extents=(bw / 2, bd / 2, bh / 2)),)),
               PANEL_LINK: LinkSpec(id=PANEL_LINK, geometry=(
                   Box(center=(0.0, 0.0, 0.0), half_extents=(pw / 2, pd / 2, ph / 2)),),
                   parent_joint=SLIDE_JOINT)},
        joints={SLIDE_JOINT: joint},
        root=FRAME_LINK)


def build_object(spec) -> KinematicTree:
    if isinstance(spec, DoorSpec):
        return make_door(spec)
    if isinstance(spec, PrismaticSpec):
        return make_prismatic_object(spec)
    raise KinematicError(f"unknown object spec {type(spec).__name__}")


# ---------------------------------------------------------------------------
# Random object samplers (objects stay within roughly unit scale so that
# normalized policy thresholds mean the same thing across objects)
# ---------------------------------------------------------------------------

def sample_door_spec(rng: np.random.Generator, mode: Optional[str] = None,
                     handle: Optional[str] = None) -> DoorSpec:
    if mode is None:
        mode = DOOR_MODES[rng.integers(len(DOOR_MODES))]
    if handle is None:
        handle = ("none", "small", "large")[rng.integers(3)]
    return DoorSpec(width=float(rng.uniform(0.45, 0.75)),
                    height=float(rng.uniform(0.65, 0.9)),
                    thickness=float(rng.uniform(0.03, 0.05)),
                    mode=mode, handle=handle)


def sample_prismatic_spec(rng: np.random.Generator) -> PrismaticSpec:
    bw = float(rng.uniform(0.4, 0.7))
    bd = float(rng.uniform(0.3, 0.5))
    bh = float(rng.uniform(0.3, 0.5))
    travel = float(rng.uniform(0.15, 0.35))
    if rng.uniform() < 0.75:  # drawer pulling toward the camera
        return PrismaticSpec(body_size=(bw, bd, bh),
                             panel_size=(bw * 1.06, 0.03, bh * 1.06),
                             axis=(0.0, -1.0, 0.0), travel=travel, mount="front")
    return PrismaticSpec(body_size=(bw, bd, bh),  # top-sliding lid
                         panel_size=(bw * 1.06, bd * 1.06, 0.03),
                         axis=(0.0, 0.0, 1.0), travel=travel, mount="top")


def ambiguous_door_group(rng: np.random.Generator) -> list[DoorSpec]:
    """Four handle-free doors sharing dimensions, one per opening mode; their
    closed-state geometry is identical, so single closed views cannot tell
    them apart. Minimal jamb frames keep the moving panel dominant, which
    separates the modes' flow fields."""
    base = sample_door_spec(rng, mode="push_left", handle="none")
    return [DoorSpec(width=base.width, height=base.height, thickness=base.thickness,
                     mode=m, handle="none", frame_width=0.04,
                     frame_depth=base.thickness, open_angle=base.open_angle,
                     frame_style="jambs")
            for m in DOOR_MODES]
