"""Dataset generation and the on-disk format.

Layout: one directory per dataset holding `manifest.json` plus `records.bin`.
Each record in records.bin is

    16-byte header: magic b"AFD1", uint32 version, uint32 N, uint32 M
    float32 points[N,3], float32 gt_flow[N,3], int32 link_ids[N]
    float32 hist_points[M,3], float32 hist_flow[M,3]   (only when M > 0)

all little-endian, so the bytes are identical across platforms. The manifest
stores per-record metadata (object spec, camera, seeds, offsets) and is byte
reproducible for a fixed DatasetSpec.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from ..artkin import (FlowField, JointState, KinematicTree, PointCloudObs,
                      ground_truth_flow, object_bounds)
from .camera import CameraBounds, CameraModel, sample_camera
from .history import HistoryState, synth_history
from .objects import (DOOR_MODES, DoorSpec, PrismaticSpec, ambiguous_door_group,
                      build_object, sample_door_spec, sample_prismatic_spec,
                      spec_from_dict)
from .render import render_observation

MAGIC = b"AFD1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")

MIXES = ("RO", "MD", "HA")


@dataclass(frozen=True)
class DatasetSpec:
    out_dir: Path
    mix: str = "RO"
    doors: int = 4
    drawers: int = 2
    samples_per_object: int = 25
    n_points: int = 1200
    seed: int = 0
    handle_prob: float = 0.5
    ambiguous_doors: bool = False  # doors come in 4-mode groups of equal dims
    camera_bounds: CameraBounds = field(default_factory=CameraBounds)

    def __post_init__(self):
        if self.mix not in MIXES:
            raise ValueError(f"mix must be one of {MIXES}, got '{self.mix}'")
        if self.doors + self.drawers <= 0:
            raise ValueError("need at least one object")
        if self.doors < 0 or self.drawers < 0 or self.samples_per_object <= 0:
            raise ValueError("object and sample counts must be positive")
        if self.n_points <= 0:
            raise ValueError("n_points must be positive")
        if self.ambiguous_doors and self.doors % len(DOOR_MODES) != 0:
            raise ValueError("ambiguous door sets need a multiple of 4 doors")
        object.__setattr__(self, "out_dir", Path(self.out_dir))

    def to_dict(self) -> dict:
        return {"mix": self.mix, "doors": self.doors, "drawers": self.drawers,
                "samples_per_object": self.samples_per_object, "n_points": self.n_points,
                "seed": self.seed, "handle_prob": self.handle_prob,
                "ambiguous_doors": self.ambiguous_doors}


@dataclass
class SampleRecord:
    object_id: str
    category: str
    target_joint: str
    open_ratio: float
    obs: PointCloudObs
    gt_flow: FlowField
    history: Optional[HistoryState] = None
    object_spec: Optional[object] = None
    seed: int = 0

    def __post_init__(self):
        if self.gt_flow.vectors.shape[0] != self.obs.n:
            raise ValueError("gt_flow row count must equal the observation point count")


# ---------------------------------------------------------------------------
# Binary record IO
# ---------------------------------------------------------------------------

def encode_record(points: np.ndarray, gt_flow: np.ndarray, link_ids: np.ndarray,
                  history: Optional[HistoryState]) -> bytes:
    n = points.shape[0]
    m = history.m if history is not None else 0
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, n, m),
             np.ascontiguousarray(points, dtype="<f4").tobytes(),
             np.ascontiguousarray(gt_flow, dtype="<f4").tobytes(),
             np.ascontiguousarray(link_ids, dtype="<i4").tobytes()]
    if history is not None:
        parts.append(np.ascontiguousarray(history.points, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(history.flow, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_record(buf: bytes) -> dict:
    magic, version, n, m = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ValueError(f"bad record magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported record version {version}")
    off = _HEADER.size
    def take(count, dtype, shape):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr
    points = take(n * 3, "<f4", (n, 3)).astype(np.float64)
    flow = take(n * 3, "<f4", (n, 3)).astype(np.float64)
    link_ids = take(n, "<i4", (n,)).astype(np.int64)
    out = {"points": points, "gt_flow": flow, "link_ids": link_ids, "history": None}
    if m > 0:
        hp = take(m * 3, "<f4", (m, 3)).astype(np.float64)
        hf = take(m * 3, "<f4", (m, 3)).astype(np.float64)
        out["history"] = HistoryState(points=hp, flow=hf)
    return out


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _record_rng(master_seed: int, index: int) -> tuple[np.random.Generator, int]:
    seq = np.random.SeedSequence(entropy=(master_seed, index))
    seed = int(seq.generate_state(1)[0])
    return np.random.Generator(np.random.PCG64(seq)), seed


def build_object_set(spec: DatasetSpec) -> list[dict]:
    """Deterministic object roster for a DatasetSpec: id, category, spec."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        entropy=(spec.seed, 0xB07))))
    objects = []
    if spec.ambiguous_doors:
        for g in range(spec.doors // len(DOOR_MODES)):
            for mi, door in enumerate(ambiguous_door_group(rng)):
                objects.append({"object_id": f"door_{g * len(DOOR_MODES) + mi:03d}",
                                "category": "door", "spec": door})
    else:
        for i in range(spec.doors):
            handle = "none" if rng.uniform() >= spec.handle_prob else \
                ("small", "large")[rng.integers(2)]
            objects.append({"object_id": f"door_{i:03d}", "category": "door",
                            "spec": sample_door_spec(rng, handle=handle)})
    for i in range(spec.drawers):
        objects.append({"object_id": f"drawer_{i:03d}", "category": "drawer",
                        "spec": sample_prismatic_spec(rng)})
    return objects


def _mix_bucket(mix: str, global_index: int) -> str:
    """closed | open | open_hist, stratified exactly by global record index."""
    if mix == "RO":
        return "open"
    if mix == "MD":
        return "closed" if global_index % 2 == 0 else "open"
    return ("closed", "open", "open_hist")[global_index % 3]


def generate_dataset(spec: DatasetSpec) -> Path:
    """Write the dataset to spec.out_dir; returns the manifest path.

    Records derive from independent per-record seeds, so generation order is
    reproducible and the manifest is byte-identical for identical specs.
    """
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    objects = build_object_set(spec)

    manifest_records = []
    offset = 0
    bin_path = out / "records.bin"
    try:
        bin_file = open(bin_path, "wb")
    except OSError as e:
        raise OSError(f"cannot write dataset records to {bin_path}: {e}") from e
    with bin_file:
        index = 0
        for obj in objects:
            tree = build_object(obj["spec"])
            target_joint = next(iter(tree.joints))
            center = np.mean(object_bounds(tree), axis=0)
            for _ in range(spec.samples_per_object):
                rng, record_seed = _record_rng(spec.seed, index)
                bucket = _mix_bucket(spec.mix, index)
                ratio = 0.0 if bucket == "closed" else float(1.0 - rng.uniform(0.0, 1.0))
                state = tree.state_at(target_joint, ratio)
                camera = sample_camera(rng, spec.camera_bounds, center=center)
                obs = render_observation(tree, state, camera, spec.n_points,
                                         seed=int(rng.integers(2 ** 31)))
                flow = ground_truth_flow(tree, state, obs, target_joint)
                history = None
                if bucket == "open_hist":
                    history = synth_history(tree, state, target_joint, camera, rng,
                                            n_points=spec.n_points)
                blob = encode_record(obs.points, flow.vectors, obs.link_ids, history)
                bin_file.write(blob)
                manifest_records.append({
                    "index": index,
                    "object_id": obj["object_id"],
                    "category": obj["category"],
                    "object_spec": obj["spec"].to_dict(),
                    "target_joint": target_joint,
                    "bucket": bucket,
                    "open_ratio": ratio,
                    "camera": camera.to_dict(),
                    "link_names": list(obs.link_names),
                    "seed": record_seed,
                    "offset": offset,
                    "length": len(blob),
                    "n": obs.n,
                    "m": history.m if history is not None else 0,
                })
                offset += len(blob)
                index += 1

    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "records": manifest_records,
    }
    manifest_path = out / "manifest.json"
    try:
        manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as e:
        raise OSError(f"cannot write manifest to {manifest_path}: {e}") from e
    return manifest_path


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------

def load_manifest(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    return json.loads(path.read_text())


def read_record(dataset_dir: str | Path, meta: dict) -> SampleRecord:
    bin_path = Path(dataset_dir) / "records.bin"
    with open(bin_path, "rb") as f:
        f.seek(meta["offset"])
        buf = f.read(meta["length"])
    payload = decode_record(buf)
    obs = PointCloudObs(points=payload["points"], link_ids=payload["link_ids"],
                        link_names=tuple(meta["link_names"]),
                        camera=CameraModel.from_dict(meta["camera"]))
    flow = FlowField(payload["gt_flow"], source="ground_truth")
    return SampleRecord(object_id=meta["object_id"], category=meta["category"],
                        target_joint=meta["target_joint"], open_ratio=meta["open_ratio"],
                        obs=obs, gt_flow=flow, history=payload["history"],
                        object_spec=spec_from_dict(meta["object_spec"]),
                        seed=meta["seed"])


def iter_records(dataset_dir: str | Path) -> Iterator[SampleRecord]:
    manifest = load_manifest(dataset_dir)
    for meta in manifest["records"]:
        yield read_record(dataset_dir, meta)


def dataset_objects(dataset_dir: str | Path) -> list[dict]:
    """Unique objects of a dataset: object_id, category, spec, target_joint."""
    manifest = load_manifest(dataset_dir)
    seen = {}
    for meta in manifest["records"]:
        if meta["object_id"] not in seen:
            seen[meta["object_id"]] = {
                "object_id": meta["object_id"],
                "category": meta["category"],
                "spec": spec_from_dict(meta["object_spec"]),
                "target_joint": meta["target_joint"],
                "camera": CameraModel.from_dict(meta["camera"]),
            }
    return list(seen.values())
