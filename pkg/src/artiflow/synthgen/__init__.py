from .camera import CameraBounds, CameraModel, camera_at, sample_camera
from .dataset import (DatasetSpec, SampleRecord, build_object_set, dataset_objects,
                      decode_record, encode_record, generate_dataset, iter_records,
                      load_manifest, read_record)
from .history import HistoryState, history_from_prediction, synth_history
from .objects import (DOOR_MODES, DoorSpec, PrismaticSpec, ambiguous_door_group,
                      build_object, make_door, make_prismatic_object,
                      sample_door_spec, sample_prismatic_spec, spec_from_dict)
from .render import (RenderError, farthest_point_indices, link_hit_count, raycast,
                     render_observation, visible_fraction)

__all__ = [
    "CameraBounds", "CameraModel", "camera_at", "sample_camera",
    "DatasetSpec", "SampleRecord", "build_object_set", "dataset_objects",
    "decode_record", "encode_record", "generate_dataset", "iter_records",
    "load_manifest", "read_record",
    "HistoryState", "history_from_prediction", "synth_history",
    "DOOR_MODES", "DoorSpec", "PrismaticSpec", "ambiguous_door_group",
    "build_object", "make_door", "make_prismatic_object",
    "sample_door_spec", "sample_prismatic_spec", "spec_from_dict",
    "RenderError", "farthest_point_indices", "link_hit_count", "raycast",
    "render_observation", "visible_fraction",
]
