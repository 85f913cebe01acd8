from .model import (FlowModel, HistoryLatent, ModelConfig, encode_current,
                    encode_history, predict_noise, sample_flow)
from .schedule import (DiffusionSchedule, NoisedSample, add_noise, make_schedule,
                       DEFAULT_T)
from .train import (DiffusionSampler, TrainConfig, gradient_check, load_checkpoint,
                    load_training_arrays, rmse_flow, save_checkpoint, train, wta_rmse)

__all__ = [
    "FlowModel", "HistoryLatent", "ModelConfig", "encode_current", "encode_history",
    "predict_noise", "sample_flow",
    "DiffusionSchedule", "NoisedSample", "add_noise", "make_schedule", "DEFAULT_T",
    "DiffusionSampler", "TrainConfig", "gradient_check", "load_checkpoint",
    "load_training_arrays", "rmse_flow", "save_checkpoint", "train", "wta_rmse",
]
