"""The history-aware conditional flow-diffusion model.

The current observation is encoded per point from (position, noisy flow)
pairs; a global latent summarizing the previous (observation, flow) pair
gates every decoder layer of that encoder multiplicatively. When no history
exists, a learnable start vector stands in for the latent. A transformer
denoiser over the per-point features predicts the injected noise, and flows
are recovered by full ancestral sampling over the schedule.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from ..artkin import FlowField, PointCloudObs
from ..synthgen.history import HistoryState
from .nets import CurrentEncoder, Denoiser, HistoryEncoder
from .schedule import DiffusionSchedule, NoisedSample, make_schedule

Z0_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_points: int = 1200
    d_latent: int = 128
    d_feat: int = 128
    dit_hidden: int = 128
    dit_layers: int = 5
    dit_heads: int = 4
    timesteps: int = 100
    use_history: bool = True


@dataclass
class HistoryLatent:
    z: np.ndarray
    is_start: bool

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.z)):
            raise ValueError("history latent contains non-finite values")


class FlowModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = CurrentEncoder(config.n_points, config.d_latent, config.d_feat)
        self.history_encoder = HistoryEncoder(config.d_latent)
        self.z0 = nn.Parameter(torch.randn(config.d_latent) * Z0_INIT_STD)
        self.denoiser = Denoiser(config.d_feat + 3, config.dit_hidden,
                                 config.dit_layers, config.dit_heads)
        self.schedule: DiffusionSchedule = make_schedule(config.timesteps)
        self.register_buffer("betas", torch.tensor(self.schedule.betas, dtype=torch.float32))
        self.register_buffer("alphas", torch.tensor(self.schedule.alphas, dtype=torch.float32))
        self.register_buffer("alpha_bars",
                             torch.tensor(self.schedule.alpha_bars, dtype=torch.float32))
        # which conditioning paths ran (start vector vs history encoder)
        self.path_counts = {"start": 0, "history": 0}

    @property
    def dtype(self) -> torch.dtype:
        return self.z0.dtype

    # -- conditioning --------------------------------------------------------
    def latent_for(self, hist_points: Optional[torch.Tensor],
                   hist_flow: Optional[torch.Tensor], batch: int) -> torch.Tensor:
        """History latent for a homogeneous batch (all with or all without)."""
        if hist_points is None or not self.config.use_history:
            self.path_counts["start"] += batch
            return self.z0.unsqueeze(0).expand(batch, -1)
        self.path_counts["history"] += batch
        return self.history_encoder(hist_points, hist_flow)

    def predict(self, points: torch.Tensor, noisy_flow: torch.Tensor,
                t: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """eps-hat for a batch: encoder -> gated features (+ raw noisy flow)
        -> denoiser."""
        feats = self.encoder(points, noisy_flow, z)
        return self.denoiser(torch.cat([feats, noisy_flow], dim=-1), t)

    # -- numpy-facing single-sample operations --------------------------------
    def _to_t(self, arr: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(np.asarray(arr), dtype=self.dtype)

    def encode_history(self, history: Optional[HistoryState]) -> HistoryLatent:
        """Latent for one history (or the learnable start vector if absent)."""
        with torch.no_grad():
            if history is None or not self.config.use_history:
                return HistoryLatent(z=self.z0.detach().cpu().numpy().copy(), is_start=True)
            if not (np.all(np.isfinite(history.points)) and np.all(np.isfinite(history.flow))):
                raise ValueError("history contains non-finite values")
            z = self.history_encoder(self._to_t(history.points).unsqueeze(0),
                                     self._to_t(history.flow).unsqueeze(0))
        return HistoryLatent(z=z.squeeze(0).cpu().numpy(), is_start=False)

    def encode_current(self, sample: NoisedSample, latent: HistoryLatent) -> np.ndarray:
        """Per-point features for one noised sample: the gated encoder output
        with the sample's noisy flow appended (width d_feat + 3), which is the
        token array the denoiser consumes."""
        if latent.z.shape[0] != self.config.d_latent:
            raise ValueError(f"latent dim {latent.z.shape[0]} does not match "
                             f"model d_latent {self.config.d_latent}")
        if sample.points is None:
            raise ValueError("encode_current needs the sample's points")
        with torch.no_grad():
            noisy = self._to_t(sample.noisy_flow).unsqueeze(0)
            feats = self.encoder(self._to_t(sample.points).unsqueeze(0), noisy,
                                 self._to_t(latent.z).unsqueeze(0))
            feats = torch.cat([feats, noisy], dim=-1)
        return feats.squeeze(0).cpu().numpy()

    def predict_noise(self, features: np.ndarray, t: int) -> np.ndarray:
        """Per-point noise prediction (N, 3) from encoded features."""
        with torch.no_grad():
            eps = self.denoiser(self._to_t(features).unsqueeze(0),
                                torch.tensor([t], dtype=torch.long))
        return eps.squeeze(0).cpu().numpy()

    # -- ancestral sampling ----------------------------------------------------
    def sample_batch(self, points: torch.Tensor, z: torch.Tensor,
                     seeds: Sequence[int]) -> torch.Tensor:
        """Reverse-diffuse a batch of clouds (B, N, 3); one torch.Generator per
        row so each draw is reproducible independently of batch composition."""
        B, N, _ = points.shape
        gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
        def noise() -> torch.Tensor:
            return torch.stack([torch.randn(N, 3, generator=g, dtype=self.dtype)
                                for g in gens])
        x = noise()
        with torch.no_grad():
            for ti in range(self.schedule.T, 0, -1):
                t = torch.full((B,), ti, dtype=torch.long)
                eps = self.predict(points, x, t, z)
                ab = self.alpha_bars[ti - 1]
                a = self.alphas[ti - 1]
                b = self.betas[ti - 1]
                x = (x - b / torch.sqrt(1.0 - ab) * eps) / torch.sqrt(a)
                if ti > 1:
                    x = x + torch.sqrt(b) * noise()
        return x

    def sample_flow(self, obs: PointCloudObs, history: Optional[HistoryState],
                    k: int, rng: np.random.Generator) -> list[FlowField]:
        """k independent ancestral draws conditioned on (obs, history)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if obs.n != self.config.n_points:
            raise ValueError(f"observation has {obs.n} points, model expects "
                             f"{self.config.n_points}")
        seeds = [int(s) for s in rng.integers(0, 2 ** 62, size=k)]
        points = self._to_t(obs.points).unsqueeze(0).expand(k, -1, -1)
        if history is not None and self.config.use_history:
            z = self.history_encoder(self._to_t(history.points).unsqueeze(0),
                                     self._to_t(history.flow).unsqueeze(0))
            z = z.expand(k, -1)
        else:
            z = self.z0.unsqueeze(0).expand(k, -1)
        with torch.no_grad():
            flows = self.sample_batch(points, z, seeds)
        return [FlowField(flows[i].cpu().numpy().astype(float), source="predicted")
                for i in range(k)]


# ---------------------------------------------------------------------------
# Spec-level convenience wrappers
# ---------------------------------------------------------------------------

def encode_history(model: FlowModel, history: Optional[HistoryState]) -> HistoryLatent:
    return model.encode_history(history)


def encode_current(model: FlowModel, sample: NoisedSample,
                   latent: HistoryLatent) -> np.ndarray:
    return model.encode_current(sample, latent)


def predict_noise(model: FlowModel, features: np.ndarray, t: int) -> np.ndarray:
    return model.predict_noise(features, t)


def sample_flow(obs: PointCloudObs, history: Optional[HistoryState], k: int,
                model: "FlowModel | str | Path", rng: np.random.Generator) -> list[FlowField]:
    if not isinstance(model, FlowModel):
        from .train import load_checkpoint
        model = load_checkpoint(model)
    return model.sample_flow(obs, history, k, rng)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def checkpoint_payload(model: FlowModel, epoch: int, best_wta: float,
                       train_config: Optional[dict] = None) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "state_dict": {k: v.cpu() for k, v in model.state_dict().items()},
        "schedule": {"T": model.schedule.T, "betas": model.schedule.betas.tolist()},
        "epoch": epoch,
        "best_wta": best_wta,
        "train_config": train_config or {},
    }
