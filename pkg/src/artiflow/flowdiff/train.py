"""Training loop, winner-take-all evaluation, checkpoints, and the sampler
wrapper used by the policy."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from ..artkin import FlowField, PointCloudObs
from ..synthgen.dataset import SampleRecord, iter_records
from ..synthgen.history import HistoryState
from .model import FlowModel, ModelConfig, checkpoint_payload
from .schedule import make_schedule


@dataclass
class TrainConfig:
    epochs: int = 450
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 128
    eval_period: int = 20
    wta_k: int = 20
    seed: int = 0
    use_history: bool = True
    timesteps: int = 100
    n_wta_records: Optional[int] = 16   # subset for in-training eval; None = all
    wta_batch_clouds: int = 256

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.eval_period, self.wta_k,
               self.timesteps) <= 0 or self.lr <= 0:
            raise ValueError("training config values must be positive")


def rmse_flow(pred: np.ndarray, gt: np.ndarray) -> float:
    """Root mean squared error over all 3N flow components."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


# ---------------------------------------------------------------------------
# Dataset -> tensors
# ---------------------------------------------------------------------------

def load_training_arrays(dataset_dir: str | Path) -> dict:
    records = list(iter_records(dataset_dir))
    if not records:
        raise ValueError(f"dataset at {dataset_dir} is empty")
    n = records[0].obs.n
    for r in records:
        if r.obs.n != n:
            raise ValueError("all records must share the same point count")
        if r.history is not None and r.history.m != n:
            raise ValueError("history point count must match the observation count")
    R = len(records)
    points = np.stack([r.obs.points for r in records]).astype(np.float32)
    flows = np.stack([r.gt_flow.vectors for r in records]).astype(np.float32)
    has_hist = np.array([r.history is not None for r in records])
    hist_points = np.zeros_like(points)
    hist_flows = np.zeros_like(flows)
    for i, r in enumerate(records):
        if r.history is not None:
            hist_points[i] = r.history.points
            hist_flows[i] = r.history.flow
    return {"records": records, "n_points": n, "count": R,
            "points": torch.from_numpy(points), "flows": torch.from_numpy(flows),
            "has_hist": torch.from_numpy(has_hist),
            "hist_points": torch.from_numpy(hist_points),
            "hist_flows": torch.from_numpy(hist_flows)}


def _batch_latents(model: FlowModel, hist_points: torch.Tensor,
                   hist_flows: torch.Tensor, has_hist: torch.Tensor) -> torch.Tensor:
    """Mixed-batch conditioning: history rows go through the encoder, the rest
    get the learnable start vector."""
    B = has_hist.shape[0]
    z = model.latent_for(None, None, B).clone()
    idx = torch.nonzero(has_hist, as_tuple=False).squeeze(-1)
    if idx.numel() > 0:
        z[idx] = model.latent_for(hist_points[idx], hist_flows[idx], int(idx.numel()))
        # latent_for counted these rows as start-path too; undo the double count
        model.path_counts["start"] -= int(idx.numel())
    return z


# ---------------------------------------------------------------------------
# Winner-take-all RMSE
# ---------------------------------------------------------------------------

def wta_rmse(model: FlowModel, dataset: "str | Path | Sequence[SampleRecord]",
             k: int = 20, seed: int = 0, max_records: Optional[int] = None,
             batch_clouds: int = 256) -> float:
    """Mean over records of the best (minimum) RMSE among k independent draws.

    Per-draw seeds depend only on (seed, record index, draw index), so the
    k=1 result is a strict prefix of the k=20 result.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    records = list(iter_records(dataset)) if isinstance(dataset, (str, Path)) else list(dataset)
    if max_records is not None and len(records) > max_records:
        pick = np.linspace(0, len(records) - 1, max_records).round().astype(int)
        records = [records[i] for i in pick]
    model.eval()
    chunk = max(1, batch_clouds // k)
    best = np.full(len(records), np.inf)
    for lo in range(0, len(records), chunk):
        part = records[lo:lo + chunk]
        points, zs, seeds = [], [], []
        for ri, rec in enumerate(part):
            pt = torch.as_tensor(rec.obs.points, dtype=model.dtype)
            if rec.history is not None and model.config.use_history:
                z = model.history_encoder(
                    torch.as_tensor(rec.history.points, dtype=model.dtype).unsqueeze(0),
                    torch.as_tensor(rec.history.flow, dtype=model.dtype).unsqueeze(0))[0]
            else:
                z = model.z0.detach()
            for j in range(k):
                points.append(pt)
                zs.append(z)
                seeds.append(int(np.random.SeedSequence(
                    entropy=(seed, lo + ri, j)).generate_state(1)[0]))
        with torch.no_grad():
            flows = model.sample_batch(torch.stack(points), torch.stack(zs), seeds)
        flows = flows.cpu().numpy()
        for ri, rec in enumerate(part):
            gt = rec.gt_flow.vectors
            errs = [rmse_flow(flows[ri * k + j], gt) for j in range(k)]
            best[lo + ri] = min(errs)
    return float(best.mean())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train(dataset_dir: str | Path, config: TrainConfig,
          out_dir: Optional[str | Path] = None,
          model_config: Optional[ModelConfig] = None,
          log_fn=None) -> tuple[FlowModel, list[dict]]:
    """Minimize the noise-prediction MSE; keep the checkpoint with the best
    winner-take-all RMSE (evaluated every eval_period epochs and at the end).

    Returns the best model and the training log. When out_dir is given, the
    checkpoint and a jsonl log land there.
    """
    data = load_training_arrays(dataset_dir)
    torch.manual_seed(config.seed)
    model_config = model_config or ModelConfig(n_points=data["n_points"],
                                               timesteps=config.timesteps,
                                               use_history=config.use_history)
    if model_config.n_points != data["n_points"]:
        raise ValueError("model n_points must match the dataset")
    model = FlowModel(model_config)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr,
                            weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    order_rng = np.random.default_rng(config.seed)
    schedule = model.schedule
    sqrt_ab = torch.sqrt(torch.as_tensor(schedule.alpha_bars, dtype=torch.float32))
    sqrt_1mab = torch.sqrt(1.0 - torch.as_tensor(schedule.alpha_bars, dtype=torch.float32))

    R = data["count"]
    log: list[dict] = []
    best_wta = np.inf
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    t_start = time.time()

    def evaluate(epoch: int) -> float:
        w = wta_rmse(model, data["records"], k=config.wta_k, seed=config.seed,
                     max_records=config.n_wta_records,
                     batch_clouds=config.wta_batch_clouds)
        model.train()
        return w

    model.train()
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(R)
        losses = []
        for lo in range(0, R, config.batch_size):
            idx = torch.from_numpy(perm[lo:lo + config.batch_size].copy())
            pts = data["points"][idx]
            x0 = data["flows"][idx]
            B = pts.shape[0]
            t = torch.randint(1, schedule.T + 1, (B,), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            x_t = sqrt_ab[t - 1, None, None] * x0 + sqrt_1mab[t - 1, None, None] * eps
            z = _batch_latents(model, data["hist_points"][idx],
                               data["hist_flows"][idx], data["has_hist"][idx])
            pred = model.predict(pts, x_t, t, z)
            loss = torch.mean((pred - eps) ** 2)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at epoch {epoch}, "
                                   f"batch offset {lo}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))

        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "wta": None,
                 "time": round(time.time() - t_start, 3)}
        if epoch % config.eval_period == 0 or epoch == config.epochs:
            w = evaluate(epoch)
            entry["wta"] = w
            if w < best_wta:
                best_wta = w
                best_state = copy.deepcopy(model.state_dict())
                best_epoch = epoch
        log.append(entry)
        if log_fn:
            log_fn(entry)

    model.load_state_dict(best_state)
    model.eval()

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "checkpoint.pt", epoch=best_epoch,
                        best_wta=float(best_wta), train_config=asdict(config))
        with open(out / "train_log.jsonl", "w") as f:
            for entry in log:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
    return model, log


def save_checkpoint(model: FlowModel, path: str | Path, epoch: int = 0,
                    best_wta: float = float("nan"),
                    train_config: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint_payload(model, epoch, best_wta, train_config), path)
    return path


def load_checkpoint(path: str | Path) -> FlowModel:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    model = FlowModel(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Sampler wrapper for policy rollouts
# ---------------------------------------------------------------------------

class DiffusionSampler:
    """Draws flow fields from a trained model for the rollout policy.

    Draw j under a given conditioning always uses the same derived seed, no
    matter how draws are batched internally, so speculative prefetching (which
    amortizes the denoising loop across retries) never changes the values the
    policy sees.
    """

    def __init__(self, model: FlowModel, seed: int = 0,
                 prefetch: tuple[int, ...] = (1, 4, 8)):
        self.model = model
        self.seed = seed
        self.prefetch = prefetch
        self.n_points = model.config.n_points
        self._key = None
        self._cond_index = -1
        self._cache: list[FlowField] = []
        self._served = 0
        self._batches = 0

    def _conditioning_key(self, obs: PointCloudObs, history: Optional[HistoryState]):
        h = (history.points.tobytes(), history.flow.tobytes()) if history is not None else None
        return (obs.points.tobytes(), h)

    def _draw(self, obs: PointCloudObs, history: Optional[HistoryState], count: int):
        start = len(self._cache)
        seeds = [int(np.random.SeedSequence(
            entropy=(self.seed, self._cond_index, start + j)).generate_state(1)[0])
            for j in range(count)]
        points = torch.as_tensor(obs.points, dtype=self.model.dtype)
        points = points.unsqueeze(0).expand(count, -1, -1)
        if history is not None and self.model.config.use_history:
            z = self.model.history_encoder(
                torch.as_tensor(history.points, dtype=self.model.dtype).unsqueeze(0),
                torch.as_tensor(history.flow, dtype=self.model.dtype).unsqueeze(0))
            z = z.expand(count, -1)
        else:
            z = self.model.z0.detach().unsqueeze(0).expand(count, -1)
        with torch.no_grad():
            flows = self.model.sample_batch(points, z, seeds)
        self._cache.extend(FlowField(flows[i].cpu().numpy().astype(float),
                                     source="predicted") for i in range(count))

    def sample(self, obs: PointCloudObs, history: Optional[HistoryState],
               k: int = 1) -> list[FlowField]:
        key = self._conditioning_key(obs, history)
        if key != self._key:
            self._key = key
            self._cond_index += 1
            self._cache = []
            self._served = 0
            self._batches = 0
        while len(self._cache) < self._served + k:
            size = self.prefetch[min(self._batches, len(self.prefetch) - 1)]
            self._draw(obs, history, max(size, self._served + k - len(self._cache)))
            self._batches += 1
        out = self._cache[self._served:self._served + k]
        self._served += k
        return out


# ---------------------------------------------------------------------------
# Numerical self-check: finite-difference gradients
# ---------------------------------------------------------------------------

def gradient_check(model: FlowModel, points: np.ndarray, flow: np.ndarray,
                   history: Optional[HistoryState] = None, n_params: int = 32,
                   h: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between analytic and central finite-difference
    gradients on a random probe of scalar parameters (double precision)."""
    model = copy.deepcopy(model).double()
    model.train()
    rng = np.random.default_rng(seed)
    schedule = model.schedule
    t_val = int(rng.integers(1, schedule.T + 1))
    eps = torch.as_tensor(rng.standard_normal(flow.shape))
    ab = schedule.alpha_bars[t_val - 1]
    x_t = np.sqrt(ab) * torch.as_tensor(flow, dtype=torch.float64) \
        + np.sqrt(1 - ab) * eps
    pts = torch.as_tensor(points, dtype=torch.float64).unsqueeze(0)
    x_t = x_t.unsqueeze(0)
    t = torch.tensor([t_val], dtype=torch.long)

    def loss_value() -> torch.Tensor:
        if history is not None:
            z = model.history_encoder(
                torch.as_tensor(history.points, dtype=torch.float64).unsqueeze(0),
                torch.as_tensor(history.flow, dtype=torch.float64).unsqueeze(0))
        else:
            z = model.z0.unsqueeze(0)
        pred = model.predict(pts, x_t, t, z)
        return torch.mean((pred - eps.unsqueeze(0)) ** 2)

    loss = loss_value()
    model.zero_grad()
    loss.backward()

    named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    flat = [(n, p, i) for n, p in named for i in range(p.numel())]
    probe = rng.choice(len(flat), size=min(n_params, len(flat)), replace=False)
    worst = 0.0
    for pi in probe:
        name, param, i = flat[pi]
        analytic = float(param.grad.view(-1)[i])
        with torch.no_grad():
            orig = float(param.view(-1)[i])
            param.view(-1)[i] = orig + h
            up = float(loss_value())
            param.view(-1)[i] = orig - h
            down = float(loss_value())
            param.view(-1)[i] = orig
        fd = (up - down) / (2 * h)
        denom = max(abs(analytic), abs(fd), 1e-8)
        worst = max(worst, abs(analytic - fd) / denom)
    return worst
