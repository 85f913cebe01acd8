"""Network blocks: hierarchical set-abstraction encoder with multiplicatively
gated decoder layers, a global history encoder, and a transformer denoiser
conditioned on the diffusion timestep.

The denoiser uses no positional embedding, so it is permutation-equivariant
over the point tokens; the history encoder pools with max, so it is
permutation-invariant over history rows.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def mlp(dims: list[int], final_act: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2 or final_act:
            layers.append(nn.LayerNorm(dims[i + 1]))
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def farthest_points(xyz: torch.Tensor, n: int) -> torch.Tensor:
    """Batched farthest-point indices (B, n); start index 0, no gradients."""
    with torch.no_grad():
        B, N, _ = xyz.shape
        idx = torch.zeros(B, n, dtype=torch.long, device=xyz.device)
        dists = torch.linalg.vector_norm(xyz - xyz[:, :1], dim=-1)
        for i in range(1, n):
            nxt = dists.argmax(dim=1)
            idx[:, i] = nxt
            d_new = torch.linalg.vector_norm(
                xyz - xyz.gather(1, nxt.view(B, 1, 1).expand(B, 1, 3)), dim=-1)
            dists = torch.minimum(dists, d_new)
    return idx


def gather_points(data: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """data (B, N, C), idx (B, S) or (B, S, K) -> gathered rows."""
    B = data.shape[0]
    if idx.dim() == 2:
        return data.gather(1, idx.unsqueeze(-1).expand(-1, -1, data.shape[-1]))
    B, S, K = idx.shape
    flat = idx.reshape(B, S * K)
    out = data.gather(1, flat.unsqueeze(-1).expand(-1, -1, data.shape[-1]))
    return out.reshape(B, S, K, data.shape[-1])


class SetAbstraction(nn.Module):
    """FPS centroids + kNN grouping + shared MLP + max pool."""

    def __init__(self, n_centroids: int, k: int, in_channels: int, dims: list[int]):
        super().__init__()
        self.n_centroids = n_centroids
        self.k = k
        self.net = mlp([in_channels + 3] + dims)

    def forward(self, xyz: torch.Tensor, feats: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor]:
        S = min(self.n_centroids, xyz.shape[1])
        centroids = farthest_points(xyz, S)
        new_xyz = gather_points(xyz, centroids)
        d = torch.cdist(new_xyz, xyz)
        knn = d.topk(min(self.k, xyz.shape[1]), dim=-1, largest=False).indices
        grouped_xyz = gather_points(xyz, knn) - new_xyz.unsqueeze(2)
        grouped = torch.cat([grouped_xyz, gather_points(feats, knn)], dim=-1)
        out = self.net(grouped).max(dim=2).values
        return new_xyz, out


class FeaturePropagation(nn.Module):
    """Inverse-distance 3-NN interpolation up to the finer level + shared MLP."""

    def __init__(self, in_channels: int, dims: list[int]):
        super().__init__()
        self.net = mlp([in_channels] + dims)

    def forward(self, xyz_dst: torch.Tensor, xyz_src: torch.Tensor,
                feats_dst: torch.Tensor | None, feats_src: torch.Tensor) -> torch.Tensor:
        d = torch.cdist(xyz_dst, xyz_src).clamp_min(1e-10)
        nn3 = d.topk(min(3, xyz_src.shape[1]), dim=-1, largest=False)
        w = 1.0 / nn3.values
        w = w / w.sum(dim=-1, keepdim=True)
        interp = (gather_points(feats_src, nn3.indices) * w.unsqueeze(-1)).sum(dim=2)
        if feats_dst is not None:
            interp = torch.cat([feats_dst, interp], dim=-1)
        return self.net(interp)


class LatentGate(nn.Module):
    """Per-layer multiplicative injection a' = a * (W z); initialized to emit
    all-ones gates so the no-history path is untouched at the start."""

    def __init__(self, d_latent: int, d_layer: int):
        super().__init__()
        self.proj = nn.Linear(d_latent, d_layer)
        nn.init.zeros_(self.proj.weight)
        nn.init.ones_(self.proj.bias)

    def forward(self, acts: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return acts * self.proj(z).unsqueeze(1)


class CurrentEncoder(nn.Module):
    """Set-abstraction encoder over (point, noisy flow) pairs whose decoder
    layers are gated by the history latent; emits per-point features."""

    def __init__(self, n_points: int, d_latent: int = 128, d_out: int = 128):
        super().__init__()
        n1 = max(16, min(256, n_points // 4))
        n2 = max(8, min(64, n_points // 16))
        k = 16 if n_points >= 256 else 8
        self.sa1 = SetAbstraction(n1, k, in_channels=3, dims=[64, 64])
        self.sa2 = SetAbstraction(n2, k, in_channels=64, dims=[128, 128])
        self.fp2 = FeaturePropagation(128 + 64, dims=[128, 128])
        self.fp1 = FeaturePropagation(128 + 3, dims=[128, d_out])
        self.gate2 = LatentGate(d_latent, 128)
        self.gate1 = LatentGate(d_latent, d_out)

    def forward(self, points: torch.Tensor, noisy_flow: torch.Tensor,
                z: torch.Tensor) -> torch.Tensor:
        xyz = points - points.mean(dim=1, keepdim=True)
        xyz1, f1 = self.sa1(xyz, noisy_flow)
        xyz2, f2 = self.sa2(xyz1, f1)
        up1 = self.gate2(self.fp2(xyz1, xyz2, f1, f2), z)
        return self.gate1(self.fp1(xyz, xyz1, noisy_flow, up1), z)


class HistoryEncoder(nn.Module):
    """Global set encoder over (point, flow) rows -> fixed latent; the max
    pool makes it exactly permutation-invariant."""

    def __init__(self, d_latent: int = 128):
        super().__init__()
        self.pre = mlp([6, 64, 128, 256])
        self.post = mlp([256, 128, d_latent], final_act=False)

    def forward(self, points: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
        centered = points - points.mean(dim=1, keepdim=True)
        h = self.pre(torch.cat([centered, flow], dim=-1)).max(dim=1).values
        return self.post(h)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32,
                                                        device=t.device) / half)
    args = t.float().unsqueeze(-1) * freqs.unsqueeze(0)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DenoiserBlock(nn.Module):
    """Transformer block with adaptive layer-norm conditioning (zero-init)."""

    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(hidden, elementwise_affine=False)
        self.attn = nn.MultiheadAttention(hidden, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(hidden, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(hidden, hidden * 4), nn.GELU(),
                                 nn.Linear(hidden * 4, hidden))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(hidden, hidden * 6))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        h = _modulate(self.ln1(x), sh1, sc1)
        x = x + g1.unsqueeze(1) * self.attn(h, h, h, need_weights=False)[0]
        h = _modulate(self.ln2(x), sh2, sc2)
        return x + g2.unsqueeze(1) * self.mlp(h)


class Denoiser(nn.Module):
    """Transformer over per-point feature tokens; predicts per-point noise.

    The token projection sees the raw noisy flow alongside the encoder
    features (callers concatenate them), so the near-identity residual at low
    noise levels has a direct linear path to the output."""

    def __init__(self, d_feat: int = 128, hidden: int = 128, layers: int = 5,
                 heads: int = 4):
        super().__init__()
        self.in_proj = nn.Linear(d_feat, hidden)
        self.t_mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(),
                                   nn.Linear(hidden, hidden))
        self.blocks = nn.ModuleList(DenoiserBlock(hidden, heads) for _ in range(layers))
        self.ln_out = nn.LayerNorm(hidden, elementwise_affine=False)
        self.ada_out = nn.Sequential(nn.SiLU(), nn.Linear(hidden, hidden * 2))
        self.out = nn.Linear(hidden, 3)
        nn.init.zeros_(self.ada_out[1].weight)
        nn.init.zeros_(self.ada_out[1].bias)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.hidden = hidden

    def forward(self, feats: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.hidden).to(self.in_proj.weight.dtype)
        c = self.t_mlp(emb)
        x = self.in_proj(feats)
        for blk in self.blocks:
            x = blk(x, c)
        sh, sc = self.ada_out(c).chunk(2, dim=-1)
        return self.out(_modulate(self.ln_out(x), sh, sc))
