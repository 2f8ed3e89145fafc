"""Euler ODE sampling from noise (t=1) to data (t=0), with optional guidance."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .positions import assign_positions, positions_tensor
from .schedule import TimestepDistribution, shift_timestep


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    num_steps: int = 64
    dist: TimestepDistribution = field(default_factory=TimestepDistribution)
    guidance_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")


def timestep_grid(cfg: SamplerConfig) -> np.ndarray:
    """Uniform grid from 1 to 0 pushed through shift_timestep; strictly decreasing."""
    return shift_timestep(np.linspace(1.0, 0.0, cfg.num_steps + 1), cfg.dist)


def euler_integrate(velocity: Callable[[Tensor, float], Tensor], z: Tensor, grid: Sequence[float]) -> Tensor:
    """z <- z + (t_{k+1} - t_k) v(z, t_k) along ``grid``."""
    for k in range(len(grid) - 1):
        v = velocity(z, float(grid[k]))
        z = z + (float(grid[k + 1]) - float(grid[k])) * v
        if not torch.isfinite(z).all():
            raise SamplingError(f"non-finite state after step {k} (t={grid[k + 1]:.4g})")
    return z


def combine_guidance(v_cond: Tensor, v_uncond: Optional[Tensor], scale: float) -> Tensor:
    """v_u + w (v_c - v_u) for w > 0, otherwise the conditional velocity."""
    if scale > 0 and v_uncond is not None:
        return v_uncond + scale * (v_cond - v_uncond)
    return v_cond


@torch.no_grad()
def sample_tokens(model, contexts: Sequence[Tensor], text_ids: Tensor, target_grid: tuple[int, int],
                  cfg: SamplerConfig, context_grids: Optional[Sequence[tuple[int, int]]] = None) -> Tensor:
    """Batched sampling of normalized target tokens.

    ``contexts`` is a list of (B, Lc_i, C) tensors, one per context image
    (empty for text-to-image). The unconditional branch used for guidance
    drops every context token and keeps the instruction.
    """
    b = text_ids.shape[0]
    L = target_grid[0] * target_grid[1]
    C = model.cfg.latent_channels
    dtype = next(model.parameters()).dtype
    if context_grids is None:
        context_grids = [target_grid] * len(contexts)
    for ctx, g in zip(contexts, context_grids):
        if ctx.shape[1] != g[0] * g[1] or ctx.shape[2] != C:
            raise ValueError(f"context tensor {tuple(ctx.shape)} does not fit grid {g} with {C} channels")
    pos_c = positions_tensor(assign_positions(target_grid, context_grids)).to(dtype)
    pos_u = positions_tensor(assign_positions(target_grid, [])).to(dtype)
    ctx_tokens = torch.cat([c.to(dtype) for c in contexts], dim=1) if contexts else None
    gen = torch.Generator().manual_seed(cfg.seed)
    z = torch.randn((b, L, C), generator=gen, dtype=torch.float64).to(dtype)
    use_uncond = cfg.guidance_scale > 0 and cfg.guidance_scale != 1.0 and ctx_tokens is not None

    def velocity(z: Tensor, t: float) -> Tensor:
        tt = torch.full((b,), t, dtype=dtype)
        tokens = z if ctx_tokens is None else torch.cat((z, ctx_tokens), dim=1)
        v_c = model(tokens, text_ids, pos_c, tt, L)
        v_u = model(z, text_ids, pos_u, tt, L) if use_uncond else None
        return combine_guidance(v_c, v_u, cfg.guidance_scale)

    return euler_integrate(velocity, z, timestep_grid(cfg))


class TokenCodec:
    """Image <-> normalized token tensors for a fixed patch size and channel stats."""

    def __init__(self, patch: int, stats, channels: int = 3):
        self.patch = patch
        self.stats = stats
        self.channels = channels

    def to_tokens(self, images: np.ndarray, dtype=torch.float32) -> tuple[Tensor, tuple[int, int]]:
        from .latentseq import encode

        grids = [encode(im, self.patch) for im in images]
        toks = np.stack([self.stats.normalize(g.tokens) for g in grids])
        return torch.from_numpy(toks).to(dtype), (grids[0].grid_h, grids[0].grid_w)

    def to_images(self, tokens: Tensor, grid: tuple[int, int], clip: bool = True) -> np.ndarray:
        from .latentseq import TokenGrid, decode

        arr = self.stats.denormalize(tokens.detach().cpu().numpy().astype(np.float32))
        imgs = np.stack([decode(TokenGrid(a, *grid), self.patch, self.channels) for a in arr])
        return np.clip(imgs, 0.0, 1.0) if clip else imgs


def sample_images(model, codec: TokenCodec, contexts: Optional[np.ndarray], text_ids: np.ndarray,
                  target_grid: tuple[int, int], cfg: SamplerConfig) -> np.ndarray:
    """One edit per row: ``contexts`` is (B, 3, H, W) or None for text-to-image."""
    dtype = next(model.parameters()).dtype
    ctx = []
    grids = []
    if contexts is not None:
        c, g = codec.to_tokens(contexts, dtype)
        ctx, grids = [c], [g]
    toks = sample_tokens(model, ctx, torch.as_tensor(text_ids), target_grid, cfg, grids)
    return codec.to_images(toks, target_grid)


def edit_loop(model, codec: TokenCodec, initial: np.ndarray, scripts: np.ndarray, cfg: SamplerConfig,
              use_context: bool = True) -> list[np.ndarray]:
    """Multi-turn editing: output k is the context of turn k+1.

    ``initial`` is (B, 3, H, W) and ``scripts`` is (B, K, T) instruction ids.
    Returns K image stacks, one per turn. With ``use_context=False`` every
    turn is sampled without any context (a context-free baseline).
    """
    scripts = np.asarray(scripts)
    if scripts.ndim != 3 or scripts.shape[1] < 1:
        raise ValueError("scripts must have shape (B, K, T) with K >= 1")
    h, w = initial.shape[-2:]
    grid = (h // codec.patch, w // codec.patch)
    outputs = []
    current = initial
    for k in range(scripts.shape[1]):
        turn_cfg = SamplerConfig(cfg.num_steps, cfg.dist, cfg.guidance_scale, cfg.seed + k)
        current = sample_images(model, codec, current if use_context else None, scripts[:, k], grid, turn_cfg)
        outputs.append(current)
    return outputs
