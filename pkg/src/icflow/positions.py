"""(t, h, w) token positions and factorized 3D rotary embeddings."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import torch


class PositionTriplet(NamedTuple):
    t: int
    h: int
    w: int


def default_axis_split(head_dim: int) -> tuple[int, int, int]:
    """Smallest share for virtual time, remainder split evenly over h and w.

    64 -> (8, 28, 28), 32 -> (4, 14, 14).
    """
    if head_dim % 2 or head_dim < 6:
        raise ValueError(f"head_dim must be even and >= 6, got {head_dim}")
    d_t = max(2, 2 * round(head_dim / 16))
    if (head_dim - d_t) % 4:
        d_t += 2
    d_h = (head_dim - d_t) // 2
    return (d_t, d_h, d_h)


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    axis_split: Optional[tuple[int, int, int]] = None
    base_freq: float = 10000.0

    def __post_init__(self):
        split = self.axis_split
        if split is None:
            split = default_axis_split(self.head_dim)
        split = tuple(int(s) for s in split)
        object.__setattr__(self, "axis_split", split)
        if len(split) != 3:
            raise ValueError("axis_split needs exactly three entries (t, h, w)")
        if any(s < 2 or s % 2 for s in split):
            raise ValueError(f"each axis dimension must be even and >= 2, got {split}")
        if sum(split) != self.head_dim:
            raise ValueError(f"axis_split {split} does not sum to head_dim {self.head_dim}")

    def to_dict(self) -> dict:
        return {"head_dim": self.head_dim, "axis_split": list(self.axis_split), "base_freq": self.base_freq}

    @classmethod
    def from_dict(cls, d: dict) -> "RopeConfig":
        return cls(int(d["head_dim"]), tuple(d["axis_split"]), float(d["base_freq"]))


def grid_positions(grid_h: int, grid_w: int, t: int = 0) -> list[PositionTriplet]:
    """Row-major (t, h, w) triplets for one image."""
    if grid_h < 1 or grid_w < 1:
        raise ValueError(f"grid dims must be >= 1, got ({grid_h}, {grid_w})")
    return [PositionTriplet(t, h, w) for h in range(grid_h) for w in range(grid_w)]


def assign_positions(target_grid, context_grids=()) -> list[PositionTriplet]:
    """Target tokens at t=0, tokens of the i-th context image (1-based) at t=i."""
    out = grid_positions(*target_grid, t=0)
    for i, (gh, gw) in enumerate(context_grids, start=1):
        out.extend(grid_positions(gh, gw, t=i))
    return out


def positions_tensor(positions: Sequence[PositionTriplet], dtype=torch.float32) -> torch.Tensor:
    if len(positions) == 0:
        return torch.zeros((0, 3), dtype=dtype)
    return torch.tensor([tuple(p) for p in positions], dtype=dtype)


def rope_angles(positions: torch.Tensor, cfg: RopeConfig) -> torch.Tensor:
    """Per-token rotation angles, shape (L, head_dim // 2)."""
    parts = []
    for axis, dim in enumerate(cfg.axis_split):
        exponents = torch.arange(0, dim, 2, dtype=torch.float64) / dim
        freqs = cfg.base_freq ** (-exponents)
        parts.append(positions[:, axis : axis + 1].to(torch.float64) * freqs[None, :])
    return torch.cat(parts, dim=-1)


def rope_cos_sin(positions, cfg: RopeConfig, dtype=torch.float32):
    if not isinstance(positions, torch.Tensor):
        positions = positions_tensor(positions)
    ang = rope_angles(positions, cfg)
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate adjacent pairs (2j, 2j+1) of the last dim. cos/sin broadcast over leading dims as (L, D/2)."""
    x2 = x.reshape(*x.shape[:-1], -1, 2)
    x_even, x_odd = x2[..., 0], x2[..., 1]
    out = torch.stack((x_even * cos - x_odd * sin, x_even * sin + x_odd * cos), dim=-1)
    return out.reshape(x.shape)


def rope_rotate(x: torch.Tensor, positions, cfg: RopeConfig) -> torch.Tensor:
    """Apply 3D rotary embedding to per-head vectors ``x`` of shape (..., L, head_dim).

    The first d_t dims rotate with t, the next d_h with h and the last d_w with w.
    """
    if x.shape[-1] != cfg.head_dim:
        raise ValueError(f"vector dim {x.shape[-1]} != head_dim {cfg.head_dim}")
    n = len(positions)
    if x.shape[-2] != n:
        raise ValueError(f"sequence length {x.shape[-2]} != number of positions {n}")
    cos, sin = rope_cos_sin(positions, cfg, dtype=x.dtype)
    return apply_rope(x, cos, sin)
