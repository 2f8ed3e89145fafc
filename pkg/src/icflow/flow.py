"""Flow-matching targets, the context-dropout loss, gradient checks and training."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from torch import Tensor

from .backbone import FlowTransformer, ModelConfig
from .checkpoint import save_checkpoint
from .positions import assign_positions, positions_tensor
from .schedule import RFSchedule, ShapeMismatchError, TimestepDistribution, log_snr, sample_t

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def rf_target(x, eps):
    """Rectified-flow velocity target eps - x."""
    if tuple(x.shape) != tuple(eps.shape):
        raise ShapeMismatchError(x.shape, eps.shape)
    return eps - x


def cfm_target_general(z_t, eps, t, schedule: RFSchedule = RFSchedule()):
    """(a'_t / a_t) z_t - (b_t / 2) lambda'_t eps, evaluated in float64.

    For the rectified schedule this equals eps - x whenever
    z_t = (1 - t) x + t eps.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any((t <= 0) | (t >= 1)):
        raise ValueError("general CFM target needs t strictly inside (0, 1)")
    z_t = np.asarray(z_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z_t.shape != eps.shape:
        raise ShapeMismatchError(z_t.shape, eps.shape, "z_t and eps")
    return schedule.da(t) / schedule.a(t) * z_t - 0.5 * schedule.b(t) * schedule.dlog_snr(t) * eps


@dataclass
class TrainConfig:
    batch_size: int = 64
    steps: int = 3000
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 1.0
    mu: Optional[float] = None  # None selects the resolution default
    sigma: float = 1.0
    alpha: Optional[float] = None
    context_dropout_prob: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 50
    double: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.context_dropout_prob <= 1.0:
            raise ValueError("context_dropout_prob must lie in [0, 1]")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        self.betas = tuple(self.betas)

    def timestep_distribution(self, num_tokens: int) -> TimestepDistribution:
        from .schedule import resolution_mu

        if self.alpha is not None:
            return TimestepDistribution(alpha=self.alpha)
        mu = resolution_mu(num_tokens) if self.mu is None else self.mu
        return TimestepDistribution(mu, self.sigma)


@dataclass
class LossReport:
    step: int
    loss: float
    grad_norm: float
    seconds: float


@dataclass
class TrainingData:
    """Normalized token tensors for a fixed-grid edit dataset."""

    target: Tensor  # (N, L, C)
    context: Tensor  # (N, Lc, C)
    text: Tensor  # (N, T) int64
    target_grid: tuple[int, int]
    context_grid: tuple[int, int]

    def __len__(self) -> int:
        return self.target.shape[0]

    @classmethod
    def from_dataset(cls, ds, dtype=torch.float32) -> "TrainingData":
        rows, cols = ds.grid.canvas[0] // ds.patch, ds.grid.canvas[1] // ds.patch
        tgt = torch.from_numpy(ds.stats.normalize(ds.tokens("target"))).to(dtype)
        ctx = torch.from_numpy(ds.stats.normalize(ds.tokens("context"))).to(dtype)
        return cls(tgt, ctx, torch.from_numpy(ds.instruction_ids()), (rows, cols), (rows, cols))

    def positions(self, with_context: bool) -> Tensor:
        ctx = [self.context_grid] if with_context else []
        return positions_tensor(assign_positions(self.target_grid, ctx))


@dataclass
class NoiseDraw:
    """Everything random about one loss evaluation."""

    t: Tensor  # (B,)
    eps: Tensor  # (B, L, C)
    keep_context: Tensor  # (B,) bool


def draw_noise(batch: int, shape, dist: TimestepDistribution, dropout: float,
               rng: np.random.Generator, dtype=torch.float32) -> NoiseDraw:
    t = torch.from_numpy(sample_t(dist, rng, batch)).to(dtype)
    eps = torch.from_numpy(rng.standard_normal((batch, *shape))).to(dtype)
    keep = torch.from_numpy(rng.random(batch) >= dropout)
    return NoiseDraw(t, eps, keep)


def flow_loss(model: FlowTransformer, data: TrainingData, idx: Tensor, noise: NoiseDraw) -> Tensor:
    """Mean squared error between v_theta and eps - x over target-token elements.

    Examples whose context is dropped run with the context tokens removed
    from the sequence entirely.
    """
    x = data.target[idx]
    t = noise.t
    z = (1 - t)[:, None, None] * x + t[:, None, None] * noise.eps
    target = rf_target(x, noise.eps)
    L = x.shape[1]
    total = x.new_zeros(())
    for keep in (True, False):
        sel = (noise.keep_context == keep).nonzero().flatten()
        if sel.numel() == 0:
            continue
        tokens = z[sel]
        if keep:
            tokens = torch.cat((tokens, data.context[idx[sel]]), dim=1)
        pos = data.positions(keep).to(x.dtype)
        v = model(tokens, data.text[idx[sel]], pos, t[sel], L)
        total = total + ((v - target[sel]) ** 2).sum()
    return total / x.numel()


def check_finite(loss: Tensor, step: int, noise: Optional[NoiseDraw] = None):
    if not torch.isfinite(loss):
        extra = ""
        if noise is not None:
            extra = f" (t range [{noise.t.min():.4g}, {noise.t.max():.4g}], kept contexts {int(noise.keep_context.sum())})"
        raise TrainingDivergedError(f"non-finite loss {loss.item()} at step {step}{extra}")


def loss_and_grads(model, data, idx, noise, step: int = 0) -> tuple[float, dict[str, Tensor]]:
    model.zero_grad(set_to_none=True)
    loss = flow_loss(model, data, idx, noise)
    check_finite(loss, step, noise)
    loss.backward()
    grads = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for n, p in model.named_parameters()}
    return loss.item(), grads


def gradient_check(model, data, idx, noise, h: float = 1e-6, max_entries: int = 24,
                   rng: Optional[np.random.Generator] = None) -> dict[str, float]:
    """Relative error between autograd and central differences, per parameter tensor.

    Up to ``max_entries`` entries per tensor are probed (all of them for
    small tensors). Error is ||fd - an|| / max(||fd||, ||an||, 1e-12) over
    the probed entries.
    """
    rng = rng or np.random.default_rng(0)
    _, grads = loss_and_grads(model, data, idx, noise)
    out = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            n = flat.numel()
            picks = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
            fd = np.empty(len(picks))
            an = grads[name].view(-1)[torch.from_numpy(picks)].numpy()
            for j, k in enumerate(picks):
                orig = flat[k].item()
                flat[k] = orig + h
                up = flow_loss(model, data, idx, noise).item()
                flat[k] = orig - h
                down = flow_loss(model, data, idx, noise).item()
                flat[k] = orig
                fd[j] = (up - down) / (2 * h)
            denom = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12)
            out[name] = float(np.linalg.norm(fd - an) / denom)
    return out


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    # cosine decay to 10% after warmup
    frac = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
    return cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(1.0, frac))))


def parameter_checksum(model) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def train_iter(model: FlowTransformer, data: TrainingData, cfg: TrainConfig) -> Iterator[LossReport]:
    """Adam training; yields one LossReport per step. Deterministic given cfg.seed."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    dist = cfg.timestep_distribution(data.target.shape[1])
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)
    dtype = data.target.dtype
    start = time.perf_counter()
    for step in range(cfg.steps):
        for g in opt.param_groups:
            g["lr"] = _lr_at(step, cfg)
        idx = torch.from_numpy(rng.integers(len(data), size=cfg.batch_size))
        noise = draw_noise(cfg.batch_size, data.target.shape[1:], dist, cfg.context_dropout_prob, rng, dtype)
        opt.zero_grad(set_to_none=True)
        loss = flow_loss(model, data, idx, noise)
        check_finite(loss, step, noise)
        loss.backward()
        gn = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip if cfg.grad_clip > 0 else float("inf"))
        opt.step()
        yield LossReport(step, loss.item(), float(gn), time.perf_counter() - start)


def train(cfg: TrainConfig, data: TrainingData, model_cfg: ModelConfig, out_dir=None,
          meta: Optional[dict] = None, model: Optional[FlowTransformer] = None) -> tuple[FlowTransformer, list[LossReport]]:
    """Train from scratch (or continue ``model``); writes loss.csv and checkpoints into ``out_dir`` if given."""
    torch.manual_seed(cfg.seed)
    if model is None:
        model = FlowTransformer(model_cfg)
    if cfg.double:
        model = model.double()
        data = TrainingData(data.target.double(), data.context.double(), data.text, data.target_grid, data.context_grid)
    reports = []
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "loss.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "grad_norm", "seconds"])
    try:
        for rep in train_iter(model, data, cfg):
            reports.append(rep)
            if writer is not None:
                writer.writerow([rep.step, repr(rep.loss), repr(rep.grad_norm), f"{rep.seconds:.3f}"])
            if cfg.log_every and (rep.step % cfg.log_every == 0 or rep.step == cfg.steps - 1):
                log.info("step %d loss %.5f grad %.3f %.1fs", rep.step, rep.loss, rep.grad_norm, rep.seconds)
            if out is not None and cfg.checkpoint_every and (rep.step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"step_{rep.step + 1:06d}.icft", model, meta)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_checkpoint(out / "final.icft", model, meta)
    return model, reports
