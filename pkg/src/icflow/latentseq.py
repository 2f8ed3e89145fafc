"""Patchify codec, token sequences, reconstruction metrics and the dataset file format."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import convolve2d

from .checkpoint import read_container, write_container
from .positions import PositionTriplet, assign_positions


class CodecError(ValueError):
    pass


@dataclass
class TokenGrid:
    tokens: np.ndarray  # (grid_h * grid_w, latent_channels), row-major
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.shape[0] != self.grid_h * self.grid_w:
            raise CodecError(f"{self.tokens.shape[0]} tokens for a {self.grid_h}x{self.grid_w} grid")

    @property
    def latent_channels(self) -> int:
        return self.tokens.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.grid_h, self.grid_w, self.latent_channels)


@dataclass
class TokenSequence:
    tokens: np.ndarray
    positions: list[PositionTriplet]
    target_len: int
    block_sizes: list[int] = field(default_factory=list)


def encode(image: np.ndarray, patch: int) -> TokenGrid:
    """(C, H, W) image -> non-overlapping patch tokens with C * patch^2 channels."""
    if image.ndim != 3:
        raise CodecError(f"expected a (C, H, W) image, got shape {image.shape}")
    c, h, w = image.shape
    if h % patch or w % patch:
        raise CodecError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    tokens = image.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * patch * patch)
    return TokenGrid(np.ascontiguousarray(tokens), gh, gw)


def decode(grid: TokenGrid, patch: int, channels: int = 3) -> np.ndarray:
    if grid.latent_channels != channels * patch * patch:
        raise CodecError(f"{grid.latent_channels} latent channels != {channels} * {patch}^2")
    t = grid.tokens.reshape(grid.grid_h, grid.grid_w, channels, patch, patch)
    return np.ascontiguousarray(t.transpose(2, 0, 3, 1, 4).reshape(channels, grid.grid_h * patch, grid.grid_w * patch))


def build_sequence(target: TokenGrid, contexts: Sequence[TokenGrid] = ()) -> TokenSequence:
    """[target | context_1 | ... | context_N] with virtual-time positions."""
    blocks = [target, *contexts]
    tokens = np.concatenate([b.tokens for b in blocks], axis=0)
    positions = assign_positions((target.grid_h, target.grid_w), [(c.grid_h, c.grid_w) for c in contexts])
    return TokenSequence(tokens, positions, target.tokens.shape[0], [b.tokens.shape[0] for b in blocks])


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, tokens: np.ndarray, min_std: float = 1e-3) -> "ChannelStats":
        flat = tokens.reshape(-1, tokens.shape[-1]).astype(np.float64)
        return cls(flat.mean(0).astype(np.float32), np.maximum(flat.std(0), min_std).astype(np.float32))

    def normalize(self, tokens):
        return (tokens - self.mean) / self.std

    def denormalize(self, tokens):
        return tokens * self.std + self.mean


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give +inf."""
    if a.shape != b.shape:
        raise CodecError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over channels with a Gaussian window, valid region only, data range 1.

    The window shrinks to the largest odd size that fits small images.
    """
    if a.shape != b.shape:
        raise CodecError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    size = min(window, a.shape[-1], a.shape[-2])
    size -= 1 - size % 2
    win = _gaussian_window(size, sigma)
    c1, c2 = k1**2, k2**2
    vals = []
    for x, y in zip(a.astype(np.float64), b.astype(np.float64)):
        f = lambda m: convolve2d(m, win, mode="valid")  # noqa: E731
        mx, my = f(x), f(y)
        sxx = f(x * x) - mx * mx
        syy = f(y * y) - my * my
        sxy = f(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def reconstruction_metrics(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(PSNR in dB, SSIM)."""
    return psnr(a, b), ssim(a, b)


# dataset file -----------------------------------------------------------

def _png_bytes(image: np.ndarray) -> bytes:
    from PIL import Image

    arr = np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _png_decode(data: bytes) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_dataset(path, header: dict, images: dict[str, np.ndarray], records: list[dict],
                  stats: ChannelStats, image_format: str = "raw") -> Path:
    """Header (patch size, channel stats, vocab, ...) plus records and image stacks.

    ``images`` maps a name to an (N, C, H, W) float32 stack. With
    ``image_format="png"`` each image is stored as PNG bytes (8-bit, lossy
    for values that are not multiples of 1/255).
    """
    if image_format not in ("raw", "png"):
        raise ValueError(f"image_format must be 'raw' or 'png', got {image_format!r}")
    arrays = {"stats.mean": stats.mean, "stats.std": stats.std}
    for name, stack in images.items():
        if image_format == "raw":
            arrays[f"images.{name}"] = np.asarray(stack, dtype=np.float32)
        else:
            blobs = [_png_bytes(im) for im in stack]
            offsets = np.cumsum([0] + [len(b) for b in blobs]).astype(np.int64)
            arrays[f"png.{name}"] = np.frombuffer(b"".join(blobs), dtype=np.uint8)
            arrays[f"png_offsets.{name}"] = offsets
    meta = {**header, "image_format": image_format, "image_names": list(images), "records": records}
    return write_container(path, "dataset", meta, arrays)


def read_dataset(path) -> tuple[dict, dict[str, np.ndarray], list[dict], ChannelStats]:
    meta, arrays = read_container(path, kind="dataset")
    stats = ChannelStats(arrays["stats.mean"], arrays["stats.std"])
    images = {}
    for name in meta["image_names"]:
        if meta["image_format"] == "raw":
            images[name] = arrays[f"images.{name}"]
        else:
            blob, off = arrays[f"png.{name}"].tobytes(), arrays[f"png_offsets.{name}"]
            images[name] = np.stack([_png_decode(blob[off[i] : off[i + 1]]) for i in range(len(off) - 1)])
    records = meta.pop("records")
    return meta, images, records, stats
