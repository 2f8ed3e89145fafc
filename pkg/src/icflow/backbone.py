"""Velocity network: double-stream blocks, fused single-stream blocks, modulation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .positions import RopeConfig, apply_rope, rope_cos_sin


@dataclass
class ModelConfig:
    latent_channels: int = 48
    model_dim: int = 128
    num_heads: int = 4
    depth_double: int = 2
    depth_single: int = 4
    instruction_vocab: int = 64
    mlp_ratio: float = 4.0
    qk_norm: bool = True
    rope_axis_split: Optional[tuple] = None
    rope_base: float = 10000.0
    time_embed_dim: int = 256

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.depth_double < 0 or self.depth_single < 0:
            raise ValueError("depths must be >= 0")
        if self.rope_axis_split is not None:
            self.rope_axis_split = tuple(int(v) for v in self.rope_axis_split)
        # validates the axis split eagerly
        self.rope_axis_split = self.rope.axis_split

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.model_dim * self.mlp_ratio)

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.head_dim, self.rope_axis_split, self.rope_base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rope_axis_split"] = list(self.rope_axis_split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0, time_factor: float = 1000.0) -> Tensor:
    t = time_factor * t
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half).to(t.dtype)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class MLPEmbedder(nn.Module):
    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.in_layer = nn.Linear(in_dim, hidden)
        self.out_layer = nn.Linear(hidden, hidden)

    def forward(self, x: Tensor) -> Tensor:
        return self.out_layer(F.silu(self.in_layer(x)))


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        rrms = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return x * rrms * self.scale


class QKNorm(nn.Module):
    def __init__(self, dim: int, enabled: bool = True):
        super().__init__()
        self.query_norm = RMSNorm(dim) if enabled else nn.Identity()
        self.key_norm = RMSNorm(dim) if enabled else nn.Identity()

    def forward(self, q: Tensor, k: Tensor) -> tuple[Tensor, Tensor]:
        return self.query_norm(q), self.key_norm(k)


class Modulation(nn.Module):
    """Projects the conditioning vector into ``n_triples`` (shift, scale, gate) triples.

    Zero-initialized, so every gate starts at 0.
    """

    def __init__(self, dim: int, n_triples: int):
        super().__init__()
        self.n_triples = n_triples
        self.lin = nn.Linear(dim, 3 * n_triples * dim)
        nn.init.zeros_(self.lin.weight)
        nn.init.zeros_(self.lin.bias)

    @property
    def out_features(self) -> int:
        return self.lin.out_features

    def forward(self, cond: Tensor) -> list[tuple[Tensor, Tensor, Tensor]]:
        out = self.lin(F.silu(cond))[:, None, :].chunk(3 * self.n_triples, dim=-1)
        return [tuple(out[3 * i : 3 * i + 3]) for i in range(self.n_triples)]


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return (1 + scale) * x + shift


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, l, d = x.shape
    return x.view(b, l, num_heads, d // num_heads).transpose(1, 2)


def merge_heads(x: Tensor) -> Tensor:
    b, h, l, d = x.shape
    return x.transpose(1, 2).reshape(b, l, h * d)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1)


def attention(q: Tensor, k: Tensor, v: Tensor, rope: Optional[tuple[Tensor, Tensor]] = None) -> Tensor:
    """q, k, v: (B, H, L, Dh). Returns merged heads (B, L, H*Dh)."""
    if rope is not None:
        q = apply_rope(q, *rope)
        k = apply_rope(k, *rope)
    return merge_heads(attention_weights(q, k) @ v)


class StreamWeights(nn.Module):
    """One stream of a double block: its own modulation, QKV, projection and MLP."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dim = cfg.model_dim
        self.mod = Modulation(dim, 2)
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.norm = QKNorm(cfg.head_dim, cfg.qk_norm)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(dim, cfg.mlp_hidden), nn.GELU(approximate="tanh"), nn.Linear(cfg.mlp_hidden, dim)
        )


class DoubleStreamBlock(nn.Module):
    """Separate image and text weights; attention runs over the concatenation [text | image]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.img = StreamWeights(cfg)
        self.txt = StreamWeights(cfg)

    def _qkv(self, s: StreamWeights, x: Tensor, shift: Tensor, scale: Tensor):
        qkv = s.qkv(modulate(s.norm1(x), shift, scale))
        q, k, v = (split_heads(a, self.num_heads) for a in qkv.chunk(3, dim=-1))
        q, k = s.norm(q, k)
        return q, k, v

    def forward(self, img: Tensor, txt: Tensor, cond: Tensor, rope=None, return_attn: bool = False):
        img_attn_mod, img_mlp_mod = self.img.mod(cond)
        txt_attn_mod, txt_mlp_mod = self.txt.mod(cond)
        iq, ik, iv = self._qkv(self.img, img, img_attn_mod[0], img_attn_mod[1])
        tq, tk, tv = self._qkv(self.txt, txt, txt_attn_mod[0], txt_attn_mod[1])
        q = torch.cat((tq, iq), dim=2)
        k = torch.cat((tk, ik), dim=2)
        v = torch.cat((tv, iv), dim=2)
        if rope is not None:
            q = apply_rope(q, *rope)
            k = apply_rope(k, *rope)
        weights = attention_weights(q, k)
        attn = merge_heads(weights @ v)
        n_txt = txt.shape[1]
        txt_attn, img_attn = attn[:, :n_txt], attn[:, n_txt:]

        img = img + img_attn_mod[2] * self.img.proj(img_attn)
        img = img + img_mlp_mod[2] * self.img.mlp(modulate(self.img.norm2(img), img_mlp_mod[0], img_mlp_mod[1]))
        txt = txt + txt_attn_mod[2] * self.txt.proj(txt_attn)
        txt = txt + txt_mlp_mod[2] * self.txt.mlp(modulate(self.txt.norm2(txt), txt_mlp_mod[0], txt_mlp_mod[1]))
        if return_attn:
            return img, txt, weights
        return img, txt


class SingleStreamBlock(nn.Module):
    """Fused parallel block.

    ``linear1`` produces [q | k | v | mlp_in] in one matmul and ``linear2``
    consumes [attn_out | gelu(mlp_in)] in one matmul. A single
    (shift, scale, gate) triple modulates the whole block.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dim = cfg.model_dim
        self.num_heads = cfg.num_heads
        self.dim = dim
        self.mlp_hidden = cfg.mlp_hidden
        self.mod = Modulation(dim, 1)
        self.pre_norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.linear1 = nn.Linear(dim, 3 * dim + self.mlp_hidden)
        self.norm = QKNorm(cfg.head_dim, cfg.qk_norm)
        self.linear2 = nn.Linear(dim + self.mlp_hidden, dim)
        self.mlp_act = nn.GELU(approximate="tanh")

    def forward(self, x: Tensor, cond: Tensor, rope=None) -> Tensor:
        ((shift, scale, gate),) = self.mod(cond)
        h = modulate(self.pre_norm(x), shift, scale)
        qkv, mlp = torch.split(self.linear1(h), [3 * self.dim, self.mlp_hidden], dim=-1)
        q, k, v = (split_heads(a, self.num_heads) for a in qkv.chunk(3, dim=-1))
        q, k = self.norm(q, k)
        out = self.linear2(torch.cat((attention(q, k, v, rope), self.mlp_act(mlp)), dim=-1))
        return x + gate * out


class UnfusedParallelBlock(nn.Module):
    """Reference block with separate attention and MLP layers and two modulation triples.

    Computes x + g_a * proj(attn(m_a(x))) + g_m * mlp(m_m(x)); used to check the fused block.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dim = cfg.model_dim
        self.num_heads = cfg.num_heads
        self.mod = Modulation(dim, 2)
        self.pre_norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.norm = QKNorm(cfg.head_dim, cfg.qk_norm)
        self.proj = nn.Linear(dim, dim)
        self.mlp_in = nn.Linear(dim, cfg.mlp_hidden)
        self.mlp_out = nn.Linear(cfg.mlp_hidden, dim, bias=False)
        self.mlp_act = nn.GELU(approximate="tanh")

    def forward(self, x: Tensor, cond: Tensor, rope=None) -> Tensor:
        (a_shift, a_scale, a_gate), (m_shift, m_scale, m_gate) = self.mod(cond)
        xn = self.pre_norm(x)
        q, k, v = (split_heads(a, self.num_heads) for a in self.qkv(modulate(xn, a_shift, a_scale)).chunk(3, dim=-1))
        q, k = self.norm(q, k)
        attn_out = self.proj(attention(q, k, v, rope))
        mlp_out = self.mlp_out(self.mlp_act(self.mlp_in(modulate(xn, m_shift, m_scale))))
        return x + a_gate * attn_out + m_gate * mlp_out

    @torch.no_grad()
    def to_fused(self, cfg: ModelConfig) -> SingleStreamBlock:
        """Fused block with the same function, valid when both modulation triples coincide."""
        fused = SingleStreamBlock(cfg).to(self.qkv.weight.dtype)
        dim = cfg.model_dim
        fused.linear1.weight.copy_(torch.cat((self.qkv.weight, self.mlp_in.weight), dim=0))
        fused.linear1.bias.copy_(torch.cat((self.qkv.bias, self.mlp_in.bias)))
        fused.linear2.weight.copy_(torch.cat((self.proj.weight, self.mlp_out.weight), dim=1))
        fused.linear2.bias.copy_(self.proj.bias)
        fused.norm.load_state_dict(self.norm.state_dict())
        fused.mod.lin.weight.copy_(self.mod.lin.weight[: 3 * dim])
        fused.mod.lin.bias.copy_(self.mod.lin.bias[: 3 * dim])
        return fused


def modulation_parameter_count(block: nn.Module) -> int:
    return sum(p.numel() for p in block.mod.parameters())


class LastLayer(nn.Module):
    def __init__(self, dim: int, out_channels: int):
        super().__init__()
        self.norm_final = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.adaLN_modulation = nn.Linear(dim, 2 * dim)
        self.linear = nn.Linear(dim, out_channels)
        for lin in (self.adaLN_modulation, self.linear):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        shift, scale = self.adaLN_modulation(F.silu(cond))[:, None, :].chunk(2, dim=-1)
        return self.linear(modulate(self.norm_final(x), shift, scale))


class FlowTransformer(nn.Module):
    """v_theta(z_t, t, contexts, instruction).

    Image tokens are [target | context_1 | ... | context_N]; only the first
    ``target_len`` outputs are returned. Text tokens get the zero position,
    i.e. an identity rotation.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.model_dim
        self.img_in = nn.Linear(cfg.latent_channels, dim)
        self.txt_in = nn.Embedding(cfg.instruction_vocab, dim)
        self.time_in = MLPEmbedder(cfg.time_embed_dim, dim)
        self.instr_in = MLPEmbedder(dim, dim)
        self.double_blocks = nn.ModuleList(DoubleStreamBlock(cfg) for _ in range(cfg.depth_double))
        self.single_blocks = nn.ModuleList(SingleStreamBlock(cfg) for _ in range(cfg.depth_single))
        self.final_layer = LastLayer(dim, cfg.latent_channels)
        nn.init.normal_(self.txt_in.weight, std=0.02)

    def conditioning(self, t: Tensor, text_ids: Tensor) -> Tensor:
        txt = self.txt_in(text_ids)
        pooled = txt.mean(dim=1) if txt.shape[1] else txt.new_zeros(txt.shape[0], txt.shape[2])
        temb = timestep_embedding(t, self.cfg.time_embed_dim).to(txt.dtype)
        return self.time_in(temb) + self.instr_in(pooled)

    def forward(self, image_tokens: Tensor, text_ids: Tensor, positions: Tensor, t: Tensor, target_len: int) -> Tensor:
        b, n_img, c = image_tokens.shape
        if positions.shape[0] != n_img:
            raise ValueError(f"{positions.shape[0]} positions for {n_img} image tokens")
        if c != self.cfg.latent_channels:
            raise ValueError(f"expected {self.cfg.latent_channels} latent channels, got {c}")
        if not 0 < target_len <= n_img:
            raise ValueError(f"target_len {target_len} outside (0, {n_img}]")
        if t.ndim == 0:
            t = t.expand(b)
        dtype = image_tokens.dtype
        img = self.img_in(image_tokens)
        txt = self.txt_in(text_ids)
        cond = self.conditioning(t.to(dtype), text_ids)

        n_txt = text_ids.shape[1]
        all_pos = torch.cat((positions.new_zeros((n_txt, 3)), positions), dim=0)
        rope = rope_cos_sin(all_pos, self.cfg.rope, dtype=dtype)

        for block in self.double_blocks:
            img, txt = block(img, txt, cond, rope)
        x = torch.cat((txt, img), dim=1)
        for block in self.single_blocks:
            x = block(x, cond, rope)
        # text and context outputs are dropped
        x = x[:, n_txt : n_txt + target_len]
        return self.final_layer(x, cond)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def randomize_(model: nn.Module, std: float = 0.2, generator: Optional[torch.Generator] = None) -> nn.Module:
    """Fill every parameter with random values (zero-init layers included), for gradient checks."""
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)
    return model
