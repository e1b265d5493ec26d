"""Dilated non-causal temporal convolution with per-frame multi-head self-attention.

Sequences are laid out as (T, C) or batched (B, T, C).  Convolution filters
use the (k, C_in, C_out) layout, with tap ``i`` reading the input at offset
``d * ((k - 1) / 2 - i)`` from the output position; tap 0 therefore looks the
furthest into the future.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class TcsanConfig:
    layers: int = 4
    kernel_size: int = 3
    heads: int = 4
    token_group_size: int = 64
    in_channels: int = 1344
    out_channels: int = 512

    def __post_init__(self):
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 3, got {self.kernel_size}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.in_channels % self.token_group_size:
            raise ValueError(
                f"in_channels {self.in_channels} not divisible by group size {self.token_group_size}"
            )
        if self.token_group_size % self.heads:
            raise ValueError(
                f"token group size {self.token_group_size} not divisible by {self.heads} heads"
            )

    def dilation(self, n: int) -> int:
        """Dilation of the n-th block (1-based)."""
        return 2 ** (n - 1)

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * (2**self.layers - 1)


def dilated_noncausal_conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None, dilation: int):
    """Symmetric dilated convolution along time with zero padding.

    x: (T, C_in) or (B, T, C_in); weight: (k, C_in, C_out); returns the same
    length T.
    """
    k = weight.shape[0]
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[-1]} channels, filter expects {weight.shape[1]}")
    # conv1d correlates tap j with offset d*(j - (k-1)/2); flip to match tap i -> d*((k-1)/2 - i)
    w = weight.flip(0).permute(2, 1, 0)
    out = F.conv1d(x.transpose(1, 2), w, bias, padding=dilation * (k - 1) // 2, dilation=dilation)
    out = out.transpose(1, 2)
    return out[0] if squeeze else out


def _sorted_sum(x: torch.Tensor, dim: int) -> torch.Tensor:
    # summing in sorted order makes the result independent of the input order
    return torch.sort(x, dim=dim).values.sum(dim)


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(D_k)) v over the last two dims.

    Every reduction over keys is order-independent, so permuting the tokens
    permutes the output bit for bit.
    """
    d_k = q.shape[-1]
    if d_k == 0:
        raise ValueError("key dimension must be positive")
    if k.shape[-1] != d_k:
        raise ValueError("queries and keys must share their last dimension")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("keys and values must have the same number of rows")
    logits = (q.unsqueeze(-2) * k.unsqueeze(-3)).sum(-1) / math.sqrt(d_k)
    e = torch.exp(logits - logits.amax(-1, keepdim=True))
    p = e / _sorted_sum(e, -1).unsqueeze(-1)
    return _sorted_sum(p.unsqueeze(-1) * v.unsqueeze(-3), -2)


def multi_head_self_attention(
    z: torch.Tensor,
    heads: int,
    w_qkv: torch.Tensor,
    b_qkv: torch.Tensor | None,
    w_out: torch.Tensor,
    b_out: torch.Tensor | None,
) -> torch.Tensor:
    """Self-attention with Q = K = V = z.

    z: (..., N, D).  ``w_qkv`` is (3, D, D): each projection maps D -> D and is
    split into ``heads`` chunks of D/heads, which is the same as h independent
    per-head projections.  ``w_out`` is (D, D).
    """
    d = z.shape[-1]
    if d % heads:
        raise ValueError(f"token width {d} not divisible by {heads} heads")
    dh = d // heads
    proj = []
    for j in range(3):
        p = z @ w_qkv[j]
        if b_qkv is not None:
            p = p + b_qkv[j]
        # (..., N, D) -> (..., h, N, D/h)
        proj.append(p.unflatten(-1, (heads, dh)).transpose(-3, -2))
    att = scaled_dot_attention(*proj)
    out = att.transpose(-3, -2).flatten(-2) @ w_out
    if b_out is not None:
        out = out + b_out
    return out


def _uniform_fan_in(t: torch.Tensor, fan_in: int, gen: torch.Generator | None):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=gen)


class DilatedNonCausalConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int, dilation: int):
        super().__init__()
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        self.dilation = dilation
        self.weight = nn.Parameter(torch.zeros(kernel_size, c_in, c_out))
        self.bias = nn.Parameter(torch.zeros(c_out))

    def reset_parameters(self, gen=None):
        k, c_in, _ = self.weight.shape
        _uniform_fan_in(self.weight, k * c_in, gen)
        nn.init.zeros_(self.bias)

    def forward(self, x):
        return dilated_noncausal_conv(x, self.weight, self.bias, self.dilation)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"token width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.w_qkv = nn.Parameter(torch.zeros(3, dim, dim))
        self.b_qkv = nn.Parameter(torch.zeros(3, dim))
        self.w_out = nn.Parameter(torch.zeros(dim, dim))
        self.b_out = nn.Parameter(torch.zeros(dim))

    def reset_parameters(self, gen=None):
        dim = self.w_out.shape[0]
        _uniform_fan_in(self.w_qkv, dim, gen)
        _uniform_fan_in(self.w_out, dim, gen)
        nn.init.zeros_(self.b_qkv)
        nn.init.zeros_(self.b_out)

    def forward(self, z):
        return multi_head_self_attention(z, self.heads, self.w_qkv, self.b_qkv, self.w_out, self.b_out)


class ResidualAttentionBlock(nn.Module):
    """y = x + P(A(ReLU(conv_d(x)))), A attending over channel groups of each frame."""

    def __init__(self, cfg: TcsanConfig, n: int):
        super().__init__()
        c = cfg.in_channels
        self.group = cfg.token_group_size
        self.conv = DilatedNonCausalConv(c, c, cfg.kernel_size, cfg.dilation(n))
        self.attn = MultiHeadSelfAttention(self.group, cfg.heads)
        self.proj = nn.Linear(c, c)

    def reset_parameters(self, gen=None):
        self.conv.reset_parameters(gen)
        self.attn.reset_parameters(gen)
        _uniform_fan_in(self.proj.weight, self.proj.in_features, gen)
        nn.init.zeros_(self.proj.bias)

    def branch(self, x):
        h = F.relu(self.conv(x))
        tokens = h.unflatten(-1, (h.shape[-1] // self.group, self.group))
        h = self.attn(tokens).flatten(-2)
        return self.proj(h)

    def forward(self, x):
        if x.shape[-1] != self.proj.in_features:
            raise ValueError(f"expected {self.proj.in_features} channels, got {x.shape[-1]}")
        return x + self.branch(x)


class TCSAN(nn.Module):
    def __init__(self, cfg: TcsanConfig, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(ResidualAttentionBlock(cfg, n) for n in range(1, cfg.layers + 1))
        self.out = nn.Linear(cfg.in_channels, cfg.out_channels)
        self.reset_parameters(None if seed is None else torch.Generator().manual_seed(seed))

    def reset_parameters(self, gen=None):
        for block in self.blocks:
            block.reset_parameters(gen)
        _uniform_fan_in(self.out.weight, self.out.in_features, gen)
        nn.init.zeros_(self.out.bias)

    def features(self, x):
        """Activations after the last residual block, before the output projection."""
        if x.shape[-2] < 1:
            raise ValueError("sequence must contain at least one frame")
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, x):
        return self.out(self.features(x))


class GRUFusion(nn.Module):
    """Recurrent fusion used by the ablation baselines in place of TCSAN."""

    def __init__(self, in_channels: int, out_channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or out_channels
        self.gru = nn.GRU(in_channels, hidden, batch_first=True)
        self.out = nn.Linear(hidden, out_channels)

    def forward(self, x):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        h, _ = self.gru(x)
        y = self.out(h)
        return y[0] if squeeze else y
