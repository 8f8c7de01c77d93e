"""Attention building blocks: multi-head attention with a relative position
bias, SE-style channel attention, cross-attention and a dilated-convolution
spatial attention block.
"""
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1:
            raise ConfigError(f"dim and heads must be positive, got dim={self.dim}, heads={self.heads}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"heads={self.heads} does not divide dim={self.dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def d_k(self):
        return self.dim // self.heads


def split_heads(x, heads):
    # [B, N, D] -> [B, heads, N, D / heads]
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(1, 2)


def merge_heads(x):
    b, h, n, dk = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dk)


def scaled_dot_logits(qh, kh, bias=None):
    """Pre-softmax attention logits ``qh @ kh^T / sqrt(d_k) + bias``.

    ``qh`` and ``kh`` are head-split, shaped [B, heads, N, d_k]. ``bias`` must
    broadcast against [B, heads, Nq, Nk].
    """
    logits = qh @ kh.transpose(-2, -1) / math.sqrt(qh.shape[-1])
    if bias is not None:
        logits = logits + bias
    return logits


class RelPosBias(nn.Module):
    """Learnable per-head bias indexed by the (row, col) offset of two tokens
    on a ``grid_size`` patch grid.

    Calling the module returns the dense [heads, N, N] bias with
    N = grid_h * grid_w.
    """

    def __init__(self, grid_size, heads):
        super().__init__()
        gh, gw = (grid_size, grid_size) if isinstance(grid_size, int) else tuple(grid_size)
        if gh < 1 or gw < 1:
            raise ConfigError(f"grid_size must be positive, got {grid_size}")
        self.grid_size = (gh, gw)
        self.heads = heads
        self.table = nn.Parameter(torch.zeros((2 * gh - 1) * (2 * gw - 1), heads))
        nn.init.trunc_normal_(self.table, std=0.02)

        rows, cols = torch.meshgrid(torch.arange(gh), torch.arange(gw), indexing="ij")
        rows, cols = rows.flatten(), cols.flatten()
        d_row = rows[:, None] - rows[None, :] + gh - 1
        d_col = cols[:, None] - cols[None, :] + gw - 1
        self.register_buffer("index", d_row * (2 * gw - 1) + d_col, persistent=False)

    @property
    def num_tokens(self):
        return self.grid_size[0] * self.grid_size[1]

    def forward(self):
        n = self.num_tokens
        return self.table[self.index.reshape(-1)].reshape(n, n, self.heads).permute(2, 0, 1)


class MultiHeadAttention(nn.Module):
    """softmax(Q K^T / sqrt(d_k) + P) V over learned Q/K/V projections,
    followed by an output projection.

    ``kv_dim`` lets keys and values come from a source of a different width;
    they are projected into the query's feature space.
    """

    def __init__(self, dim, heads, kv_dim=None, dropout_rate=0.0, qkv_bias=True):
        super().__init__()
        self.cfg = AttentionConfig(dim, heads, dropout_rate)
        kv_dim = dim if kv_dim is None else kv_dim
        self.kv_dim = kv_dim
        self.q_proj = nn.Linear(dim, dim, bias=qkv_bias)
        # a key bias only shifts each logit row uniformly, so softmax ignores it
        self.k_proj = nn.Linear(kv_dim, dim, bias=False)
        self.v_proj = nn.Linear(kv_dim, dim, bias=qkv_bias)
        self.out_proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout_rate)

    def _check(self, q, k, v):
        if q.dim() != 3 or k.dim() != 3 or v.dim() != 3:
            raise ShapeError("q, k, v must be [batch, tokens, dim] sequences")
        if not (q.shape[0] == k.shape[0] == v.shape[0]):
            raise ShapeError(f"batch sizes differ: {q.shape[0]}, {k.shape[0]}, {v.shape[0]}")
        if k.shape[1] != v.shape[1]:
            raise ShapeError(f"k has {k.shape[1]} tokens but v has {v.shape[1]}")
        if q.shape[-1] != self.cfg.dim:
            raise ShapeError(f"query width {q.shape[-1]} != configured dim {self.cfg.dim}")
        if k.shape[-1] != self.kv_dim or v.shape[-1] != self.kv_dim:
            raise ShapeError(f"key/value width must be {self.kv_dim}")

    def logits(self, q, k, bias=None):
        qh = split_heads(self.q_proj(q), self.cfg.heads)
        kh = split_heads(self.k_proj(k), self.cfg.heads)
        return scaled_dot_logits(qh, kh, bias)

    def forward(self, q, k, v, bias=None, return_weights=False):
        self._check(q, k, v)
        weights = torch.softmax(self.logits(q, k, bias), dim=-1)
        vh = split_heads(self.v_proj(v), self.cfg.heads)
        out = self.out_proj(merge_heads(self.attn_drop(weights) @ vh))
        if return_weights:
            return out, weights
        return out


def msa(q, k, v, attn, bias=None):
    """Functional entry point: run ``attn`` (a MultiHeadAttention) on q, k, v.

    ``bias`` may be a RelPosBias module, a bias tensor, or None (all-zero P).
    """
    if isinstance(bias, RelPosBias):
        bias = bias()
    return attn(q, k, v, bias=bias)


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gate: GAP -> reduce -> ReLU -> expand -> sigmoid,
    then scale each channel by its gate."""

    def __init__(self, channels, reduce_ratio=4):
        super().__init__()
        if channels < 1:
            raise ConfigError("channel attention needs at least one channel")
        if reduce_ratio < 1:
            raise ConfigError(f"reduce_ratio must be a positive integer, got {reduce_ratio}")
        self.reduce_ratio = reduce_ratio
        hidden = max(1, channels // reduce_ratio)
        self.reduce = nn.Linear(channels, hidden)
        self.expand = nn.Linear(hidden, channels)

    def gates(self, x):
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.expand(F.relu(self.reduce(s))))

    def forward(self, x, gates=None):
        if x.dim() != 4:
            raise ShapeError(f"expected [B, C, H, W], got {tuple(x.shape)}")
        if gates is None:
            gates = self.gates(x)
        return x * gates[:, :, None, None]


class CrossAttention(nn.Module):
    """Queries from one sequence, keys/values from another (e.g. decoder
    tokens attending to the encoder skip at the same resolution)."""

    def __init__(self, dim, heads, kv_dim=None, dropout_rate=0.0):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, kv_dim=kv_dim, dropout_rate=dropout_rate)

    def forward(self, q_src, kv_src, return_weights=False):
        if q_src.shape[0] != kv_src.shape[0]:
            raise ShapeError(f"batch sizes differ: {q_src.shape[0]} vs {kv_src.shape[0]}")
        return self.attn(q_src, kv_src, kv_src, return_weights=return_weights)


class SpatialAttention(nn.Module):
    """ASPP-style multi-rate fusion.

    One 3x3 convolution per dilation rate (padding = rate, so spatial size is
    preserved), concatenated and fused by a 1x1 convolution.
    """

    def __init__(self, in_channels, out_channels=None, rates=(1, 6, 12)):
        super().__init__()
        rates = tuple(int(r) for r in rates)
        if not rates:
            raise ConfigError("spatial attention needs at least one dilation rate")
        if any(r < 1 for r in rates):
            raise ConfigError(f"dilation rates must be >= 1, got {rates}")
        out_channels = in_channels if out_channels is None else out_channels
        self.rates = rates
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, in_channels, 3, padding=r, dilation=r) for r in rates
        )
        self.fuse = nn.Conv2d(in_channels * len(rates), out_channels, 1)

    def forward(self, x):
        return self.fuse(torch.cat([b(x) for b in self.branches], dim=1))
