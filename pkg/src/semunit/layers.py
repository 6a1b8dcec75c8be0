"""Transformer building blocks on top of torch tensors, plus a finite-difference checker.

Tensors and reverse-mode gradients come from torch; the attention, positional
encoding and gradient checking are written out here so their numerics are
pinned by this package's tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-5


class AllMaskedError(ValueError):
    """A query row had no key it was allowed to attend to."""


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """softmax(q k^T / sqrt(d)) v over the last two dims.

    `mask` is boolean and broadcastable to (..., Lq, Lk); True marks keys a
    query may attend to. Returns the output (..., Lq, dv) and the weights.
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ValueError(f"query dim {d} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    logits = q @ k.transpose(-1, -2) / math.sqrt(d)
    if mask is not None:
        mask = mask.expand_as(logits) if mask.shape != logits.shape else mask
        if not bool(mask.any(-1).all()):
            raise AllMaskedError("attention row with every key masked")
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LN_EPS):
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)


def sinusoidal_pe(length: int, d: int, start: int = 0, dtype=torch.float32) -> torch.Tensor:
    """Rows for positions start..start+length-1; even columns sin, odd columns cos."""
    if d % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {d}")
    pos = torch.arange(start, start + length, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(length, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe.to(dtype)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)

    def _split(self, x):
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.d_model // self.heads).transpose(-2, -3)

    def forward(self, query, key, value, mask=None):
        """`mask` is (..., Lq, Lk) or broadcastable; it is shared by all heads."""
        q = self._split(self.wq(query))
        k = self._split(self.wk(key))
        v = self._split(self.wv(value))
        if mask is not None:
            mask = mask.unsqueeze(-3)
        out, _ = attention(q, k, v, mask)
        out = out.transpose(-2, -3)
        out = out.reshape(*out.shape[:-2], self.d_model)
        return self.wo(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ffn: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ffn)
        self.fc2 = nn.Linear(d_ffn, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    """Post-norm self-attention + feed-forward block."""

    def __init__(self, d_model, d_ffn, heads, dropout=0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, heads)
        self.ffn = FeedForward(d_model, d_ffn, dropout)
        self.norm1 = nn.LayerNorm(d_model, eps=LN_EPS)
        self.norm2 = nn.LayerNorm(d_model, eps=LN_EPS)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        x = self.norm1(x + self.dropout(self.self_attn(x, x, x, mask)))
        return self.norm2(x + self.dropout(self.ffn(x)))


class DecoderLayer(nn.Module):
    def __init__(self, d_model, d_ffn, heads, dropout=0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, heads)
        self.cross_attn = MultiHeadAttention(d_model, heads)
        self.ffn = FeedForward(d_model, d_ffn, dropout)
        self.norm1 = nn.LayerNorm(d_model, eps=LN_EPS)
        self.norm2 = nn.LayerNorm(d_model, eps=LN_EPS)
        self.norm3 = nn.LayerNorm(d_model, eps=LN_EPS)
        self.dropout = nn.Dropout(dropout)

    def forward(self, y, memory, self_mask, cross_mask):
        y = self.norm1(y + self.dropout(self.self_attn(y, y, y, self_mask)))
        y = self.norm2(y + self.dropout(self.cross_attn(y, memory, memory, cross_mask)))
        return self.norm3(y + self.dropout(self.ffn(y)))


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    params: torch.Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar `f` with central differences.

    The relative error of a coordinate is |g - n| / max(|g|, |n|, floor), so
    coordinates whose gradient is essentially zero are judged on absolute
    error. With `max_coords`, a seeded random subset of coordinates is probed.
    """
    x = params.detach().clone().requires_grad_(True)
    y = f(x)
    if y.numel() != 1 or not torch.isfinite(y).all():
        raise ValueError("grad_check needs a finite scalar function value")
    (grad,) = torch.autograd.grad(y, x)
    grad = grad.reshape(-1)

    n = x.numel()
    if max_coords is not None and max_coords < n:
        g = torch.Generator().manual_seed(seed)
        coords = torch.randperm(n, generator=g)[:max_coords].tolist()
    else:
        coords = range(n)

    base = x.detach().reshape(-1)
    max_rel = max_abs = 0.0
    checked = 0
    with torch.no_grad():
        for i in coords:
            probe = base.clone()
            probe[i] = base[i] + eps
            hi = float(f(probe.reshape(x.shape)))
            probe[i] = base[i] - eps
            lo = float(f(probe.reshape(x.shape)))
            num = (hi - lo) / (2 * eps)
            ana = float(grad[i])
            err = abs(ana - num)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(ana), abs(num), floor))
            checked += 1
    return GradCheckReport(max_rel, max_abs, checked, tol)
