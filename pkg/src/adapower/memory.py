"""Memory persistence: a FIFO of past frames, encoded to patch tokens by a frozen
random-projection encoder, read by backbone features through cross-attention."""
from __future__ import annotations

import math
from collections import deque
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .numeric import DTYPE, ContractError, RngStream, softmax_rows

ENCODER_SEED = 0x5EED_D1A0


def as_float_frames(frames) -> torch.Tensor:
    """uint8 pixels -> floats in ``[0, 1]``; float input is passed through as float64."""
    t = frames if isinstance(frames, torch.Tensor) else torch.as_tensor(np.asarray(frames))
    return t.to(DTYPE) / 255.0 if t.dtype == torch.uint8 else t.to(DTYPE)


class SurrogateEncoder:
    """Frozen patch encoder: split into non-overlapping patches, project, then
    normalize each token to zero mean / unit variance over its channels.

    A token with zero spread (e.g. a black patch) maps to the zero vector.
    """

    def __init__(self, frame_shape: Sequence[int] = (32, 32, 3), patch: int = 4, dim: int = 64,
                 seed: int = ENCODER_SEED, pixel_scale: float = 1.0):
        h, w, c = frame_shape
        if h % patch or w % patch:
            raise ContractError(f"patch {patch} does not tile {h}x{w}")
        self.frame_shape = (h, w, c)
        self.patch = patch
        self.dim = dim
        self.pixel_scale = pixel_scale
        self.patch_dim = patch * patch * c
        self.n_patches = (h // patch) * (w // patch)
        g = RngStream(seed, 0).derive("surrogate-encoder")
        proj = g.gaussian_np((self.patch_dim, dim)) / math.sqrt(self.patch_dim)
        self.projection = torch.from_numpy(proj)
        self.projection.requires_grad_(False)

    def patches(self, frames: torch.Tensor) -> torch.Tensor:
        """``(..., H, W, C)`` -> ``(..., P, patch_dim)``, row-major over the patch grid."""
        h, w, c = self.frame_shape
        p = self.patch
        lead = frames.shape[:-3]
        x = frames.reshape(*lead, h // p, p, w // p, p, c)
        nd = len(lead)
        x = x.permute(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
        return x.reshape(*lead, self.n_patches, self.patch_dim)

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        """``(..., H, W, C)`` frames (float, same scale as training) -> ``(..., P, dim)``."""
        x = self.patches(frames.to(DTYPE) * self.pixel_scale) @ self.projection
        mu = x.mean(dim=-1, keepdim=True)
        centered = x - mu
        sd = centered.pow(2).mean(dim=-1, keepdim=True).sqrt()
        return torch.where(sd > 1e-12, centered / torch.where(sd > 1e-12, sd, torch.ones_like(sd)),
                           torch.zeros_like(centered))


class MemoryBank:
    """FIFO of at most ``capacity`` frames with a cached token encoding, oldest first."""

    def __init__(self, capacity: int, encoder: SurrogateEncoder):
        if capacity < 0:
            raise ContractError("capacity must be >= 0")
        self.capacity = capacity
        self.encoder = encoder
        self.frames: deque[torch.Tensor] = deque()
        self._tokens: deque[torch.Tensor] = deque()

    def __len__(self) -> int:
        return len(self.frames)

    def push_frame(self, frame) -> "MemoryBank":
        f = as_float_frames(frame)
        if tuple(f.shape) != self.encoder.frame_shape:
            raise ContractError(f"frame shape {tuple(f.shape)} != {self.encoder.frame_shape}")
        if self.capacity == 0:
            return self
        self.frames.append(f)
        self._tokens.append(self.encoder.encode(f))
        while len(self.frames) > self.capacity:
            self.frames.popleft()
            self._tokens.popleft()
        return self

    def extend(self, frames: Iterable) -> "MemoryBank":
        for f in frames:
            self.push_frame(f)
        return self

    def clone(self) -> "MemoryBank":
        other = MemoryBank(self.capacity, self.encoder)
        other.frames = deque(self.frames)
        other._tokens = deque(self._tokens)
        return other

    @property
    def tokens(self) -> torch.Tensor:
        if not self._tokens:
            return torch.zeros(0, self.encoder.dim, dtype=DTYPE)
        return torch.cat(list(self._tokens), dim=0)

    def padded(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Tokens padded to full capacity (front-padded) and the matching keep-mask."""
        P, d = self.encoder.n_patches, self.encoder.dim
        total = self.capacity * P
        toks = torch.zeros(total, d, dtype=DTYPE)
        mask = torch.zeros(total, dtype=torch.bool)
        n = len(self._tokens) * P
        if n:
            toks[total - n:] = self.tokens
            mask[total - n:] = True
        return toks, mask


def encode_history(bank: MemoryBank, enc: SurrogateEncoder | None = None) -> torch.Tensor | None:
    """``(L * P, dim)`` tokens of the bank, or ``None`` for an empty bank."""
    if len(bank) == 0:
        return None
    enc = enc or bank.encoder
    return enc.encode(torch.stack(list(bank.frames))).reshape(-1, enc.dim)


def push_frame(bank: MemoryBank, frame) -> MemoryBank:
    return bank.push_frame(frame)


class CrossAttention(nn.Module):
    """Backbone tokens query memory tokens; output projection starts at zero."""

    def __init__(self, dim: int, mem_dim: int, attn_dim: int = 32, heads: int = 1,
                 generator: torch.Generator | None = None):
        super().__init__()
        if attn_dim % heads:
            raise ContractError("attn_dim must be divisible by heads")
        self.dim, self.mem_dim, self.attn_dim, self.heads = dim, mem_dim, attn_dim, heads

        def init(rows, cols):
            return nn.Parameter(torch.randn(rows, cols, generator=generator, dtype=DTYPE) / math.sqrt(rows))

        self.w_q = init(dim, attn_dim)
        self.w_k = init(mem_dim, attn_dim)
        self.w_v = init(mem_dim, attn_dim)
        self.w_o = nn.Parameter(torch.zeros(attn_dim, dim, dtype=DTYPE))

    def attention(self, queries: torch.Tensor, memory: torch.Tensor,
                  mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """``queries (..., N, D)``, ``memory (..., M, D_mem)`` -> (``(..., N, attn_dim)``, weights)."""
        if memory.shape[-1] != self.mem_dim:
            raise ContractError(f"memory dim {memory.shape[-1]} != {self.mem_dim}")
        if queries.shape[-1] != self.dim:
            raise ContractError(f"feature dim {queries.shape[-1]} != {self.dim}")
        h, dh = self.heads, self.attn_dim // self.heads

        def split(x):
            return x.reshape(*x.shape[:-1], h, dh).transpose(-2, -3)

        q = split(queries @ self.w_q)
        k = split(memory @ self.w_k)
        v = split(memory @ self.w_v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        keep = None if mask is None else mask[..., None, None, :]
        weights = softmax_rows(scores, keep)
        ctx = (weights @ v).transpose(-2, -3)
        return ctx.reshape(*ctx.shape[:-2], self.attn_dim), weights

    def forward(self, feat: torch.Tensor, memory: torch.Tensor | None,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        return cross_attend(feat, memory, self, mask)


def cross_attend(feat: torch.Tensor, memory: torch.Tensor | None, p: CrossAttention,
                 mask: torch.Tensor | None = None) -> torch.Tensor:
    """``feat (..., T, H, W, D)`` + attention over ``memory (..., M, D_mem)``, residually.

    Rows whose memory is empty (or fully masked) come back unchanged.
    """
    if memory is None or memory.shape[-2] == 0:
        return feat
    if memory.shape[-1] != p.mem_dim:
        raise ContractError(f"memory dim {memory.shape[-1]} != {p.mem_dim}")
    grid = feat.shape[-4:]
    q = feat.reshape(*feat.shape[:-4], -1, grid[-1])
    ctx, _ = p.attention(q, memory, mask)
    return feat + (ctx @ p.w_o).reshape(feat.shape)
