"""Temporal-spatial test-time-training layer.

Each branch views the feature grid ``v`` of shape ``(..., T, H, W, D)`` as a
sequence of tokens, and runs a linear fast-weight model ``w`` (``r x r``) over
that sequence. For every chunk of tokens ``w`` takes one gradient step on the
reconstruction loss ``|| w k - v' ||^2`` with ``k = x theta_k`` and
``v' = x theta_v``. Each token is then read out as ``(x theta_q) w^T theta_o``.
The branch outputs are folded back to the grid and added residually.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .numeric import DTYPE, ContractError, NumericError


class AxisLayout(str, enum.Enum):
    TS_C = "TS+C"
    T_S_C = "T+S+C"
    T_SC = "T+SC"
    TSC = "TSC"

    @classmethod
    def parse(cls, name: "str | AxisLayout") -> "AxisLayout":
        if isinstance(name, AxisLayout):
            return name
        key = str(name).strip().upper().replace("_", "+")
        for layout in cls:
            if key in (layout.value, layout.name.replace("_", "+")):
                return layout
        raise ContractError(f"unknown axis layout {name!r}")


# Per branch: (axes that index tokens, axes fused into the token vector), in
# terms of the grid axes T=0, H=1, W=2, D=3.
_BRANCHES: dict[AxisLayout, tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]] = {
    AxisLayout.TS_C: (((3,), (0, 1, 2)), ((0, 1, 2), (3,))),
    AxisLayout.T_S_C: (((0,), (1, 2, 3)), ((1, 2), (0, 3)), ((0, 1, 2), (3,))),
    AxisLayout.T_SC: (((0,), (1, 2, 3)), ((1, 2, 3), (0,))),
    AxisLayout.TSC: (((), (0, 1, 2, 3)),),
}


def branch_shapes(layout: AxisLayout, grid: Sequence[int]) -> list[tuple[int, int]]:
    """``(n_tokens, d_tok)`` for each branch of ``layout`` on a ``(T, H, W, D)`` grid."""
    layout = AxisLayout.parse(layout)
    return [(math.prod(grid[a] for a in tok), math.prod(grid[a] for a in feat))
            for tok, feat in _BRANCHES[layout]]


def tokens_for_layout(v: torch.Tensor, layout: AxisLayout | str) -> list[torch.Tensor]:
    """Rearrange ``v (..., T, H, W, D)`` into one ``(..., n_tokens, d_tok)`` matrix per branch."""
    layout = AxisLayout.parse(layout)
    if v.dim() < 4:
        raise ContractError(f"expected (..., T, H, W, D), got {tuple(v.shape)}")
    lead = v.dim() - 4
    grid = v.shape[lead:]
    out = []
    for (tok, feat), (n, d) in zip(_BRANCHES[layout], branch_shapes(layout, grid)):
        perm = list(range(lead)) + [lead + a for a in tok + feat]
        out.append(v.permute(perm).reshape(*v.shape[:lead], n, d))
    return out


def untokenize(mats: Sequence[torch.Tensor], layout: AxisLayout | str,
               grid: Sequence[int]) -> list[torch.Tensor]:
    """Inverse of :func:`tokens_for_layout`, one grid-shaped tensor per branch."""
    layout = AxisLayout.parse(layout)
    grid = tuple(grid)
    out = []
    for m, (tok, feat) in zip(mats, _BRANCHES[layout]):
        lead = m.dim() - 2
        order = tok + feat
        x = m.reshape(*m.shape[:lead], *(grid[a] for a in order))
        inv = [0] * 4
        for i, a in enumerate(order):
            inv[a] = i
        out.append(x.permute(list(range(lead)) + [lead + i for i in inv]))
    return out


class TTTBranch(nn.Module):
    """Parameters of one branch: projections, initial fast weights and inner step size."""

    def __init__(self, d_tok: int, rank: int, eta: float | None = None, chunk: int = 16,
                 generator: torch.Generator | None = None):
        super().__init__()
        if not 1 <= rank <= d_tok:
            raise ContractError(f"rank {rank} must be within [1, {d_tok}]")
        if chunk < 1:
            raise ContractError("chunk must be >= 1")
        std = 1.0 / math.sqrt(d_tok)

        def proj():
            return nn.Parameter(torch.randn(d_tok, rank, generator=generator, dtype=DTYPE) * std)

        self.theta_q = proj()
        self.theta_k = proj()
        self.theta_v = proj()
        self.theta_o = nn.Parameter(torch.zeros(rank, d_tok, dtype=DTYPE))
        self.w0 = nn.Parameter(torch.eye(rank, dtype=DTYPE))
        eta = 0.1 / d_tok if eta is None else eta
        if eta < 0:
            raise ContractError("inner learning rate must be >= 0")
        # trained in log space so it stays positive; eta = 0 pins it at zero
        self.log_eta = nn.Parameter(torch.tensor(math.log(eta) if eta > 0 else -math.inf, dtype=DTYPE),
                                    requires_grad=eta > 0)
        self.d_tok, self.rank, self.chunk = d_tok, rank, chunk

    @property
    def eta(self) -> torch.Tensor:
        return torch.exp(self.log_eta)


@dataclass
class TTTState:
    w: torch.Tensor          # (..., r, r)
    tokens_seen: int = 0

    @classmethod
    def reset(cls, p: TTTBranch, lead: Sequence[int] = ()) -> "TTTState":
        return cls(p.w0.expand(*lead, p.rank, p.rank), 0)


def inner_loss(w: torch.Tensor, token: torch.Tensor, p: TTTBranch) -> torch.Tensor:
    """Reconstruction loss of a single token under fast weights ``w``."""
    k = token @ p.theta_k
    target = token @ p.theta_v
    loss = ((w @ k - target) ** 2).sum()
    if not torch.isfinite(loss):
        raise NumericError("inner loss is not finite")
    return loss


def inner_grad(w: torch.Tensor, k: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over the chunk of ``2 (w k - v') k^T``; ``k``/``target`` are ``(..., c, r)``."""
    resid = k @ w.transpose(-1, -2) - target
    return 2.0 * resid.transpose(-1, -2) @ k / k.shape[-2]


def inner_step(state: TTTState, chunk_tokens: torch.Tensor, p: TTTBranch,
               where: str = "ttt") -> TTTState:
    k = chunk_tokens @ p.theta_k
    target = chunk_tokens @ p.theta_v
    g = inner_grad(state.w, k, target)
    if not torch.isfinite(g).all():
        raise NumericError("non-finite inner gradient", where)
    return TTTState(state.w - p.eta * g, state.tokens_seen + chunk_tokens.shape[-2])


def branch_forward(tokens: torch.Tensor, p: TTTBranch, mode: str = "adaptive",
                   state: TTTState | None = None, detach_inner: bool = False,
                   where: str = "ttt") -> tuple[torch.Tensor, TTTState]:
    """Run the fast-weight model over ``tokens (..., n, d_tok)`` in chunk order.

    Token ``i`` is read out with the weights produced by the update that
    covers its own chunk. ``frozen`` mode reads every token with ``w0``.
    """
    if tokens.shape[-2] == 0:
        raise ContractError("branch_forward needs at least one token")
    if tokens.shape[-1] != p.d_tok:
        raise ContractError(f"token dim {tokens.shape[-1]} != branch dim {p.d_tok}")
    lead = tokens.shape[:-2]
    if state is None:
        state = TTTState.reset(p, lead)
    q = tokens @ p.theta_q
    if mode not in ("adaptive", "frozen"):
        raise ContractError(f"unknown ttt mode {mode!r}")
    eta = p.eta
    still = mode == "frozen" or (not eta.requires_grad and float(eta) == 0.0)
    if still:
        # eta = 0 leaves w untouched, so read every token with the same weights
        out = (q @ state.w.transpose(-1, -2)) @ p.theta_o
        seen = state.tokens_seen + (tokens.shape[-2] if mode == "adaptive" else 0)
        return out, TTTState(state.w, seen)
    k = tokens @ p.theta_k
    target = tokens @ p.theta_v
    n = tokens.shape[-2]
    w = state.w
    reads = []
    for start in range(0, n, p.chunk):
        sl = slice(start, min(start + p.chunk, n))
        kc, tc = k[..., sl, :], target[..., sl, :]
        g = inner_grad(w, kc, tc)
        if not torch.isfinite(g).all():
            raise NumericError("non-finite inner gradient", where)
        w = w - eta * (g.detach() if detach_inner else g)
        reads.append(q[..., sl, :] @ w.transpose(-1, -2))
    z = torch.cat(reads, dim=-2) @ p.theta_o
    return z, TTTState(w, state.tokens_seen + n)


class TSTTTLayer(nn.Module):
    """Residual test-time-training layer over a fixed ``(T, H, W, D)`` grid."""

    def __init__(self, grid: Sequence[int], layout: AxisLayout | str = AxisLayout.TS_C,
                 rank: int = 16, chunk: int = 16, eta_scale: float = 0.1,
                 generator: torch.Generator | None = None, detach_inner: bool = False):
        super().__init__()
        self.layout = AxisLayout.parse(layout)
        self.grid = tuple(int(g) for g in grid)
        self.detach_inner = detach_inner
        self.branches = nn.ModuleList()
        for _, d_tok in branch_shapes(self.layout, self.grid):
            self.branches.append(TTTBranch(d_tok, min(rank, d_tok), eta_scale / d_tok, chunk, generator))

    def forward(self, v: torch.Tensor, mode: str = "adaptive",
                states: list[TTTState] | None = None,
                where: str = "ttt") -> tuple[torch.Tensor, list[TTTState]]:
        return layer_forward(v, self.layout, self.branches, mode, states, self.detach_inner, where)


def layer_forward(v: torch.Tensor, layout: AxisLayout | str, branch_params: Sequence[TTTBranch],
                  mode: str = "adaptive", states: Sequence[TTTState | None] | None = None,
                  detach_inner: bool = False, where: str = "ttt") -> tuple[torch.Tensor, list[TTTState]]:
    layout = AxisLayout.parse(layout)
    grid = tuple(v.shape[-4:])
    mats = tokens_for_layout(v, layout)
    if len(mats) != len(branch_params):
        raise ContractError(f"layout {layout.value} has {len(mats)} branches, got {len(branch_params)} parameter sets")
    if states is None:
        states = [None] * len(mats)
    outs, finals = [], []
    for i, (m, p, st) in enumerate(zip(mats, branch_params, states)):
        if m.shape[-1] != p.d_tok:
            raise ContractError(f"branch {i}: token dim {m.shape[-1]} != parameter dim {p.d_tok}")
        z, fin = branch_forward(m, p, mode, st, detach_inner, f"{where}/branch{i}")
        outs.append(z)
        finals.append(fin)
    out = v
    for z in untokenize(outs, layout, grid):
        out = out + z
    return out, finals
