"""Dense float64 arithmetic helpers, gradient plumbing and counter-based RNG streams.

Tensors are plain ``torch.Tensor`` objects in float64; torch autograd plays the
role of the gradient tape. Everything that needs randomness draws it from an
explicit :class:`RngStream` so runs replay bit-for-bit.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

DTYPE = torch.float64


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError):
    """Tensor extents do not line up."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message: str, where: str | None = None):
        super().__init__(message if where is None else f"{message} (at {where})")
        self.where = where


def tensor(data, shape=None) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=DTYPE)
    if shape is not None:
        t = t.reshape(shape)
    return t


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError("non-finite values", where)
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes, with loud shape errors."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def softmax_rows(a: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Row-wise softmax with max subtraction.

    ``mask`` (True = keep) drops entries; a row with nothing kept comes back as
    all zeros instead of NaN.
    """
    if mask is not None:
        a = a.masked_fill(~mask, -math.inf)
    m = a.amax(dim=-1, keepdim=True)
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m)).detach()
    e = torch.exp(a - m)
    s = e.sum(dim=-1, keepdim=True)
    return e / torch.where(s > 0, s, torch.ones_like(s))


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor],
             retain_graph: bool = False) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. each named tensor.

    Tensors the loss does not depend on get zeros.
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = list(params)
    live = [n for n in names if params[n].requires_grad]
    grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in live],
                                allow_unused=True, retain_graph=retain_graph) if live else []
    out = {n: torch.zeros_like(params[n]) for n in names}
    for n, g in zip(live, grads):
        if g is not None:
            out[n] = g
    return out


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
               eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    x0 = x.detach().clone().to(DTYPE)
    xr = x0.clone().requires_grad_(True)
    y = f(xr)
    if not torch.isfinite(y).all():
        raise NumericError("f is not finite at x")
    g = torch.autograd.grad(y.reshape(()), xr, allow_unused=True)[0] if y.requires_grad else None
    analytic = torch.zeros_like(x0) if g is None else g.detach()
    flat = x0.reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xp[i] += eps
            xm = flat.clone()
            xm[i] -= eps
            fp = f(xp.reshape(x0.shape))
            fm = f(xm.reshape(x0.shape))
            if not (torch.isfinite(fp).all() and torch.isfinite(fm).all()):
                raise NumericError("f is not finite near x", where=f"coordinate {i}")
            fd = float((fp - fm).reshape(()) / (2 * eps))
            err = abs(float(analytic.reshape(-1)[i]) - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


def _mix64(*parts: int | str) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


@dataclass
class RngStream:
    """Counter-based random stream on Philox-4x64.

    Draw ``n`` values -> consume ``ceil(n / 4)`` counter blocks. The Gaussian
    draw is Box-Muller on pairs of uniforms: ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
    """

    master_seed: int
    stream_id: int = 0
    counter: int = 0

    def derive(self, *labels: int | str) -> "RngStream":
        """Independent child stream keyed by ``labels``; the parent is untouched."""
        return RngStream(self.master_seed, _mix64(self.stream_id, *labels), 0)

    def _raw(self, n: int) -> np.ndarray:
        key = ((self.master_seed & (2**64 - 1)) << 64) | (self.stream_id & (2**64 - 1))
        gen = np.random.Philox(key=key, counter=self.counter)
        raw = gen.random_raw(n) if n else np.zeros(0, dtype=np.uint64)
        self.counter += -(-n // 4)
        return raw

    def uniform_np(self, shape: int | Iterable[int]) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        return ((self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53).reshape(shape)

    def gaussian_np(self, shape: int | Iterable[int]) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform_np(2 * n)
        z = np.sqrt(-2.0 * np.log1p(-u[0::2])) * np.cos(2.0 * math.pi * u[1::2])
        return z.reshape(shape)

    def uniform(self, shape) -> torch.Tensor:
        return torch.from_numpy(self.uniform_np(shape))

    def gaussian(self, shape) -> torch.Tensor:
        return torch.from_numpy(self.gaussian_np(shape))

    def integers(self, high: int, size: int) -> np.ndarray:
        return np.minimum((self.uniform_np(size) * high).astype(np.int64), high - 1)

    def torch_generator(self) -> torch.Generator:
        """A torch generator seeded from the next draw, for torch-side init."""
        g = torch.Generator()
        g.manual_seed(int(self._raw(1)[0] & np.uint64(2**63 - 1)))
        return g
