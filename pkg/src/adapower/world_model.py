"""Action-conditioned next-frame predictor with frozen backbone and trainable adapters.

Frames are float tensors in ``[0, 1]`` shaped ``(..., H, W, C)``. Latents are
identity patchifications ``(..., H/p, W/p, p*p*C)``; the backbone reads the
last ``context`` latents, and predicts the next one as a residual on the most
recent frame.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .memory import CrossAttention, MemoryBank, SurrogateEncoder, as_float_frames, cross_attend
from .numeric import DTYPE, ContractError, NumericError, RngStream, softmax_rows
from .pushbox import EnvState, env_step, render
from .tsttt import AxisLayout, TSTTTLayer, TTTState


@dataclass(frozen=True)
class WorldModelConfig:
    frame_size: int = 32
    channels: int = 3
    patch: int = 8
    dim: int = 64
    blocks: int = 6
    heads: int = 4
    mlp_ratio: int = 2
    adapter_stride: int = 2
    context: int = 2
    memory_capacity: int = 4
    ttt_layout: str = "TS+C"
    ttt_rank: int = 16
    ttt_chunk: int = 16
    ttt_eta: float = 0.1
    ttt_persist: bool = False
    detach_inner: bool = False
    use_ttt: bool = True
    use_mp: bool = True
    mem_patch: int = 4
    mem_dim: int = 64
    attn_dim: int = 32
    mem_heads: int = 1
    action_dim: int = 2
    action_hidden: int = 64
    mode: str = "deterministic"
    noise_std: float = 1.0

    def __post_init__(self):
        if self.frame_size % self.patch or self.frame_size % self.mem_patch:
            raise ContractError("patch sizes must divide the frame size")
        if not 1 <= self.adapter_stride < self.blocks:
            raise ContractError("adapter stride must lie in [1, blocks)")
        if self.context < 1 or self.dim % self.heads:
            raise ContractError("invalid context length or head count")
        if self.mode not in ("deterministic", "noise"):
            raise ContractError(f"unknown mode {self.mode!r}")
        AxisLayout.parse(self.ttt_layout)

    @property
    def grid(self) -> int:
        return self.frame_size // self.patch

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def slots(self) -> int:
        return self.context + (1 if self.mode == "noise" else 0)

    @property
    def adapter_sites(self) -> list[int]:
        """1-based indices of the blocks followed by an adapter (never the last block)."""
        return [b for b in range(1, self.blocks) if b % self.adapter_stride == 0]


def patchify(frame: torch.Tensor, patch: int) -> torch.Tensor:
    """``(..., H, W, C)`` -> ``(..., H/p, W/p, p*p*C)``."""
    *lead, H, W, C = frame.shape
    if H % patch or W % patch:
        raise ContractError(f"patch {patch} does not tile a {H}x{W} frame")
    x = frame.reshape(*lead, H // patch, patch, W // patch, patch, C)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, H // patch, W // patch, patch * patch * C)


def unpatchify(latent: torch.Tensor, patch: int, channels: int = 3) -> torch.Tensor:
    *lead, h, w, d = latent.shape
    if d != patch * patch * channels:
        raise ContractError(f"latent dim {d} != {patch}*{patch}*{channels}")
    x = latent.reshape(*lead, h, w, patch, patch, channels)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, h * patch, w * patch, channels)


frames_to_float = as_float_frames


def frames_to_uint8(frames: torch.Tensor) -> np.ndarray:
    return (frames.detach().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8).numpy()


class Block(nn.Module):
    """Pre-norm transformer block: full self-attention then a GELU MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, generator: torch.Generator):
        super().__init__()
        self.heads = heads

        def lin(i, o):
            return nn.Parameter(torch.randn(i, o, generator=generator, dtype=DTYPE) / math.sqrt(i))

        self.ln1_w = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.ln1_b = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.w_qkv = lin(dim, 3 * dim)
        self.w_out = nn.Parameter(lin(dim, dim).detach() * 0.5)
        self.ln2_w = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.ln2_b = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.w_fc = lin(dim, mlp_ratio * dim)
        self.b_fc = nn.Parameter(torch.zeros(mlp_ratio * dim, dtype=DTYPE))
        self.w_proj = nn.Parameter(lin(mlp_ratio * dim, dim).detach() * 0.5)
        self.b_proj = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x (B, N, D)``."""
        B, N, D = x.shape
        h = F.layer_norm(x, (D,), self.ln1_w, self.ln1_b)
        q, k, v = (h @ self.w_qkv).split(D, dim=-1)
        dh = D // self.heads

        def heads(t):
            return t.reshape(B, N, self.heads, dh).transpose(1, 2)

        att = softmax_rows(heads(q) @ heads(k).transpose(-1, -2) / math.sqrt(dh))
        y = (att @ heads(v)).transpose(1, 2).reshape(B, N, D)
        x = x + y @ self.w_out
        h = F.layer_norm(x, (D,), self.ln2_w, self.ln2_b)
        return x + F.gelu(h @ self.w_fc + self.b_fc) @ self.w_proj + self.b_proj


class ActionEncoder(nn.Module):
    """Two-layer perceptron; the output layer starts at zero."""

    def __init__(self, action_dim: int, hidden: int, dim: int, generator: torch.Generator):
        super().__init__()
        self.w1 = nn.Parameter(torch.randn(action_dim, hidden, generator=generator, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.randn(hidden, generator=generator, dtype=DTYPE) * 0.5)
        self.w2 = nn.Parameter(torch.zeros(hidden, dim, dtype=DTYPE))
        self.b2 = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        return F.gelu(a @ self.w1 + self.b1) @ self.w2 + self.b2


@dataclass
class Memory:
    """Batched memory tokens ``(B, M, D_mem)`` with keep-mask ``(B, M)``."""

    tokens: torch.Tensor
    mask: torch.Tensor

    @classmethod
    def from_bank(cls, bank: MemoryBank | None, batch: int = 1) -> "Memory | None":
        if bank is None or bank.capacity == 0:
            return None
        toks, mask = bank.padded()
        return cls(toks.expand(batch, *toks.shape).clone(), mask.expand(batch, *mask.shape).clone())

    def push(self, frame_tokens: torch.Tensor) -> "Memory":
        """Append one frame's tokens ``(B, P, D_mem)`` per row, dropping the oldest."""
        P = frame_tokens.shape[-2]
        keep = torch.ones(*self.mask.shape[:-1], P, dtype=torch.bool)
        return Memory(torch.cat([self.tokens[:, P:], frame_tokens], dim=1),
                      torch.cat([self.mask[:, P:], keep], dim=1))


@dataclass
class Trajectory:
    frames: torch.Tensor               # (..., horizon, H, W, C), floats in [0, 1]
    errors: torch.Tensor | None = None  # per-step MSE vs ground truth, when given

    def __len__(self) -> int:
        return self.frames.shape[-4]


class WorldModel(nn.Module):
    def __init__(self, config: WorldModelConfig, seed: int = 0):
        super().__init__()
        self.config = cfg = config
        self.seed = seed
        root = RngStream(seed, 0).derive("world-model")
        g_base = root.derive("base").torch_generator()
        g_adapt = root.derive("adapters").torch_generator()
        D, g = cfg.dim, cfg.grid
        self.patch_embed = nn.Parameter(torch.randn(cfg.patch_dim, D, generator=g_base, dtype=DTYPE)
                                        / math.sqrt(cfg.patch_dim))
        self.patch_bias = nn.Parameter(torch.zeros(D, dtype=DTYPE))
        self.pos = nn.Parameter(torch.randn(cfg.slots, g, g, D, generator=g_base, dtype=DTYPE) * 0.1)
        self.blocks = nn.ModuleList([Block(D, cfg.heads, cfg.mlp_ratio, g_base) for _ in range(cfg.blocks)])
        self.ln_out_w = nn.Parameter(torch.ones(D, dtype=DTYPE))
        self.ln_out_b = nn.Parameter(torch.zeros(D, dtype=DTYPE))
        self.head = nn.Parameter(torch.randn(D, cfg.patch_dim, generator=g_base, dtype=DTYPE)
                                 / math.sqrt(D) * 0.1)
        self.head_bias = nn.Parameter(torch.zeros(cfg.patch_dim, dtype=DTYPE))

        self.action_encoder = ActionEncoder(cfg.action_dim, cfg.action_hidden, D, g_adapt)
        grid = (cfg.slots, g, g, D)
        n_sites = len(cfg.adapter_sites)
        self.mp = nn.ModuleList([CrossAttention(D, cfg.mem_dim, cfg.attn_dim, cfg.mem_heads, g_adapt)
                                 for _ in range(n_sites if cfg.use_mp else 0)])
        self.ttt = nn.ModuleList([TSTTTLayer(grid, cfg.ttt_layout, cfg.ttt_rank, cfg.ttt_chunk,
                                             cfg.ttt_eta, g_adapt, cfg.detach_inner)
                                  for _ in range(n_sites if cfg.use_ttt else 0)])
        self.encoder = SurrogateEncoder((cfg.frame_size, cfg.frame_size, cfg.channels),
                                        cfg.mem_patch, cfg.mem_dim)

    # -- parameter groups ----------------------------------------------------
    def base_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if not self._is_adapter(n)}

    def adapter_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if self._is_adapter(n)}

    def ttt_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if n.startswith("ttt.")}

    @staticmethod
    def _is_adapter(name: str) -> bool:
        return name.startswith(("action_encoder.", "mp.", "ttt."))

    def freeze_base(self) -> None:
        for p in self.base_parameters().values():
            p.requires_grad_(False)

    def new_bank(self) -> MemoryBank:
        return MemoryBank(self.config.memory_capacity, self.encoder)

    # -- forward -------------------------------------------------------------
    def forward(self, context: torch.Tensor, actions: torch.Tensor, memory: Memory | None = None,
                adapters: bool = True, ttt_mode: str = "adaptive",
                ttt_states: list[list[TTTState]] | None = None,
                noise: torch.Tensor | None = None) -> tuple[torch.Tensor, list[list[TTTState]]]:
        """Predict the next latent.

        context: ``(B, C, H, W, 3)`` frames; actions: ``(B, C, A)`` where row ``t``
        is the action taken after context frame ``t`` (the last row drives the
        prediction). Returns ``(B, h, w, patch_dim)`` and the final fast weights.
        """
        cfg = self.config
        B, C = context.shape[:2]
        if C != cfg.context:
            raise ContractError(f"context length {C} != {cfg.context}")
        lat = patchify(context, cfg.patch)                     # (B, C, g, g, pd)
        last = lat[:, -1]
        if cfg.mode == "noise":
            if noise is None:
                raise ContractError("noise-conditioned mode needs a noise draw")
            lat = torch.cat([lat, (last + cfg.noise_std * noise)[:, None]], dim=1)
        x = lat @ self.patch_embed + self.patch_bias + self.pos
        if adapters:
            emb = self.action_encoder(actions)                 # (B, C, D)
            if cfg.mode == "noise":
                emb = torch.cat([emb, emb[:, -1:]], dim=1)
            x = x + emb[:, :, None, None, :]
        grid = x.shape[1:]
        D = cfg.dim
        sites = cfg.adapter_sites
        finals: list[list[TTTState]] = []
        h = x.reshape(B, -1, D)
        for i, blk in enumerate(self.blocks, start=1):
            h = blk(h)
            if not torch.isfinite(h).all():
                raise NumericError("non-finite activations", f"block {i}")
            if adapters and i in sites:
                s = sites.index(i)
                v = h.reshape(B, *grid)
                if cfg.use_mp and memory is not None:
                    v = cross_attend(v, memory.tokens, self.mp[s], memory.mask)
                if cfg.use_ttt:
                    prev = ttt_states[s] if ttt_states is not None else None
                    v, st = self.ttt[s](v, ttt_mode, prev, where=f"adapter after block {i}")
                    finals.append(st)
                    if not torch.isfinite(v).all():
                        raise NumericError("non-finite activations", f"adapter after block {i}")
                h = v.reshape(B, -1, D)
        h = F.layer_norm(h, (D,), self.ln_out_w, self.ln_out_b).reshape(B, *grid)
        out = last + h[:, -1] @ self.head + self.head_bias
        return out, finals

    def noise_for(self, rng: RngStream | None, batch: int) -> torch.Tensor | None:
        if self.config.mode != "noise":
            return None
        g = self.config.grid
        rng = rng or RngStream(self.seed, 0).derive("noise")
        return rng.gaussian((batch, g, g, self.config.patch_dim))

    # -- rollouts ------------------------------------------------------------
    def rollout(self, init_frames, actions, bank: MemoryBank | None = None,
                past_actions=None, ttt_mode: str = "adaptive", adapters: bool = True,
                rng: RngStream | None = None, truth=None) -> Trajectory:
        return rollout(self, init_frames, actions, bank, past_actions, ttt_mode, adapters, rng, truth)


def _as_batch(init_frames, actions, past_actions, context: int):
    frames = frames_to_float(init_frames)
    acts = torch.as_tensor(np.asarray(actions) if not isinstance(actions, torch.Tensor) else actions).to(DTYPE)
    single = acts.dim() == 2
    if single:
        acts = acts[None]
    if frames.dim() == 4:
        frames = frames[None]
    if frames.shape[1] < context:
        raise ContractError(f"need >= {context} initial frames, got {frames.shape[1]}")
    N = acts.shape[0]
    frames = frames.expand(N, *frames.shape[1:]) if frames.shape[0] == 1 else frames
    if past_actions is None:
        past = torch.zeros(N, context - 1, acts.shape[-1], dtype=DTYPE)
    else:
        past = torch.as_tensor(np.asarray(past_actions), dtype=DTYPE).reshape(-1, context - 1, acts.shape[-1])
        past = past.expand(N, *past.shape[1:])
    return frames, acts, past, single


def predict_step(model: WorldModel, context, action, bank: MemoryBank | None = None,
                 ttt_mode: str = "adaptive", past_actions=None, adapters: bool = True,
                 rng: RngStream | None = None) -> torch.Tensor:
    """One next-frame latent ``(h, w, patch_dim)`` from ``C`` context frames."""
    cfg = model.config
    ctx = frames_to_float(context)
    if ctx.shape[0] != cfg.context:
        raise ContractError(f"context length {ctx.shape[0]} != {cfg.context}")
    a = torch.as_tensor(np.asarray(action), dtype=DTYPE).reshape(1, 1, -1)
    past = (torch.zeros(1, cfg.context - 1, a.shape[-1], dtype=DTYPE) if past_actions is None
            else torch.as_tensor(np.asarray(past_actions), dtype=DTYPE).reshape(1, cfg.context - 1, -1))
    with torch.no_grad():
        out, _ = model(ctx[None], torch.cat([past, a], dim=1), Memory.from_bank(bank),
                       adapters, ttt_mode, noise=model.noise_for(rng, 1))
    return out[0]


def rollout(model, init_frames, actions, bank: MemoryBank | None = None, past_actions=None,
            ttt_mode: str = "adaptive", adapters: bool = True, rng: RngStream | None = None,
            truth=None) -> Trajectory:
    """Autoregressive rollout.

    ``actions`` is ``(horizon, A)`` for one rollout (the bank is updated in
    place) or ``(N, horizon, A)`` for a batch of candidates sharing the initial
    frames and a snapshot of the bank. Frames older than the context window are
    pushed into the bank before the first step.
    """
    if not isinstance(model, WorldModel):
        return model.rollout(init_frames, actions, bank, past_actions)
    cfg = model.config
    C = cfg.context
    frames, acts, past, single = _as_batch(init_frames, actions, past_actions, C)
    N, horizon = acts.shape[:2]
    if single and bank is not None:
        bank.extend(frames[0, :-C])
        work_bank = bank
    else:
        work_bank = bank.clone().extend(frames[0, :-C]) if bank is not None else None
    if work_bank is None and cfg.use_mp:
        work_bank = MemoryBank(cfg.memory_capacity, model.encoder).extend(frames[0, :-C])
    mem = Memory.from_bank(work_bank, N)
    ctx = frames[:, -C:]
    hist = past
    states = None
    rng = rng or RngStream(model.seed, 0).derive("rollout-noise")
    preds = []
    with torch.no_grad():
        for t in range(horizon):
            step_act = acts[:, t:t + 1]
            out, finals = model(ctx, torch.cat([hist, step_act], dim=1), mem, adapters, ttt_mode,
                                states if cfg.ttt_persist else None, model.noise_for(rng, N))
            states = finals
            frame = unpatchify(out, cfg.patch, cfg.channels)
            preds.append(frame)
            leaving = ctx[:, 0]
            if mem is not None:
                mem = mem.push(model.encoder.encode(leaving))
            if single and bank is not None:
                bank.push_frame(leaving[0])
            ctx = torch.cat([ctx[:, 1:], frame[:, None]], dim=1)
            hist = torch.cat([hist, step_act], dim=1)[:, 1:]
    out = torch.stack(preds, dim=1) if preds else torch.zeros(N, 0, *frames.shape[2:], dtype=DTYPE)
    errors = None
    if truth is not None:
        gt = frames_to_float(truth).reshape(out.shape)
        errors = ((out - gt) ** 2).mean(dim=(-3, -2, -1))
    if single:
        return Trajectory(out[0], None if errors is None else errors[0])
    return Trajectory(out, errors)


class GroundTruthModel:
    """Stand-in model that steps the true environment from a known state."""

    def __init__(self, state: EnvState, context: int = 2, memory_capacity: int = 4):
        self.state = state
        self.context = context
        self.memory_capacity = memory_capacity

    def rollout(self, init_frames, actions, bank=None, past_actions=None) -> Trajectory:
        acts = np.asarray(actions, dtype=np.float64)
        single = acts.ndim == 2
        if single:
            acts = acts[None]
        out = np.zeros((acts.shape[0], acts.shape[1], 32, 32, 3), dtype=np.uint8)
        for n, seq in enumerate(acts):
            s = self.state
            for t, a in enumerate(seq):
                s = env_step(s, np.clip(a, -1.0, 1.0))
                out[n, t] = render(s)
        frames = frames_to_float(out)
        return Trajectory(frames[0] if single else frames)


# -- training ----------------------------------------------------------------

@dataclass
class Batch:
    context: torch.Tensor   # (B, C, H, W, 3)
    actions: torch.Tensor   # (B, C, A)
    target: torch.Tensor    # (B, H, W, 3)
    memory: Memory | None = None

    def __len__(self) -> int:
        return self.context.shape[0]


class TransitionSampler:
    """Index of ``(episode, t)`` transitions with context padding and memory frames."""

    def __init__(self, episodes, context: int, memory_capacity: int, encoder: SurrogateEncoder):
        self.episodes = episodes
        self.context = context
        self.capacity = memory_capacity
        self.encoder = encoder
        self.index = np.array([(e, t) for e, ep in enumerate(episodes) for t in range(len(ep) - 1)],
                              dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, rows: Sequence[int]) -> Batch:
        C, L = self.context, self.capacity
        ctx, acts, tgt, mem_frames, mem_keep = [], [], [], [], []
        for r in rows:
            e, t = self.index[r]
            ep = self.episodes[e]
            idx = [max(i, 0) for i in range(t - C + 1, t + 1)]
            ctx.append(ep.frames[idx])
            a = ep.actions[idx].copy()
            for j, i in enumerate(range(t - C + 1, t + 1)):
                if i < 0:
                    a[j] = 0.0
            acts.append(a)
            tgt.append(ep.frames[t + 1])
            if L:
                m_idx = list(range(t - C - L + 1, t - C + 1))
                mem_frames.append(ep.frames[[max(i, 0) for i in m_idx]])
                mem_keep.append([i >= 0 for i in m_idx])
        memory = None
        if L:
            mf = frames_to_float(np.stack(mem_frames))                   # (B, L, H, W, 3)
            toks = self.encoder.encode(mf)                               # (B, L, P, Dm)
            keep = torch.tensor(mem_keep)[:, :, None].expand(-1, -1, toks.shape[2])
            memory = Memory(toks.reshape(len(rows), -1, toks.shape[-1]), keep.reshape(len(rows), -1))
        return Batch(frames_to_float(np.stack(ctx)), torch.as_tensor(np.stack(acts), dtype=DTYPE),
                     frames_to_float(np.stack(tgt)), memory)

    def sample(self, rng: RngStream, batch_size: int) -> Batch:
        return self.batch(rng.integers(len(self), batch_size))


def batch_loss(model: WorldModel, batch: Batch, adapters: bool = True, ttt_mode: str = "adaptive",
               rng: RngStream | None = None) -> torch.Tensor:
    cfg = model.config
    pred, _ = model(batch.context, batch.actions, batch.memory, adapters, ttt_mode,
                    noise=model.noise_for(rng, len(batch)))
    return ((pred - patchify(batch.target, cfg.patch)) ** 2).mean()


class Trainer:
    """AdamW over the adapters with separate step sizes for TS-TTT and the rest.

    With ``base=True`` it instead trains the adapter-free backbone (pretraining).
    """

    def __init__(self, model: WorldModel, base: bool = False, weight_decay: float = 0.01):
        self.model = model
        self.base = base
        if base:
            groups = [{"params": list(model.base_parameters().values()), "lr": 0.0, "name": "base"}]
        else:
            model.freeze_base()
            named = [(n, p) for n, p in model.adapter_parameters().items() if p.requires_grad]
            ttt = [p for n, p in named if n.startswith("ttt.") and not n.endswith("log_eta")]
            # inner step sizes live in log space: decaying them would drag eta towards 1
            eta = [p for n, p in named if n.endswith("log_eta")]
            other = [p for n, p in named if not n.startswith("ttt.")]
            groups = [{"params": ttt, "lr": 0.0, "name": "ttt"},
                      {"params": eta, "lr": 0.0, "name": "ttt", "weight_decay": 0.0},
                      {"params": other, "lr": 0.0, "name": "other"}]
        groups = [g for g in groups if g["params"]]
        self.opt = torch.optim.AdamW(groups, lr=0.0, weight_decay=weight_decay)
        self.steps = 0

    def train_step(self, batch: Batch, lr_ttt: float = 1e-3, lr_other: float = 1e-4,
                   rng: RngStream | None = None) -> float:
        if len(batch) == 0:
            raise ContractError("empty batch")
        for g in self.opt.param_groups:
            g["lr"] = lr_ttt if g["name"] == "ttt" else lr_other
        self.opt.zero_grad(set_to_none=True)
        loss = batch_loss(self.model, batch, adapters=not self.base, rng=rng)
        if not torch.isfinite(loss):
            raise NumericError("non-finite training loss", f"step {self.steps}")
        loss.backward()
        self.opt.step()
        self.steps += 1
        return float(loss.detach())

    def optimizer_tensors(self) -> dict[str, torch.Tensor]:
        """AdamW moments keyed by parameter name, for checkpointing."""
        names = {id(p): n for n, p in self.model.named_parameters()}
        out = {}
        for g in self.opt.param_groups:
            for p in g["params"]:
                st = self.opt.state.get(p)
                if st:
                    out[f"opt.m.{names[id(p)]}"] = st["exp_avg"]
                    out[f"opt.v.{names[id(p)]}"] = st["exp_avg_sq"]
                    out[f"opt.step.{names[id(p)]}"] = torch.as_tensor(st["step"], dtype=DTYPE).reshape(1)
        return out

    def load_optimizer_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        params = dict(self.model.named_parameters())
        for key, val in tensors.items():
            if not key.startswith("opt.m."):
                continue
            name = key[len("opt.m."):]
            p = params[name]
            self.opt.state[p] = {
                "exp_avg": val.to(DTYPE).reshape(p.shape).clone(),
                "exp_avg_sq": tensors[f"opt.v.{name}"].to(DTYPE).reshape(p.shape).clone(),
                "step": torch.tensor(float(tensors[f"opt.step.{name}"].reshape(-1)[0])),
            }


def train_step(trainer: Trainer, batch: Batch, lr_ttt: float, lr_other: float) -> float:
    return trainer.train_step(batch, lr_ttt, lr_other)


def build(config: WorldModelConfig, seed: int = 0) -> WorldModel:
    return WorldModel(config, seed)


def count_parameters(params: dict[str, torch.Tensor]) -> int:
    return sum(p.numel() for p in params.values())
