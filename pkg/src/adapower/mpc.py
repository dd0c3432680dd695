"""Receding-horizon planning with a learned (or oracle) video dynamics model.

Each replan: the base policy proposes ``K`` action sequences by imagining its
own future with :func:`pushbox.heuristic_step`, ``M`` more are Gaussian
perturbations of those, every candidate is rolled out through the model, and
the first ``replan_stride`` actions of the best-scoring one are executed.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np
import torch

from .memory import MemoryBank
from .numeric import ContractError, NumericError, RngStream
from .pushbox import (EnvState, Profile, TaskSpec, env_step, extract_centroids, heuristic_step,
                      is_success, render, reset, scripted_policy)
from .world_model import GroundTruthModel, WorldModel, frames_to_uint8, rollout

MISSING_BLOCK_PENALTY = 64.0


class PlannerError(RuntimeError):
    """Every candidate failed to roll out."""


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 8
    K: int = 8
    M: int = 8
    sigma: float = 0.05
    replan_stride: int = 1
    discount: float = 1.0
    workers: int = 1
    group_size: int = 0  # candidates per model call; 0 = all at once

    def __post_init__(self):
        if self.K < 0 or self.M < 0 or self.K + self.M < 1:
            raise ContractError("need K + M >= 1")
        if self.M and not self.K:
            raise ContractError("perturbed candidates need at least one policy candidate")
        if not self.horizon >= self.replan_stride >= 1:
            raise ContractError("need horizon >= replan_stride >= 1")
        if self.sigma < 0:
            raise ContractError("sigma must be >= 0")


@dataclass
class CandidateSet:
    actions: np.ndarray                 # (K + M, horizon, 2)
    sources: list[str]
    rewards: np.ndarray | None = None
    failed: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)


def propose_candidates(profile: Profile, obs_state: EnvState, cfg: PlannerConfig,
                       rng: RngStream) -> CandidateSet:
    """``rng`` is the episode stream; draws are keyed by (env step, candidate, horizon step).

    Candidate 0's first action uses exactly the draw the bare policy would use
    at this env step, so ``K=1, M=0`` replays the bare policy.
    """
    t = obs_state.step
    seqs, sources = [], []
    for k in range(cfg.K):
        s = obs_state
        seq = []
        for j in range(cfg.horizon):
            stream = rng.derive("policy", t) if k == 0 and j == 0 else rng.derive("policy", t, k, j)
            a = scripted_policy(s, profile, stream)
            seq.append(a)
            s = heuristic_step(s, a)
        seqs.append(seq)
        sources.append(f"policy:{k}")
    actions = np.asarray(seqs, dtype=np.float64).reshape(cfg.K, cfg.horizon, 2)
    if cfg.M:
        pr = rng.derive("perturb", t)
        src = pr.integers(cfg.K, cfg.M)
        noise = pr.gaussian_np((cfg.M, cfg.horizon, 2)) * cfg.sigma
        perturbed = np.clip(actions[src] + noise, -1.0, 1.0)
        actions = np.concatenate([actions, perturbed], axis=0)
        sources += [f"perturb:{int(i)}" for i in src]
    return CandidateSet(np.clip(actions, -1.0, 1.0), sources)


def reward_progress(frames, goal: Sequence[float], discount: float = 1.0) -> float:
    """Discount-weighted mean over frames of ``-|block - goal|``; a frame with no
    detectable block scores ``-64``."""
    f = np.asarray(frames) if not isinstance(frames, torch.Tensor) else frames_to_uint8(frames)
    if f.dtype != np.uint8:
        f = frames_to_uint8(torch.as_tensor(f))
    if len(f) == 0:
        raise ContractError("reward needs at least one frame")
    total, weight = 0.0, 0.0
    for j, frame in enumerate(f):
        c = extract_centroids(frame).block
        r = -MISSING_BLOCK_PENALTY if c is None else -math.hypot(c[0] - goal[0], c[1] - goal[1])
        w = discount ** j
        total += w * r
        weight += w
    return total / weight


def _rollout_group(model, init_frames, actions, bank, past_actions):
    traj = rollout(model, init_frames, actions, bank, past_actions)
    return traj.frames


def evaluate_and_select(model, obs_history, bank: MemoryBank | None, cands: CandidateSet,
                        goal: Sequence[float], cfg: PlannerConfig = PlannerConfig(),
                        past_actions=None, parallel: bool | None = None) -> tuple[int, np.ndarray]:
    """Score every candidate; ties go to the lowest index.

    Candidates are evaluated in groups of ``cfg.group_size``; with ``parallel``
    the groups run on a thread pool, which gives the same numbers as running
    them one after another. A group that hits a numeric error is retried one
    candidate at a time and the failing candidates score ``-inf``.
    """
    n = len(cands)
    C = model.context if isinstance(model, GroundTruthModel) else model.config.context
    history = np.asarray(obs_history)
    if len(history) < C:
        raise ContractError(f"need >= {C} observed frames")
    init = history[-C:]
    size = cfg.group_size or n
    groups = [list(range(i, min(i + size, n))) for i in range(0, n, size)]
    rewards = np.full(n, -np.inf)
    failed = np.zeros(n, dtype=bool)

    def run(idx):
        out = {}
        try:
            frames = _rollout_group(model, init, cands.actions[idx], bank, past_actions)
            for j, i in enumerate(idx):
                out[i] = reward_progress(frames[j], goal, cfg.discount)
        except NumericError:
            for i in idx:
                try:
                    frames = _rollout_group(model, init, cands.actions[[i]], bank, past_actions)
                    out[i] = reward_progress(frames[0], goal, cfg.discount)
                except NumericError:
                    out[i] = None
        return out

    use_pool = (cfg.workers > 1) if parallel is None else parallel
    if use_pool and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=max(cfg.workers, 2)) as pool:
            results = list(pool.map(run, groups))
    else:
        results = [run(g) for g in groups]
    for res in results:
        for i, r in res.items():
            if r is None:
                failed[i] = True
            else:
                rewards[i] = r
    if failed.all():
        raise PlannerError("every candidate rollout failed")
    cands.rewards, cands.failed = rewards, failed
    return int(np.argmax(rewards)), rewards


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    choices: list[tuple[int, float]] = field(default_factory=list)
    states: np.ndarray | None = None
    actions: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {"success": self.success, "steps": self.steps, "choices": self.choices,
                "states": self.states.tolist(), "actions": self.actions.tolist()}


def _context(frames: list[np.ndarray], actions: list[np.ndarray], C: int):
    """Last ``C`` frames (front-padded with the first) and the actions taken
    after all but the newest of them."""
    idx = [max(i, 0) for i in range(len(frames) - C, len(frames))]
    ctx = np.stack([frames[i] for i in idx])
    past = []
    for i in range(len(frames) - C, len(frames) - 1):
        past.append(actions[i] if i >= 0 else np.zeros(2))
    return ctx, np.asarray(past, dtype=np.float64).reshape(C - 1, 2)


def control_loop(task: TaskSpec, profile: Profile, model, cfg: PlannerConfig, rng: RngStream,
                 log: IO[str] | None = None) -> EpisodeResult:
    """Run one planned episode. ``model`` is a :class:`WorldModel` or
    :class:`GroundTruthModel` (re-synced to the true state before each plan)."""
    s = reset(task, rng.derive("reset"))
    oracle = isinstance(model, GroundTruthModel)
    C = model.context if oracle else model.config.context
    bank = None if oracle else model.new_bank()
    frames = [render(s)]
    actions: list[np.ndarray] = []
    states = [s.as_array()]
    choices: list[tuple[int, float]] = []
    success = is_success(s, task)
    while not success and s.step < task.max_steps:
        cands = propose_candidates(profile, s, cfg, rng)
        ctx, past = _context(frames, actions, C)
        if oracle:
            model.state = s
        best, rewards = evaluate_and_select(model, ctx, bank, cands, s.goal, cfg, past)
        choices.append((best, float(rewards[best])))
        if log is not None:
            log.write(json.dumps({"step": s.step, "chosen": best, "source": cands.sources[best],
                                  "rewards": [None if not np.isfinite(r) else float(r) for r in rewards],
                                  "action": cands.actions[best, 0].tolist()}) + "\n")
        for a in cands.actions[best, :cfg.replan_stride]:
            s = env_step(s, a)
            actions.append(np.asarray(a, dtype=np.float64))
            frames.append(render(s))
            states.append(s.as_array())
            if bank is not None and len(frames) > C:
                bank.push_frame(frames[-C - 1])
            success = is_success(s, task)
            if success or s.step >= task.max_steps:
                break
    return EpisodeResult(success, s.step, choices, np.stack(states),
                         np.asarray(actions, dtype=np.float64).reshape(-1, 2))


def policy_episode(task: TaskSpec, profile: Profile, rng: RngStream) -> EpisodeResult:
    """The bare policy, with the same reset and noise streams as :func:`control_loop`."""
    s = reset(task, rng.derive("reset"))
    states, actions = [s.as_array()], []
    success = is_success(s, task)
    while not success and s.step < task.max_steps:
        a = scripted_policy(s, profile, rng.derive("policy", s.step))
        s = env_step(s, a)
        actions.append(a)
        states.append(s.as_array())
        success = is_success(s, task)
    return EpisodeResult(success, s.step, [], np.stack(states), np.asarray(actions, dtype=np.float64).reshape(-1, 2))
