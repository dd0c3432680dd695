"""Deterministic 2D block-pushing world.

Coordinates are continuous pixels: pixel ``i`` spans ``[i, i + 1)``, so an
object whose extent covers pixels ``s .. s + n - 1`` has centroid ``s + n / 2``.
Frames are ``(32, 32, 3)`` uint8 arrays indexed ``[y, x, channel]``.
"""
from __future__ import annotations

import dataclasses
import io
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Sequence

import numpy as np

from .numeric import ContractError, RngStream

SIZE = 32
AGENT_HALF = 1.0
BLOCK_HALF = 2.0
GOAL_HALF = 2.5
AGENT_STEP = 2.0
THRESHOLD = 128
FRAME_BYTES = SIZE * SIZE * 3

# Object centers are clipped so each extent stays on-canvas.
AGENT_LO, AGENT_HI = AGENT_HALF, SIZE - AGENT_HALF
BLOCK_LO, BLOCK_HI = BLOCK_HALF, SIZE - BLOCK_HALF


@dataclass(frozen=True)
class EnvState:
    agent: tuple[float, float]
    block: tuple[float, float]
    goal: tuple[float, float]
    step: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([*self.agent, *self.block, *self.goal], dtype=np.float64)

    @classmethod
    def from_array(cls, a: Sequence[float], step: int = 0) -> "EnvState":
        a = [float(x) for x in a]
        return cls((a[0], a[1]), (a[2], a[3]), (a[4], a[5]), step)

    def block_goal_distance(self) -> float:
        return math.hypot(self.block[0] - self.goal[0], self.block[1] - self.goal[1])


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    block_region: tuple[float, float, float, float]  # x0, x1, y0, y1
    goal_region: tuple[float, float, float, float]
    max_steps: int = 40
    success_radius: float = 2.0

    def __post_init__(self):
        for lo_x, hi_x, lo_y, hi_y in (self.block_region, self.goal_region):
            if not (BLOCK_LO <= lo_x <= hi_x <= BLOCK_HI and BLOCK_LO <= lo_y <= hi_y <= BLOCK_HI):
                raise ContractError(f"task {self.task_id}: spawn region out of bounds")
        if self.success_radius <= 0:
            raise ContractError("success radius must be positive")


DEFAULT_TASKS: tuple[TaskSpec, ...] = (
    TaskSpec(1, (7, 11, 12, 20), (21, 25, 12, 20)),   # push right
    TaskSpec(2, (12, 20, 7, 11), (12, 20, 21, 25)),   # push down
    TaskSpec(3, (20, 24, 20, 24), (8, 12, 8, 12)),    # push up-left
    TaskSpec(4, (21, 25, 12, 20), (7, 11, 12, 20)),   # push left
    TaskSpec(5, (8, 12, 20, 24), (20, 24, 8, 12)),    # push up-right
)
TRAIN_TASKS = (1, 2, 3)


def task_by_id(task_id: int, tasks: Sequence[TaskSpec] = DEFAULT_TASKS) -> TaskSpec:
    for t in tasks:
        if t.task_id == task_id:
            return t
    raise ContractError(f"unknown task id {task_id}")


def _boxes_overlap(a, b, half_a, half_b) -> tuple[float, float]:
    reach = half_a + half_b
    return reach - abs(a[0] - b[0]), reach - abs(a[1] - b[1])


def env_step(s: EnvState, a: Sequence[float]) -> EnvState:
    """Move the agent by ``2 * a``; an overlapped block is pushed out along the
    axis of least penetration. If the wall stops the block, the agent is backed
    out instead."""
    ax, ay = float(a[0]), float(a[1])
    if not (-1.0 <= ax <= 1.0 and -1.0 <= ay <= 1.0) or not (math.isfinite(ax) and math.isfinite(ay)):
        raise ContractError(f"action {tuple(a)} outside [-1, 1]^2")
    agent = [min(max(s.agent[0] + AGENT_STEP * ax, AGENT_LO), AGENT_HI),
             min(max(s.agent[1] + AGENT_STEP * ay, AGENT_LO), AGENT_HI)]
    block = list(s.block)
    ox, oy = _boxes_overlap(agent, block, AGENT_HALF, BLOCK_HALF)
    if ox > 0 and oy > 0:
        axis = 0 if ox <= oy else 1
        depth = ox if axis == 0 else oy
        d = block[axis] - agent[axis]
        sign = 1.0 if d > 0 or (d == 0 and (ax, ay)[axis] >= 0) else -1.0
        target = block[axis] + sign * depth
        block[axis] = min(max(target, BLOCK_LO), BLOCK_HI)
        leftover = target - block[axis]
        if leftover != 0.0:
            agent[axis] -= leftover
    return EnvState((agent[0], agent[1]), (block[0], block[1]), s.goal, s.step + 1)


def _span(center: float, half: float) -> tuple[int, int]:
    start = math.floor(center - half + 0.5)
    return max(start, 0), min(start + int(2 * half), SIZE)


def render(s: EnvState) -> np.ndarray:
    frame = np.zeros((SIZE, SIZE, 3), dtype=np.uint8)
    for pos, half, ch in ((s.goal, GOAL_HALF, 1), (s.block, BLOCK_HALF, 0), (s.agent, AGENT_HALF, 2)):
        x0, x1 = _span(pos[0], half)
        y0, y1 = _span(pos[1], half)
        frame[y0:y1, x0:x1, :] = 0
        frame[y0:y1, x0:x1, ch] = 255
    return frame


@dataclass(frozen=True)
class Centroids:
    agent: tuple[float, float] | None
    block: tuple[float, float] | None
    goal: tuple[float, float] | None


def extract_centroids(frame: np.ndarray) -> Centroids:
    """Mean pixel-center coordinate per object color; ``None`` when no pixel qualifies."""
    f = np.asarray(frame)
    if f.shape != (SIZE, SIZE, 3):
        raise ContractError(f"expected a {SIZE}x{SIZE}x3 frame, got {f.shape}")
    dominant = f.argmax(axis=-1)
    peak = f.max(axis=-1)
    out = []
    for ch in (2, 0, 1):
        ys, xs = np.nonzero((dominant == ch) & (peak > THRESHOLD))
        out.append(None if len(xs) == 0 else (float(xs.mean()) + 0.5, float(ys.mean()) + 0.5))
    return Centroids(agent=out[0], block=out[1], goal=out[2])


def reset(task: TaskSpec, rng: RngStream) -> EnvState:
    u = rng.uniform_np(4)
    bx0, bx1, by0, by1 = task.block_region
    gx0, gx1, gy0, gy1 = task.goal_region
    block = (bx0 + u[0] * (bx1 - bx0), by0 + u[1] * (by1 - by0))
    goal = (gx0 + u[2] * (gx1 - gx0), gy0 + u[3] * (gy1 - gy0))
    while True:
        v = rng.uniform_np(2)
        agent = (AGENT_LO + v[0] * (AGENT_HI - AGENT_LO), AGENT_LO + v[1] * (AGENT_HI - AGENT_LO))
        ox, oy = _boxes_overlap(agent, block, AGENT_HALF + 1.0, BLOCK_HALF)
        if ox <= 0 or oy <= 0:
            return EnvState(agent, block, goal, 0)


# --- scripted policies -------------------------------------------------------

@dataclass(frozen=True)
class Profile:
    """``expert`` when bias and noise are zero; otherwise the imperfect policy."""

    bias: tuple[float, float] = (0.0, 0.0)
    noise_std: float = 0.0

    @property
    def is_expert(self) -> bool:
        return self.noise_std == 0.0 and self.bias == (0.0, 0.0)


EXPERT = Profile()
IMPERFECT = Profile(bias=(0.3, 0.0), noise_std=0.2)

APPROACH_GAIN = 0.4
PUSH_GAIN = 0.35
AXIS_TOL = 0.6
PUSH_GAP = AGENT_HALF + BLOCK_HALF + 0.4   # agent-block center offset when lined up to push
AVOID_HALF = AGENT_HALF + BLOCK_HALF + 0.25
CORNER_HALF = AGENT_HALF + BLOCK_HALF + 1.0


def _segment_hits_box(p, q, center, half) -> bool:
    """Liang-Barsky clip of segment p->q against an axis-aligned box."""
    t0, t1 = 0.0, 1.0
    d = q - p
    for ax in (0, 1):
        lo, hi = center[ax] - half, center[ax] + half
        if abs(d[ax]) < 1e-12:
            if p[ax] <= lo or p[ax] >= hi:
                return False
            continue
        ta, tb = (lo - p[ax]) / d[ax], (hi - p[ax]) / d[ax]
        t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
        if t0 >= t1:
            return False
    return True


def _steer(agent, target) -> np.ndarray:
    a = APPROACH_GAIN * (target - agent)
    m = float(np.abs(a).max())
    return a / m if m > 1.0 else a


def expert_action(agent, block, goal) -> np.ndarray:
    """Axis-by-axis pusher: line up behind the block on one axis, push, repeat."""
    agent = np.asarray(agent, dtype=np.float64)
    block = np.asarray(block, dtype=np.float64)
    d = np.asarray(goal, dtype=np.float64) - block
    todo = [ax for ax in (0, 1) if abs(d[ax]) > AXIS_TOL]
    if not todo:
        return np.zeros(2)
    axis = None
    for ax in todo:
        other = 1 - ax
        behind = (agent[ax] - block[ax]) * np.sign(d[ax])
        if abs(agent[other] - block[other]) < 0.8 and -PUSH_GAP - 0.6 < behind < -1.0:
            axis = ax
    if axis is not None:
        other = 1 - axis
        a = np.zeros(2)
        a[axis] = np.sign(d[axis]) * min(1.0, PUSH_GAIN * abs(d[axis]) + 0.2)
        a[other] = APPROACH_GAIN * (block[other] - agent[other])
        return np.clip(a, -1.0, 1.0)
    axis = max(todo, key=lambda ax: abs(d[ax]))
    target = block.copy()
    target[axis] -= np.sign(d[axis]) * PUSH_GAP
    if not _segment_hits_box(agent, target, block, AVOID_HALF):
        return _steer(agent, target)
    corners = [block + CORNER_HALF * np.array(c) for c in ((1, 1), (1, -1), (-1, 1), (-1, -1))]
    corners = [np.clip(c, AGENT_LO, AGENT_HI) for c in corners]
    corners = [c for c in corners if np.abs(c - agent).max() > 0.7] or corners
    visible = [c for c in corners if not _segment_hits_box(agent, c, block, AVOID_HALF)]

    def cost(c):
        detour = 0.0 if not _segment_hits_box(c, target, block, AVOID_HALF) else 10.0
        return np.hypot(*(c - agent)) + np.hypot(*(target - c)) + detour

    best = min(visible or corners, key=cost)
    return _steer(agent, best)


def scripted_policy(s: EnvState, profile: Profile = EXPERT, rng: RngStream | None = None) -> np.ndarray:
    a = expert_action(s.agent, s.block, s.goal)
    if profile.is_expert:
        return a
    if rng is None:
        raise ContractError("imperfect profile needs an rng stream")
    noise = rng.gaussian_np(2) * profile.noise_std
    return np.clip(a + np.asarray(profile.bias) + noise, -1.0, 1.0)


def heuristic_step(s: EnvState, a: Sequence[float]) -> EnvState:
    """The policy's own guess of the next state: the block rides along with the
    agent's displacement whenever the two would touch. Not the true dynamics."""
    a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
    agent = np.clip(np.asarray(s.agent) + AGENT_STEP * a, AGENT_LO, AGENT_HI)
    block = np.asarray(s.block, dtype=np.float64)
    ox, oy = _boxes_overlap(agent, block, AGENT_HALF, BLOCK_HALF)
    if ox > 0 and oy > 0:
        block = np.clip(block + (agent - np.asarray(s.agent)), BLOCK_LO, BLOCK_HI)
    return EnvState((float(agent[0]), float(agent[1])), (float(block[0]), float(block[1])), s.goal, s.step + 1)


# --- episodes ----------------------------------------------------------------

@dataclass
class EpisodeRecord:
    frames: np.ndarray   # (n, 32, 32, 3) uint8
    actions: np.ndarray  # (n, 2); the last row is the terminal no-op
    states: np.ndarray   # (n, 6)
    success: bool
    task_id: int = 0
    expert: bool = False

    def __len__(self) -> int:
        return len(self.frames)


def is_success(s: EnvState, task: TaskSpec) -> bool:
    return s.block_goal_distance() <= task.success_radius


def run_episode(task: TaskSpec, profile: Profile, rng: RngStream) -> EpisodeRecord:
    s = reset(task, rng.derive("reset"))
    frames, actions, states = [render(s)], [], [s.as_array()]
    success = is_success(s, task)
    while not success and s.step < task.max_steps:
        a = scripted_policy(s, profile, rng.derive("policy", s.step))
        s = env_step(s, a)
        actions.append(a)
        frames.append(render(s))
        states.append(s.as_array())
        success = is_success(s, task)
    actions.append(np.zeros(2))
    return EpisodeRecord(np.stack(frames), np.asarray(actions, dtype=np.float64),
                         np.stack(states), success, task.task_id, profile.is_expert)


MAGIC = b"APEP"
VERSION = 1


def write_episodes(sink: BinaryIO, episodes: Sequence[EpisodeRecord]) -> None:
    """``APEP`` | u32 version | u32 count | per episode: u32 length, u8 outcome,
    then per step 3072 frame bytes, 2 f32 action, 6 f32 state (little endian)."""
    sink.write(MAGIC + struct.pack("<II", VERSION, len(episodes)))
    for ep in episodes:
        sink.write(struct.pack("<IB", len(ep), 1 if ep.success else 0))
        acts = ep.actions.astype("<f4")
        sts = ep.states.astype("<f4")
        for i in range(len(ep)):
            sink.write(np.ascontiguousarray(ep.frames[i], dtype=np.uint8).tobytes())
            sink.write(acts[i].tobytes())
            sink.write(sts[i].tobytes())


def read_episodes(source: BinaryIO) -> list[EpisodeRecord]:
    head = source.read(12)
    if len(head) < 12 or head[:4] != MAGIC:
        raise ValueError("not an episode file (bad magic)")
    version, count = struct.unpack("<II", head[4:])
    if version != VERSION:
        raise ValueError(f"unsupported episode file version {version}")
    step_dt = np.dtype([("frame", np.uint8, (SIZE, SIZE, 3)), ("action", "<f4", (2,)), ("state", "<f4", (6,))])
    out = []
    for _ in range(count):
        length, outcome = struct.unpack("<IB", source.read(5))
        buf = source.read(step_dt.itemsize * length)
        if len(buf) != step_dt.itemsize * length:
            raise ValueError("truncated episode file")
        rec = np.frombuffer(buf, dtype=step_dt)
        out.append(EpisodeRecord(rec["frame"].copy(), rec["action"].astype(np.float64),
                                 rec["state"].astype(np.float64), bool(outcome)))
    return out


@dataclass
class DatasetSummary:
    episodes: int
    expert_episodes: int
    success_rate: float
    expert_success_rate: float
    imperfect_success_rate: float
    mean_length: float
    per_task: dict[int, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def generate_episodes(n_episodes: int, expert_fraction: float, master_seed: int,
                      tasks: Sequence[TaskSpec] | None = None,
                      imperfect: Profile = IMPERFECT) -> list[EpisodeRecord]:
    if n_episodes <= 0:
        raise ContractError("n_episodes must be positive")
    if tasks is None:
        tasks = [task_by_id(t) for t in TRAIN_TASKS]
    if not 0.0 <= expert_fraction <= 1.0:
        raise ContractError("expert fraction must lie in [0, 1]")
    root = RngStream(master_seed, 0).derive("dataset")
    eps = []
    for i in range(n_episodes):
        task = tasks[i % len(tasks)]
        # interleaved so any contiguous slice keeps roughly the requested mix
        expert = math.floor((i + 1) * expert_fraction + 1e-9) > math.floor(i * expert_fraction + 1e-9)
        profile = EXPERT if expert else imperfect
        eps.append(run_episode(task, profile, root.derive(i)))
    return eps


def summarize(episodes: Sequence[EpisodeRecord]) -> DatasetSummary:
    def rate(xs):
        return float(np.mean([e.success for e in xs])) if xs else float("nan")
    ex = [e for e in episodes if e.expert]
    im = [e for e in episodes if not e.expert]
    per_task: dict[int, int] = {}
    for e in episodes:
        per_task[e.task_id] = per_task.get(e.task_id, 0) + 1
    return DatasetSummary(len(episodes), len(ex), rate(list(episodes)), rate(ex), rate(im),
                          float(np.mean([len(e) for e in episodes])), per_task)


def gen_dataset(n_episodes: int, mix: float, master_seed: int, sink: BinaryIO | str,
                tasks: Sequence[TaskSpec] | None = None, imperfect: Profile = IMPERFECT) -> DatasetSummary:
    eps = generate_episodes(n_episodes, mix, master_seed, tasks, imperfect)
    if isinstance(sink, (str, bytes)) or hasattr(sink, "__fspath__"):
        with open(sink, "wb") as fh:
            write_episodes(fh, eps)
    else:
        write_episodes(sink, eps)
    return summarize(eps)


def load_dataset(path) -> list[EpisodeRecord]:
    with open(path, "rb") as fh:
        return read_episodes(fh)


def iter_transitions(episodes: Sequence[EpisodeRecord]) -> Iterator[tuple[int, int]]:
    for e, ep in enumerate(episodes):
        for t in range(len(ep) - 1):
            yield e, t


def episodes_bytes(episodes: Sequence[EpisodeRecord]) -> bytes:
    buf = io.BytesIO()
    write_episodes(buf, episodes)
    return buf.getvalue()
