"""End-to-end experiment pipeline behind the command-line entry points.

Every function takes a :class:`RunConfig` and derives all randomness from its
``run.seed``, so two calls with the same config produce identical tables.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import RunConfig
from .metrics import MetricsTable
from .mpc import PlannerConfig, control_loop, policy_episode
from .numeric import ContractError, NumericError, RngStream
from .pushbox import (EXPERT, EnvState, EpisodeRecord, TaskSpec, gen_dataset, generate_episodes, load_dataset,
                      summarize)
from .tsttt import AxisLayout
from .world_model import (GroundTruthModel, Trainer, TransitionSampler, WorldModel, batch_loss, build,
                          rollout)

Log = Callable[[str], None]


def _quiet(_msg: str) -> None:
    pass


def configure_threads() -> int:
    """Honour ``ADAPOWER_THREADS`` (default 1, which also keeps runs bit-reproducible)."""
    n = int(os.environ.get("ADAPOWER_THREADS", "1") or 1)
    n = max(1, n)
    torch.set_num_threads(n)
    return n


# -- data ---------------------------------------------------------------------
def dataset(cfg: RunConfig) -> list[EpisodeRecord]:
    n = cfg["env.episodes"]
    if n < 1:
        raise ContractError("env.episodes must be >= 1")
    return generate_episodes(n, cfg["env.expert_fraction"], cfg["run.seed"], cfg.tasks("train"),
                             cfg.imperfect_profile())


def split(episodes: Sequence[EpisodeRecord], val_fraction: float) -> tuple[list, list]:
    """Deterministic tail split: the last ``val_fraction`` of episodes are held out."""
    n_val = max(1, int(round(len(episodes) * val_fraction))) if len(episodes) > 1 else 0
    return list(episodes[:len(episodes) - n_val]), list(episodes[len(episodes) - n_val:])


def cmd_gen_data(cfg: RunConfig, out_path) -> dict:
    n = cfg["env.episodes"]
    if n < 1:
        raise ContractError("env.episodes must be >= 1")
    summary = gen_dataset(n, cfg["env.expert_fraction"], cfg["run.seed"], out_path,
                          tasks=cfg.tasks("train"), imperfect=cfg.imperfect_profile())
    return summary.as_dict()


# -- training -----------------------------------------------------------------
def warmup_factor(step: int, warmup: int) -> float:
    return 1.0 if warmup <= 0 else min(1.0, (step + 1) / warmup)


@dataclass
class TrainResult:
    model: WorldModel
    losses: MetricsTable
    val_mse: float
    diverged: bool = False
    extra: dict = field(default_factory=dict)


def validation_mse(model: WorldModel, sampler: TransitionSampler, adapters: bool = True,
                   max_rows: int = 256) -> float:
    rows = np.linspace(0, len(sampler) - 1, min(max_rows, len(sampler))).round().astype(np.int64)
    with torch.no_grad():
        return float(batch_loss(model, sampler.batch(rows), adapters=adapters))


def _run_steps(trainer: Trainer, sampler: TransitionSampler, steps: int, start: int, lrs: tuple[float, float],
               warmup: int, batch: int, rng: RngStream, table: MetricsTable, stage: str,
               log_every: int, log: Log) -> float:
    loss = float("nan")
    for step in range(start, steps):
        f = warmup_factor(step, warmup)
        b = sampler.sample(rng.derive("batch", step), batch)
        try:
            loss = trainer.train_step(b, lrs[0] * f, lrs[1] * f, rng.derive("noise", step))
        except NumericError as exc:
            raise NumericError(f"{stage}: non-finite loss at iteration {step}", exc.where) from None
        if step % log_every == 0 or step == steps - 1:
            table.add(stage, step, loss, lrs[0] * f, lrs[1] * f)
            log(f"{stage} step {step} loss {loss:.6g}")
    return loss


def pretrain_base(cfg: RunConfig, train_eps, log: Log = _quiet) -> tuple[WorldModel, MetricsTable]:
    model = build(cfg.model_config(), cfg["run.seed"])
    table = MetricsTable("loss")
    steps = cfg["train.pretrain_steps"]
    if steps:
        sampler = TransitionSampler(train_eps, model.config.context, model.config.memory_capacity,
                                    model.encoder)
        lr = cfg["train.pretrain_lr"]
        _run_steps(Trainer(model, base=True, weight_decay=cfg["train.weight_decay"]), sampler, steps, 0,
                   (lr, lr), cfg["train.warmup"], cfg["train.batch"],
                   RngStream(cfg["run.seed"]).derive("pretrain"), table, "pretrain", cfg["train.log_every"], log)
    return model, table


def adapted_from(base: WorldModel, cfg: RunConfig, seed: int | None = None) -> WorldModel:
    """Fresh adapters (per ``cfg``) on a copy of ``base``'s backbone weights."""
    model = build(cfg.model_config(), cfg["run.seed"] if seed is None else seed)
    src = base.base_parameters()
    with torch.no_grad():
        for n, p in model.base_parameters().items():
            p.copy_(src[n])
    return model


def train_adapters(model: WorldModel, cfg: RunConfig, train_eps, val_eps=None, steps: int | None = None,
                   log: Log = _quiet, table: MetricsTable | None = None, trainer: Trainer | None = None,
                   start: int = 0, rng: RngStream | None = None) -> TrainResult:
    steps = cfg["train.steps"] if steps is None else steps
    table = table if table is not None else MetricsTable("loss")
    sampler = TransitionSampler(train_eps, model.config.context, model.config.memory_capacity, model.encoder)
    trainer = trainer or Trainer(model, weight_decay=cfg["train.weight_decay"])
    rng = rng or RngStream(cfg["run.seed"]).derive("adapt")
    _run_steps(trainer, sampler, steps, start, (cfg["train.lr_ttt"], cfg["train.lr_other"]),
               cfg["train.warmup"], cfg["train.batch"], rng, table, "adapt", cfg["train.log_every"], log)
    val = float("nan")
    if val_eps:
        vs = TransitionSampler(val_eps, model.config.context, model.config.memory_capacity, model.encoder)
        val = validation_mse(model, vs)
    return TrainResult(model, table, val, extra={"trainer": trainer})


def save_training(path, model: WorldModel, trainer: Trainer | None = None, step: int = 0) -> None:
    tensors = ckpt.model_tensors(model)
    if trainer is not None:
        tensors.update(trainer.optimizer_tensors())
    tensors["train.step"] = torch.tensor([float(step)])
    ckpt.save(path, tensors)


def load_model(cfg: RunConfig, path) -> WorldModel:
    model = build(cfg.model_config(), cfg["run.seed"])
    ckpt.load_model_tensors(model, ckpt.load(path))
    return model


def cmd_train(cfg: RunConfig, data_path, out_checkpoint, resume=None, log: Log = _quiet) -> dict:
    """Stage 1 pretrains the backbone (skipped when ``train.pretrain_steps`` is 0
    or when resuming), stage 2 trains the adapters. Writes ``<out>.loss.csv``."""
    episodes = load_dataset(data_path)
    train_eps, val_eps = split(episodes, cfg["env.val_fraction"])
    table = MetricsTable("loss")
    start = 0
    if resume is not None:
        tensors = ckpt.load(resume)
        model = build(cfg.model_config(), cfg["run.seed"])
        ckpt.load_model_tensors(model, tensors)
        trainer = Trainer(model, weight_decay=cfg["train.weight_decay"])
        trainer.load_optimizer_tensors(tensors)
        start = int(tensors["train.step"].reshape(-1)[0])
        trainer.steps = start
    else:
        base, pre = pretrain_base(cfg, train_eps, log)
        table.rows.extend(pre.rows)
        model = adapted_from(base, cfg)
        trainer = Trainer(model, weight_decay=cfg["train.weight_decay"])
    res = train_adapters(model, cfg, train_eps, val_eps, log=log, table=table, trainer=trainer, start=start)
    save_training(out_checkpoint, model, trainer, cfg["train.steps"])
    table.write(str(out_checkpoint) + ".loss.csv")
    adapt = [r[2] for r in table.rows if r[0] == "adapt"]
    return {"final_loss": adapt[-1] if adapt else float("nan"), "val_mse": res.val_mse,
            "steps": cfg["train.steps"]}


# -- rollout evaluation -------------------------------------------------------
def rollout_errors(model, episodes: Sequence[EpisodeRecord], horizon: int, init_frames: int,
                   rng: RngStream, ttt_mode: str = "adaptive") -> np.ndarray:
    """Per-horizon MSE ``(n_windows, horizon)`` from one random start per long-enough episode.

    The first ``init_frames`` real frames seed the rollout: the last ``C`` are
    the context, the earlier ones fill the memory bank.
    """
    C = model.context if isinstance(model, GroundTruthModel) else model.config.context
    if init_frames < C:
        raise ContractError(f"eval.init_frames must be >= context ({C})")
    out = []
    for i, ep in enumerate(episodes):
        room = len(ep) - init_frames - horizon
        if room < 0:
            continue
        t0 = int(rng.derive("start", i).integers(room + 1, 1)[0])
        init = ep.frames[t0:t0 + init_frames]
        acts = ep.actions[t0 + init_frames - 1:t0 + init_frames - 1 + horizon]
        past = ep.actions[t0 + init_frames - C:t0 + init_frames - 1]
        truth = ep.frames[t0 + init_frames:t0 + init_frames + horizon]
        if isinstance(model, GroundTruthModel):
            model.state = EnvState.from_array(ep.states[t0 + init_frames - 1])
            traj = model.rollout(init, acts, None, past)
            err = ((traj.frames - torch.as_tensor(truth, dtype=traj.frames.dtype) / 255.0) ** 2
                   ).mean(dim=(-3, -2, -1))
        else:
            bank = model.new_bank()
            traj = rollout(model, init, acts, bank, past, ttt_mode=ttt_mode, truth=truth,
                           rng=rng.derive("noise", i))
            err = traj.errors
        out.append(err.numpy())
    if not out:
        raise ContractError(f"no held-out episode is long enough for horizon {horizon}")
    return np.stack(out)


def eval_rollout_table(model, episodes, cfg: RunConfig) -> MetricsTable:
    horizon, seeds = cfg["eval.horizon"], cfg["eval.seeds"]
    per_seed = []
    for s in range(seeds):
        rng = RngStream(cfg["run.seed"]).derive("eval-rollout", s)
        per_seed.append(rollout_errors(model, episodes, horizon, cfg["eval.init_frames"], rng).mean(axis=0))
    per_seed = np.stack(per_seed)
    table = MetricsTable("rollout")
    for h in range(horizon):
        table.add(h, h + 1, float(per_seed[:, h].mean()), float(per_seed[:, h].std()), seeds)
    return table


def cmd_eval_rollout(cfg: RunConfig, checkpoint, data_path, out_dir=None) -> MetricsTable:
    model = load_model(cfg, checkpoint)
    _, val_eps = split(load_dataset(data_path), cfg["env.val_fraction"])
    table = eval_rollout_table(model, val_eps, cfg)
    if out_dir is not None:
        table.write(Path(out_dir) / "rollout.csv")
        if cfg["eval.frames_png"]:
            write_frame_strip(model, val_eps, cfg, Path(out_dir) / "rollout_strip.png")
    return table


def write_frame_strip(model, episodes, cfg: RunConfig, path) -> None:
    """Top row: ground truth, bottom row: prediction, for the first long-enough episode."""
    from PIL import Image

    H, n0 = cfg["eval.horizon"], cfg["eval.init_frames"]
    C = model.config.context
    ep = next((e for e in episodes if len(e) >= n0 + H), None)
    if ep is None:
        return
    traj = rollout(model, ep.frames[:n0], ep.actions[n0 - 1:n0 - 1 + H], model.new_bank(),
                   ep.actions[n0 - C:n0 - 1])
    pred = (traj.frames.clamp(0, 1) * 255).round().to(torch.uint8).numpy()
    top = np.concatenate(list(ep.frames[n0:n0 + H]), axis=1)
    bottom = np.concatenate(list(pred), axis=1)
    Image.fromarray(np.concatenate([top, bottom], axis=0)).save(path)


# -- ablations ----------------------------------------------------------------
@dataclass
class SharedBase:
    """Data split plus a pretrained backbone, reused by every variant of an ablation."""

    train: list
    val: list
    base: WorldModel
    pretrain_losses: MetricsTable

    @classmethod
    def prepare(cls, cfg: RunConfig, episodes=None, log: Log = _quiet) -> "SharedBase":
        episodes = dataset(cfg) if episodes is None else episodes
        train, val = split(episodes, cfg["env.val_fraction"])
        base, table = pretrain_base(cfg, train, log)
        return cls(train, val, base, table)


def ablate_layout(cfg: RunConfig, shared: SharedBase | None = None, seeds: Sequence[int] = (0, 1, 2),
                  layouts: Sequence[str] = ("TS+C", "T+S+C", "T+SC", "TSC"),
                  log: Log = _quiet) -> tuple[MetricsTable, MetricsTable]:
    """Same backbone, data and step budget for every layout; only the seed of the
    adapter initialisation and batch order changes across repeats."""
    shared = shared or SharedBase.prepare(cfg, log=log)
    rows = MetricsTable("layout")
    summary = MetricsTable("layout_summary")
    for layout in layouts:
        vals, div = [], 0
        for seed in seeds:
            c = cfg.replace(**{"ttt.layout": AxisLayout.parse(layout).value, "model.use_ttt": True})
            model = adapted_from(shared.base, c, seed=cfg["run.seed"] + 1000 * (seed + 1))
            try:
                res = train_adapters(model, c, shared.train, shared.val, log=log,
                                     rng=RngStream(cfg["run.seed"]).derive("ablate-layout", seed))
                val = res.val_mse
                bad = not np.isfinite(val)
            except NumericError:
                val, bad = float("nan"), True
            div += bad
            rows.add(AxisLayout.parse(layout).value, seed, val, bad)
            if not bad:
                vals.append(val)
            log(f"layout {layout} seed {seed} val_mse {val:.6g}")
        summary.add(AxisLayout.parse(layout).value, float(np.mean(vals)) if vals else float("nan"),
                    float(np.std(vals)) if vals else float("nan"), div, len(seeds))
    return rows, summary


def mp_effect(cfg: RunConfig, shared: SharedBase | None = None, seeds: Sequence[int] = range(5),
              log: Log = _quiet) -> MetricsTable:
    """Horizon-``eval.horizon`` rollout MSE with and without memory persistence,
    with paired data, backbone, batch order and step budget per seed."""
    shared = shared or SharedBase.prepare(cfg, log=log)
    table = MetricsTable("mp_effect")
    H = cfg["eval.horizon"]
    for seed in seeds:
        for use_mp in (True, False):
            c = cfg.replace(**{"model.use_mp": use_mp})
            model = adapted_from(shared.base, c, seed=cfg["run.seed"] + 1000 * (seed + 1))
            train_adapters(model, c, shared.train, log=log,
                           rng=RngStream(cfg["run.seed"]).derive("mp-effect", seed))
            err = rollout_errors(model, shared.val, H, cfg["eval.init_frames"],
                                 RngStream(cfg["run.seed"]).derive("mp-eval", seed))
            table.add(seed, use_mp, H, float(err[:, H - 1].mean()))
            log(f"mp seed {seed} use_mp {use_mp} h{H} mse {err[:, H - 1].mean():.6g}")
    return table


# -- planning evaluation ------------------------------------------------------
def mpc_eval(cfg: RunConfig, model, episodes: int | None = None, oracle: bool = False,
             conditions: Sequence[str] = ("policy", "mpc"), log_dir=None,
             log: Log = _quiet) -> tuple[MetricsTable, MetricsTable]:
    """Paired-seed success rates per task: episode ``e`` of task ``k`` uses the
    same stream under every condition, so resets and policy draws coincide."""
    n = cfg["mpc.episodes"] if episodes is None else episodes
    pc: PlannerConfig = cfg.planner_config()
    profile = cfg.imperfect_profile()
    conds = list(conditions) + (["oracle"] if oracle and "oracle" not in conditions else [])
    per_task = MetricsTable("mpc")
    totals = {c: [0, 0] for c in conds}
    for task in cfg.tasks("eval"):
        for cond in conds:
            wins = 0
            for e in range(n):
                rng = RngStream(cfg["run.seed"]).derive("mpc-eval", task.task_id, e)
                wins += _episode(cond, task, profile, model, pc, rng, log_dir, e).success
            per_task.add(task.task_id, cond, n, wins, wins / n if n else float("nan"))
            totals[cond][0] += n
            totals[cond][1] += wins
            log(f"task {task.task_id} {cond}: {wins}/{n}")
    summary = MetricsTable("mpc_summary")
    base_rate = totals["policy"][1] / max(totals["policy"][0], 1) if "policy" in totals else float("nan")
    for cond, (eps, wins) in totals.items():
        rate = wins / eps if eps else float("nan")
        summary.add(cond, eps, rate, rate - base_rate)
    return per_task, summary


def _episode(cond: str, task: TaskSpec, profile, model, pc: PlannerConfig, rng: RngStream, log_dir, e: int):
    if cond == "policy":
        return policy_episode(task, profile, rng)
    if cond == "expert":
        return policy_episode(task, EXPERT, rng)
    planner_model = GroundTruthModel(None, pc_context(model)) if cond == "oracle" else model
    if log_dir is None:
        return control_loop(task, profile, planner_model, pc, rng)
    path = Path(log_dir) / f"task{task.task_id}_{cond}_ep{e:03d}.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        return control_loop(task, profile, planner_model, pc, rng, fh)


def pc_context(model) -> int:
    return model.config.context if isinstance(model, WorldModel) else 2


def cmd_mpc_eval(cfg: RunConfig, checkpoint, out_dir=None, oracle: bool = False,
                 log: Log = _quiet) -> MetricsTable:
    model = load_model(cfg, checkpoint)
    log_dir = None
    if out_dir is not None:
        log_dir = Path(out_dir) / "mpc_logs"
        log_dir.mkdir(parents=True, exist_ok=True)
    per_task, summary = mpc_eval(cfg, model, oracle=oracle, log_dir=log_dir, log=log)
    if out_dir is not None:
        per_task.write(Path(out_dir) / "mpc.csv")
        summary.write(Path(out_dir) / "mpc_summary.csv")
    return summary


def ablate_modules(cfg: RunConfig, shared: SharedBase | None = None, episodes: int | None = None,
                   log: Log = _quiet) -> MetricsTable:
    shared = shared or SharedBase.prepare(cfg, log=log)
    table = MetricsTable("modules")
    for name, use_ttt, use_mp in (("ttt_only", True, False), ("mp_only", False, True), ("both", True, True)):
        c = cfg.replace(**{"model.use_ttt": use_ttt, "model.use_mp": use_mp})
        model = adapted_from(shared.base, c)
        res = train_adapters(model, c, shared.train, shared.val, log=log,
                             rng=RngStream(cfg["run.seed"]).derive("ablate-modules"))
        _, summary = mpc_eval(c, model, episodes, conditions=("mpc",), log=log)
        rate = summary.rows[0][2]
        n = summary.rows[0][1]
        table.add(name, use_ttt, use_mp, res.val_mse, rate, n)
        log(f"modules {name}: val {res.val_mse:.6g} success {rate:.3f}")
    return table


def cmd_ablate(cfg: RunConfig, which: str, out_dir=None, data_path=None, log: Log = _quiet) -> MetricsTable:
    if which not in ("layout", "modules"):
        raise ContractError(f"unknown ablation {which!r}; expected layout or modules")
    episodes = load_dataset(data_path) if data_path is not None else None
    shared = SharedBase.prepare(cfg, episodes, log=log)
    if which == "layout":
        rows, summary = ablate_layout(cfg, shared, seeds=range(cfg["eval.seeds"]), log=log)
        if out_dir is not None:
            rows.write(Path(out_dir) / "layout.csv")
            summary.write(Path(out_dir) / "layout_summary.csv")
        return rows
    table = ablate_modules(cfg, shared, log=log)
    if out_dir is not None:
        table.write(Path(out_dir) / "modules.csv")
    return table


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
