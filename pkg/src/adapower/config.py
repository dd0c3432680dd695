"""Flat ``key = value`` run configuration.

Every key lives in a namespace (``run``, ``model``, ``ttt``, ``memory``, ``env``,
``mpc``, ``train``, ``eval``). Unknown keys are rejected. ``#`` starts a comment.
Serialization is canonical: keys sorted, one per line, values normalized.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

from .mpc import PlannerConfig
from .numeric import ContractError
from .pushbox import DEFAULT_TASKS, Profile, TaskSpec
from .tsttt import AxisLayout
from .world_model import WorldModelConfig


class ConfigError(ContractError):
    pass


def _ints(v: str) -> tuple[int, ...]:
    if isinstance(v, (tuple, list)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).split(",") if x.strip())


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _layout(v) -> str:
    return AxisLayout.parse(v).value


def _mode(v) -> str:
    if str(v) not in ("deterministic", "noise"):
        raise ValueError(f"mode must be deterministic or noise, got {v!r}")
    return str(v)


# key -> (parser, default)
SCHEMA: dict[str, tuple[Any, Any]] = {
    "run.seed": (int, 0),
    "model.patch": (int, 8),
    "model.dim": (int, 64),
    "model.blocks": (int, 6),
    "model.heads": (int, 4),
    "model.mlp_ratio": (int, 2),
    "model.adapter_stride": (int, 2),
    "model.context": (int, 2),
    "model.action_hidden": (int, 64),
    "model.mode": (_mode, "deterministic"),
    "model.noise_std": (float, 1.0),
    "model.use_ttt": (_bool, True),
    "model.use_mp": (_bool, True),
    "ttt.layout": (_layout, "TS+C"),
    "ttt.rank": (int, 16),
    "ttt.chunk": (int, 16),
    "ttt.eta": (float, 0.1),
    "ttt.persist": (_bool, False),
    "ttt.detach_inner": (_bool, False),
    "memory.capacity": (int, 4),
    "memory.patch": (int, 4),
    "memory.dim": (int, 64),
    "memory.attn_dim": (int, 32),
    "memory.heads": (int, 1),
    "env.episodes": (int, 2000),
    "env.expert_fraction": (float, 0.5),
    "env.train_tasks": (_ints, (1, 2, 3)),
    "env.eval_tasks": (_ints, (1, 2, 3, 4, 5)),
    "env.bias_x": (float, 0.3),
    "env.bias_y": (float, 0.0),
    "env.noise_std": (float, 0.2),
    "env.max_steps": (int, 40),
    "env.success_radius": (float, 2.0),
    "env.val_fraction": (float, 0.1),
    "mpc.horizon": (int, 8),
    "mpc.K": (int, 8),
    "mpc.M": (int, 8),
    "mpc.sigma": (float, 0.05),
    "mpc.replan_stride": (int, 1),
    "mpc.discount": (float, 1.0),
    "mpc.workers": (int, 1),
    "mpc.group_size": (int, 0),
    "mpc.episodes": (int, 40),
    "train.batch": (int, 32),
    "train.pretrain_steps": (int, 3000),
    "train.pretrain_lr": (float, 2e-3),
    "train.steps": (int, 2000),
    "train.lr_ttt": (float, 1e-3),
    "train.lr_other": (float, 1e-4),
    "train.warmup": (int, 100),
    "train.weight_decay": (float, 0.01),
    "train.log_every": (int, 50),
    "eval.horizon": (int, 16),
    "eval.seeds": (int, 5),
    "eval.episodes": (int, 50),
    "eval.init_frames": (int, 6),
    "eval.frames_png": (_bool, False),
}


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any]

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **overrides) -> "RunConfig":
        """``cfg.replace(**{"train.steps": 10})``."""
        return RunConfig(_validated({**self.values, **overrides}))

    def dumps(self) -> str:
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in sorted(self.values))

    # -- typed views ---------------------------------------------------------
    def model_config(self) -> WorldModelConfig:
        v = self.values
        return WorldModelConfig(
            patch=v["model.patch"], dim=v["model.dim"], blocks=v["model.blocks"], heads=v["model.heads"],
            mlp_ratio=v["model.mlp_ratio"], adapter_stride=v["model.adapter_stride"],
            context=v["model.context"], memory_capacity=v["memory.capacity"],
            ttt_layout=v["ttt.layout"], ttt_rank=v["ttt.rank"], ttt_chunk=v["ttt.chunk"],
            ttt_eta=v["ttt.eta"], ttt_persist=v["ttt.persist"], detach_inner=v["ttt.detach_inner"],
            use_ttt=v["model.use_ttt"], use_mp=v["model.use_mp"], mem_patch=v["memory.patch"],
            mem_dim=v["memory.dim"], attn_dim=v["memory.attn_dim"], mem_heads=v["memory.heads"],
            action_hidden=v["model.action_hidden"], mode=v["model.mode"], noise_std=v["model.noise_std"])

    def planner_config(self) -> PlannerConfig:
        v = self.values
        return PlannerConfig(v["mpc.horizon"], v["mpc.K"], v["mpc.M"], v["mpc.sigma"],
                             v["mpc.replan_stride"], v["mpc.discount"], v["mpc.workers"],
                             v["mpc.group_size"])

    def imperfect_profile(self) -> Profile:
        return Profile((self.values["env.bias_x"], self.values["env.bias_y"]), self.values["env.noise_std"])

    def tasks(self, which: str = "eval") -> list[TaskSpec]:
        ids = self.values[f"env.{which}_tasks"]
        by_id = {t.task_id: t for t in DEFAULT_TASKS}
        out = []
        for i in ids:
            if i not in by_id:
                raise ConfigError(f"unknown task id {i}")
            t = by_id[i]
            out.append(TaskSpec(t.task_id, t.block_region, t.goal_region,
                                self.values["env.max_steps"], self.values["env.success_radius"]))
        return out


def _validated(raw: Mapping[str, Any]) -> dict[str, Any]:
    out = {k: d for k, (_, d) in SCHEMA.items()}
    for k, v in raw.items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key {k!r}")
        parse = SCHEMA[k][0]
        try:
            out[k] = parse(v) if not isinstance(v, str) or parse is not str else v
            if isinstance(v, str) and parse in (int, float):
                out[k] = parse(v.strip())
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from None
    return out


def parse_config(text: str) -> RunConfig:
    raw = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = (x.strip() for x in line.split("=", 1))
        if k in raw:
            raise ConfigError(f"line {n}: duplicate key {k!r}")
        raw[k] = v
    return RunConfig(_validated(raw))


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def default_config() -> RunConfig:
    return RunConfig(_validated({}))
