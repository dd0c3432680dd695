"""Adapter-tuned toy video world model with test-time training and memory,
used as the dynamics model of a sampling-based MPC loop on a push task."""
from .numeric import ContractError, NumericError, RngStream, ShapeError
from .tsttt import AxisLayout, TSTTTLayer
from .memory import CrossAttention, MemoryBank, SurrogateEncoder
from .world_model import GroundTruthModel, Trainer, WorldModel, WorldModelConfig, build, rollout
from .pushbox import DEFAULT_TASKS, EXPERT, IMPERFECT, EnvState, TaskSpec, env_step, render, reset
from .mpc import PlannerConfig, control_loop, evaluate_and_select, propose_candidates, reward_progress
from .config import RunConfig, default_config, load_config, parse_config

__version__ = "0.1.0"
