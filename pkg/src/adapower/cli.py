"""``adapower`` command line: gen-data, train, eval-rollout, ablate, mpc-eval."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments as ex
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, default_config, load_config
from .numeric import ContractError, NumericError


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value run configuration")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--quiet", action="store_true", help="only print the final summary")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    p = argparse.ArgumentParser(prog="adapower", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate the episode dataset")

    t = sub.add_parser("train", parents=[common], help="pretrain the backbone, then train adapters")
    t.add_argument("--data", type=Path, help="episode file (default: <out>/episodes.apep)")
    t.add_argument("--resume", type=Path, help="continue adapter training from this checkpoint")

    e = sub.add_parser("eval-rollout", parents=[common], help="per-horizon rollout MSE on held-out episodes")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--data", type=Path)

    a = sub.add_parser("ablate", parents=[common], help="axis-layout or module ablation")
    a.add_argument("which", choices=["layout", "modules"])
    a.add_argument("--data", type=Path)

    m = sub.add_parser("mpc-eval", parents=[common], help="bare policy vs MPC success rates")
    m.add_argument("--checkpoint", type=Path)
    m.add_argument("--oracle", action="store_true", help="also run the ground-truth-dynamics planner")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    log = ex._quiet if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    try:
        cfg = _config(args)
        ex.configure_threads()
        out: Path = args.out
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
        data = getattr(args, "data", None) or out / "episodes.apep"
        ckpt = getattr(args, "checkpoint", None) or out / "model.adpw"
        if args.command == "gen-data":
            result = ex.cmd_gen_data(cfg, out / "episodes.apep")
        elif args.command == "train":
            result = ex.cmd_train(cfg, data, out / "model.adpw", args.resume, log)
        elif args.command == "eval-rollout":
            result = ex.cmd_eval_rollout(cfg, ckpt, data, out).to_csv()
        elif args.command == "ablate":
            result = ex.cmd_ablate(cfg, args.which, out, data if Path(data).exists() else None, log).to_csv()
        else:
            result = ex.cmd_mpc_eval(cfg, ckpt, out, args.oracle, log).to_csv()
    except (ConfigError, ContractError, CheckpointError, OSError) as exc:
        print(f"adapower: error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"adapower: numeric error: {exc}", file=sys.stderr)
        return 3
    print(result if isinstance(result, str) else json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
