"""Command-line entry point: data generation, training, evaluation, ablation.

Exit codes: 0 success, 2 configuration error, 3 data/checkpoint error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .augment import CoarseBatchSampler, FineBatchSampler
from .diffusion import geometric_schedule
from .errors import CheckpointError, ConfigError, DataError, GenerationError, NumericError
from .pipeline import ablate_steps, evaluate
from .scorenet import ScoreModel, load, save, train
from .sim2d import generate_dataset, get_task, read_dataset, workspace_from_manifest, write_dataset

STAGES = ("coarse", "fine-pick", "fine-place")


def build_model(cfg: dict, stage: str, dtype=np.float32) -> ScoreModel:
    """Instantiate a stage's model from the run config."""
    ws = cfgmod.workspace_config(cfg)
    sched = cfg["schedule"]
    stage_idx = STAGES.index(stage)
    init_seed = cfgmod.derive_seed(cfg["seed"], 3000 + stage_idx)
    if stage == "coarse":
        ms = cfg["model"]["coarse"]
        size = ms["image_size"]
        if size != ws.width or size != ws.height:
            raise ConfigError(
                f"coarse image_size {size} must match the workspace "
                f"({ws.width}x{ws.height})"
            )
        sc = sched["coarse"]
        sigmas = geometric_schedule(
            sc["sigma_min"], sc["sigma_max"], sc["levels"], eps0=1.0
        ).sigma_array()
        return ScoreModel(
            n_primitives=2, image_hw=(size, size), sigmas=sigmas,
            eps0=sched["eps0_factor"] * sc["sigma_max"] ** 2,
            trans_scale=2.0 / ws.width, trans_offset=-1.0, kind="coarse",
            channels=tuple(ms["channels"]), d_t=ms["d_t"], hidden=tuple(ms["hidden"]),
            coord_channels=ms["coord_channels"], dtype=dtype, seed=init_seed,
        )
    ms = cfg["model"]["fine"]
    size = ms["image_size"]
    sc = sched["fine"]
    sigmas = geometric_schedule(
        sc["sigma_min"], sc["sigma_max"], sc["levels"], eps0=1.0
    ).sigma_array()
    return ScoreModel(
        n_primitives=1, image_hw=(size, size), sigmas=sigmas,
        eps0=sched["eps0_factor"] * sc["sigma_max"] ** 2,
        trans_scale=2.0 / size, trans_offset=0.0, kind=stage,
        channels=tuple(ms["channels"]), d_t=ms["d_t"], hidden=tuple(ms["hidden"]),
        coord_channels=ms["coord_channels"], roi_scale=ms["roi_scale"],
        dtype=dtype, seed=init_seed,
    )


def build_sampler(cfg: dict, stage: str, demos, ws):
    aug = cfgmod.augment_config(cfg)
    task = get_task(demos[0].scene.task)
    stage_idx = STAGES.index(stage)
    pool_seed = cfgmod.derive_seed(cfg["seed"], 2000 + stage_idx)
    augment = bool(cfg["train"]["augment"])
    pool_size = int(cfg["train"]["pool_size"])
    if stage == "coarse":
        return CoarseBatchSampler(
            demos, ws, aug, pool_size=pool_size, seed=pool_seed,
            augment=augment, task=task,
        )
    which = "pick" if stage == "fine-pick" else "place"
    ms = cfg["model"]["fine"]
    return FineBatchSampler(
        demos, which, ws, aug, roi_size=ms["image_size"], roi_scale=ms["roi_scale"],
        pool_size=pool_size, seed=pool_seed, augment=augment, task=task,
    )


def _require_empty_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise DataError(f"{path}: output directory not empty (use --force to overwrite)")


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.count is not None:
        cfg["data"]["count"] = args.count
    if args.task is not None:
        cfg["task"] = args.task
    count = cfg["data"]["count"]
    if count < 1:
        raise DataError("--count must be positive")
    out = Path(args.out)
    _require_empty_dir(out, args.force)
    ws = cfgmod.workspace_config(cfg)
    task = get_task(cfg["task"])
    demos = generate_dataset(task, ws, count=count, seed=cfg["seed"])
    write_dataset(demos, out, ws, seed=cfg["seed"], task_name=task.name)
    cfgmod.echo_config(cfg, out, {"command": "gen-data", "out": str(out)})
    print(f"wrote {count} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.steps is not None:
        cfg["train"]["steps"] = args.steps
    demos, manifest = read_dataset(args.data)
    ws = workspace_from_manifest(manifest)
    k = args.demos if args.demos is not None else len(demos)
    if not 1 <= k <= len(demos):
        raise DataError(f"--demos {k} outside 1..{len(demos)} available")
    demos = demos[:k]
    stage_idx = STAGES.index(args.stage)
    model = build_model(cfg, args.stage)
    sampler = build_sampler(cfg, args.stage, demos, ws)
    tcfg = cfgmod.train_config(cfg, seed=cfgmod.derive_seed(cfg["seed"], 1000 + stage_idx))
    trace = train(model, sampler, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"model-{args.stage}.ckpt"
    save(model, ckpt)
    with open(out / f"loss-{args.stage}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(trace):
            writer.writerow([step, repr(loss)])
    cfgmod.echo_config(
        cfg, out,
        {"command": "train", "stage": args.stage, "data": str(args.data), "demos": k},
    )
    print(f"trained {args.stage} on {k} demos; checkpoint at {ckpt}")
    return 0


def _load_models(args):
    coarse = load(args.coarse, expect_n=2)
    fine_pick = fine_place = None
    if (args.fine_pick is None) != (args.fine_place is None):
        raise CheckpointError("provide both --fine-pick and --fine-place, or neither")
    if args.fine_pick is not None:
        fine_pick = load(args.fine_pick, expect_n=1)
        fine_place = load(args.fine_place, expect_n=1)
    return coarse, fine_pick, fine_place


def cmd_eval(args) -> int:
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    demos, manifest = read_dataset(args.data)
    ws = workspace_from_manifest(manifest)
    coarse, fine_pick, fine_place = _load_models(args)
    report = evaluate(
        demos, coarse, fine_pick, fine_place, ws,
        cfgmod.success_criteria(cfg), seed=cfg["seed"], limit=args.limit,
        batched=bool(cfg["eval"]["batched"]),
        steps_per_level=int(cfg["schedule"]["steps_per_level"]),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    cfgmod.echo_config(
        cfg, out,
        {"command": "eval", "data": str(args.data), "coarse": str(args.coarse),
         "fine_pick": str(args.fine_pick), "fine_place": str(args.fine_place),
         "limit": args.limit},
    )
    mode = "coarse-only" if fine_pick is None else "coarse+fine"
    print(
        f"{mode} success rate: {report.summary['success_rate']:.1f}% "
        f"over {report.summary['count']} scenes"
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        steps_list = [int(s) for s in args.steps.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--steps must be comma-separated integers: {exc}") from exc
    if not steps_list or any(s < 1 for s in steps_list):
        raise ConfigError("--steps must contain positive integers")
    demos, manifest = read_dataset(args.data)
    ws = workspace_from_manifest(manifest)
    coarse, fine_pick, fine_place = _load_models(args)
    rows = ablate_steps(
        demos, coarse, ws, cfgmod.success_criteria(cfg), steps_list,
        seed=cfg["seed"], fine_pick=fine_pick, fine_place=fine_place,
        limit=args.limit, steps_per_level=int(cfg["schedule"]["steps_per_level"]),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys())
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([row[c] for c in cols])
    _plot_ablation(rows, out / "ablation.png")
    cfgmod.echo_config(
        cfg, out, {"command": "ablate", "data": str(args.data), "steps": steps_list}
    )
    for row in rows:
        print(
            f"L={row['steps']:>4d}  coarse success {row['coarse_success_rate']:5.1f}%  "
            f"{row['mean_scene_ms']:.1f} ms/scene"
        )
    return 0


def _plot_ablation(rows, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [r["steps"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, [r["coarse_success_rate"] for r in rows], "o-", label="coarse stage")
    if "coarse_fine_success_rate" in rows[0]:
        ax.plot(
            steps, [r["coarse_fine_success_rate"] for r in rows], "s-",
            label="coarse + fine",
        )
    ax.set_xlabel("denoising steps")
    ax.set_ylabel("success rate (%)")
    ax.set_xscale("log")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="se2diff",
        description="Score-based SE(2) pose diffusion for pick-and-place estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--task")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--stage", required=True, choices=STAGES)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--demos", type=int, help="use the first K demonstrations")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--coarse", required=True)
    p.add_argument("--fine-pick")
    p.add_argument("--fine-place")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="success rate vs denoising steps")
    p.add_argument("--data", required=True)
    p.add_argument("--coarse", required=True)
    p.add_argument("--fine-pick")
    p.add_argument("--fine-place")
    p.add_argument("--steps", default="1,10,50,100")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, GenerationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
