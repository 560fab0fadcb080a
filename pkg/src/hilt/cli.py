"""Command-line entry points.

Every subcommand resolves its configuration from built-in defaults, an
optional key=value config file (--config), and repeatable -o key=value
overrides, then embeds the resolved configuration in its plain-text report
so identical invocations produce identical artifacts.

Exit codes: 0 success, 2 usage or configuration error, 3 data error
(malformed or missing datasets, checkpoints, scenes), 4 training divergence.
"""

from __future__ import annotations

import argparse
import asyncio
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import dense_policy, teleop, waypoint_policy
from .dataset import (
    DatasetError,
    build_dense_view,
    dataset_hash,
    expand_waypoint_view,
    load_dataset,
    load_episode,
    episode_dirs,
    save_episode,
)
from .executor import ControllerLimits, ExecutorConfig, run_episode, replay_episode
from .simworld import Env, ObserveConfig, SceneGenerationError, scripted_demo
from .train_utils import TrainingDivergence

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration plumbing

def _coerce(text: str):
    s = text.strip()
    if s.lower() in ("true", "false"):
        return s.lower() == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def load_config_file(path) -> dict:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}") from exc
    for ln, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{ln}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = _coerce(v)
    return out


def resolve_config(defaults: dict, args) -> dict:
    cfg = dict(defaults)
    updates = {}
    if getattr(args, "config", None):
        updates.update(load_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"override needs key=value, got {item!r}")
        k, v = item.split("=", 1)
        updates[k.strip()] = _coerce(v)
    for k, v in updates.items():
        if k not in cfg:
            raise CliError(
                f"unknown config key {k!r} (known: {', '.join(sorted(cfg))})"
            )
        cfg[k] = v
    return cfg


def _config_block(cfg: dict) -> list[str]:
    return ["resolved config:"] + [f"  {k} = {cfg[k]}" for k in sorted(cfg)]


def _write_report(path, lines: list[str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def _loss_table(history: list[float], max_rows: int = 50) -> list[str]:
    n = len(history)
    stride = max(1, n // max_rows)
    rows = ["  epoch        loss"]
    for e in range(0, n, stride):
        rows.append(f"  {e + 1:5d}  {history[e]:.6e}")
    if n and (n - 1) % stride != 0:
        rows.append(f"  {n:5d}  {history[n - 1]:.6e}")
    return rows


def _record_cloud_setting(value):
    if value in (True, "full"):
        return True
    if value in (False, "heads"):
        return False
    if isinstance(value, (int, float)):
        return float(value)
    raise CliError(f"record_cloud must be full, heads, or a fraction, got {value!r}")


# ---------------------------------------------------------------------------
# collect-scripted

COLLECT_DEFAULTS = {
    "task": "reach_grasp",
    "episodes": 10,
    "seed_base": 0,
    "point_budget": 1024,
    "noise_sigma": 0.002,
    "record_cloud": "full",
    "record_wrist": True,
    "max_trans_delta": 0.01,
    "max_rot_delta": 0.05,
}


def cmd_collect_scripted(args) -> int:
    cfg = resolve_config(COLLECT_DEFAULTS, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ocfg = ObserveConfig(
        point_budget=cfg["point_budget"], noise_sigma=cfg["noise_sigma"]
    )
    limits = ControllerLimits(
        max_trans_delta=cfg["max_trans_delta"], max_rot_delta=cfg["max_rot_delta"]
    )
    rc = _record_cloud_setting(cfg["record_cloud"])
    lines = []
    for i in range(cfg["episodes"]):
        seed = cfg["seed_base"] + i
        ep = scripted_demo(
            cfg["task"],
            seed,
            observe_config=ocfg,
            limits=limits,
            record_cloud=rc,
            record_wrist=cfg["record_wrist"],
        )
        path = save_episode(ep, out)
        lines.append(f"  {path.name}: {len(ep.steps)} steps, success={ep.success}")
    dh = dataset_hash(out)
    report = (
        ["collect-scripted report", ""]
        + _config_block(cfg)
        + ["", f"episodes_written = {cfg['episodes']}", f"dataset_hash = {dh}", ""]
        + lines
    )
    _write_report(out / "collect_report.txt", report)
    print(f"wrote {cfg['episodes']} episodes to {out} (dataset_hash={dh[:16]}...)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# serve-teleop

SERVE_DEFAULTS = {
    "task": "precise_place",
    "seed_base": 0,
    "host": "127.0.0.1",
    "port": 8765,
    "episodes": 1,
    "point_budget": 1024,
    "noise_sigma": 0.002,
    "cloud_stride": 1,
}


def cmd_serve_teleop(args) -> int:
    cfg = resolve_config(SERVE_DEFAULTS, args)
    # dedicated flags take precedence over config-file/-o values
    if args.port is not None:
        cfg["port"] = args.port
    if args.task is not None:
        cfg["task"] = args.task
    if args.seed is not None:
        cfg["seed_base"] = args.seed
    if args.cloud_budget is not None:
        cfg["point_budget"] = args.cloud_budget
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ocfg = ObserveConfig(
        point_budget=cfg["point_budget"], noise_sigma=cfg["noise_sigma"]
    )

    def factory(i: int) -> teleop.TeleopSession:
        return teleop.TeleopSession(
            task=cfg["task"],
            seed=cfg["seed_base"] + i,
            out_root=out,
            observe_config=ocfg,
            cloud_stride=cfg["cloud_stride"],
        )

    max_episodes = cfg["episodes"] if cfg["episodes"] > 0 else None

    async def _serve():
        ready = asyncio.Event()

        async def announce():
            await ready.wait()
            print(
                f"listening on ws://{cfg['host']}:{cfg['port']} "
                f"(task={cfg['task']}, episodes={max_episodes or 'unlimited'})",
                flush=True,
            )

        announcer = asyncio.ensure_future(announce())
        try:
            await teleop.serve(
                cfg["host"],
                cfg["port"],
                factory,
                max_episodes=max_episodes,
                ready_event=ready,
            )
        finally:
            announcer.cancel()

    asyncio.run(_serve())
    print(f"collected episodes saved under {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-waypoint

TRAIN_WAYPOINT_DEFAULTS = {
    "variant": "salient_offset",
    "temporal_alpha": 0.2,
    "epochs": 200,
    "lr": 1e-4,
    "batch_size": 64,
    "grad_clip_norm": 1.0,
    "translation_aug": 0.05,
    "layers": 2,
    "embed_dim": 64,
    "heads": 4,
    "dropout": 0.1,
    "point_count": 256,
    "seed": 0,
}


def cmd_train_waypoint(args) -> int:
    cfg = resolve_config(TRAIN_WAYPOINT_DEFAULTS, args)
    episodes = load_dataset(args.data)
    dh = dataset_hash(args.data)
    view = expand_waypoint_view(
        episodes,
        alpha=cfg["temporal_alpha"],
        point_budget=cfg["point_count"],
        workspace=ExecutorConfig().workspace,
    )
    if not view:
        raise DatasetError("dataset contains no waypoint segments")
    mc = waypoint_policy.WaypointModelConfig(
        layers=cfg["layers"],
        embed_dim=cfg["embed_dim"],
        heads=cfg["heads"],
        dropout=cfg["dropout"],
        variant=cfg["variant"],
        point_count=cfg["point_count"],
    )
    tc = waypoint_policy.WaypointTrainConfig(
        lr=cfg["lr"],
        grad_clip_norm=cfg["grad_clip_norm"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        temporal_alpha=cfg["temporal_alpha"],
        translation_aug=cfg["translation_aug"],
    )
    trained = waypoint_policy.train_waypoint(view, mc, tc, seed=cfg["seed"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_waypoint(out, trained, extra={"dataset_hash": dh})
    sha = ckpt.sha256_file(out)
    report = (
        ["train-waypoint report", ""]
        + _config_block(cfg)
        + [
            "",
            f"dataset = {args.data}",
            f"dataset_hash = {dh}",
            f"training_pairs = {len(view)}",
            f"checkpoint = {out}",
            f"checkpoint_sha256 = {sha}",
            f"final_loss = {trained.history[-1]:.6e}",
            "",
        ]
        + _loss_table(trained.history)
    )
    report_path = args.report or str(out) + ".report.txt"
    _write_report(report_path, report)
    print(
        f"trained {cfg['variant']} on {len(view)} pairs, "
        f"final loss {trained.history[-1]:.4e}, checkpoint {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-dense

TRAIN_DENSE_DEFAULTS = {
    "t_pred": 16,
    "exec_horizon": 8,
    "diffusion_steps": 50,
    "use_image": True,
    "epochs": 60,
    "lr": 1e-4,
    "weight_decay": 1e-6,
    "batch_size": 64,
    "grad_clip_norm": 1.0,
    "seed": 0,
}


def cmd_train_dense(args) -> int:
    cfg = resolve_config(TRAIN_DENSE_DEFAULTS, args)
    episodes = load_dataset(args.data)
    dh = dataset_hash(args.data)
    view = build_dense_view(episodes, t_pred=cfg["t_pred"])
    if not view:
        raise DatasetError("dataset contains no steps for the dense view")
    mc = dense_policy.DenseModelConfig(
        t_pred=cfg["t_pred"],
        exec_horizon=cfg["exec_horizon"],
        diffusion_steps=cfg["diffusion_steps"],
        use_image=cfg["use_image"],
    )
    tc = dense_policy.DenseTrainConfig(
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        grad_clip_norm=cfg["grad_clip_norm"],
    )
    trained = dense_policy.train_dense(view, mc, tc, seed=cfg["seed"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_dense(out, trained, extra={"dataset_hash": dh})
    sha = ckpt.sha256_file(out)
    report = (
        ["train-dense report", ""]
        + _config_block(cfg)
        + [
            "",
            f"dataset = {args.data}",
            f"dataset_hash = {dh}",
            f"training_windows = {len(view)}",
            f"checkpoint = {out}",
            f"checkpoint_sha256 = {sha}",
            f"final_loss = {trained.history[-1]:.6e}",
            "",
        ]
        + _loss_table(trained.history)
    )
    report_path = args.report or str(out) + ".report.txt"
    _write_report(report_path, report)
    print(
        f"trained dense policy on {len(view)} windows, "
        f"final loss {trained.history[-1]:.4e}, checkpoint {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

EVAL_DEFAULTS = {
    "task": "reach_grasp",
    "episodes": 20,
    "seed_base": 10000,
    "obs_point_budget": 1024,
    "noise_sigma": 0.002,
    "use_ema": True,
    "budget": 400,
    "exec_horizon": 8,
    "infer_views": 1,
    "dense_fallback": "terminate",
    "speed_multiplier": 1.0,
}


def _eval_rollouts(task, wp_model, dense, cfg):
    exec_cfg = ExecutorConfig(
        point_budget=wp_model.config.point_count,
        exec_horizon=cfg["exec_horizon"],
        infer_views=cfg.get("infer_views", 1),
        dense_fallback=cfg["dense_fallback"],
        limits=ControllerLimits(speed_multiplier=cfg["speed_multiplier"]),
    )
    ocfg = ObserveConfig(
        point_budget=cfg["obs_point_budget"], noise_sigma=cfg["noise_sigma"]
    )
    rows, successes = [], 0
    for i in range(cfg["episodes"]):
        seed = cfg["seed_base"] + i
        env = Env(task, ocfg)
        rec = run_episode(env, wp_model, dense, exec_cfg, seed=seed, budget=cfg["budget"])
        successes += rec.outcome == "success"
        note = f"  ({rec.diagnostic})" if rec.diagnostic else ""
        rows.append(f"  seed {seed}: {rec.outcome} after {rec.wall_steps} steps{note}")
    return rows, successes


def cmd_eval(args) -> int:
    cfg = resolve_config(EVAL_DEFAULTS, args)
    trained = ckpt.load_waypoint(args.waypoint)
    wp_model = trained.ema_model if cfg["use_ema"] else trained.model
    wp_sha = ckpt.sha256_file(args.waypoint)
    dense = None
    dense_sha = None
    if args.dense:
        dtr = ckpt.load_dense(args.dense)
        dense = dense_policy.DensePolicy.from_trained(dtr, use_ema=cfg["use_ema"])
        dense_sha = ckpt.sha256_file(args.dense)
    rows, successes = _eval_rollouts(cfg["task"], wp_model, dense, cfg)
    n = cfg["episodes"]
    rate = f"{successes / n:.3f}" if n else "n/a"
    report = (
        ["eval report", ""]
        + _config_block(cfg)
        + [
            "",
            f"waypoint_checkpoint = {args.waypoint}",
            f"waypoint_checkpoint_sha256 = {wp_sha}",
            f"dense_checkpoint = {args.dense or 'none'}",
            f"dense_checkpoint_sha256 = {dense_sha or 'none'}",
            f"episodes = {n}",
            f"successes = {successes}",
            f"success_rate = {rate}",
            "",
        ]
        + rows
    )
    _write_report(args.out, report)
    print(f"eval {cfg['task']}: {successes}/{n} success (rate {rate}), report {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate

ABLATE_DEFAULTS = {
    "alphas": "0,0.2",
    "epochs": 60,
    "lr": 1e-4,
    "batch_size": 64,
    "grad_clip_norm": 1.0,
    "translation_aug": 0.05,
    "layers": 2,
    "embed_dim": 64,
    "heads": 4,
    "dropout": 0.1,
    "point_count": 256,
    "train_seed": 0,
    "eval_episodes": 20,
    "seed_base": 10000,
    "obs_point_budget": 1024,
    "noise_sigma": 0.002,
    "budget": 400,
    "infer_views": 1,
    "use_ema": True,
}


def _parse_alphas(value) -> list[float]:
    if isinstance(value, (int, float)):
        return [float(value)]
    try:
        return [float(x) for x in str(value).split(",") if x.strip() != ""]
    except ValueError as exc:
        raise CliError(f"bad alphas value {value!r}") from exc


def cmd_ablate(args) -> int:
    cfg = resolve_config(ABLATE_DEFAULTS, args)
    alphas = _parse_alphas(cfg["alphas"])
    episodes = load_dataset(args.data)
    if not episodes:
        raise DatasetError(f"no episodes under {args.data}")
    task = episodes[0].task
    dh = dataset_hash(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    eval_cfg = {
        "episodes": cfg["eval_episodes"],
        "seed_base": cfg["seed_base"],
        "obs_point_budget": cfg["obs_point_budget"],
        "noise_sigma": cfg["noise_sigma"],
        "budget": cfg["budget"],
        "exec_horizon": 8,
        "infer_views": cfg["infer_views"],
        "dense_fallback": "terminate",
        "speed_multiplier": 1.0,
    }
    results = {}
    ckpt_lines = []
    for variant in waypoint_policy.VARIANTS:
        for alpha in alphas:
            view = expand_waypoint_view(
                episodes,
                alpha=alpha,
                point_budget=cfg["point_count"],
                workspace=ExecutorConfig().workspace,
            )
            mc = waypoint_policy.WaypointModelConfig(
                layers=cfg["layers"],
                embed_dim=cfg["embed_dim"],
                heads=cfg["heads"],
                dropout=cfg["dropout"],
                variant=variant,
                point_count=cfg["point_count"],
            )
            tc = waypoint_policy.WaypointTrainConfig(
                lr=cfg["lr"],
                grad_clip_norm=cfg["grad_clip_norm"],
                batch_size=cfg["batch_size"],
                epochs=cfg["epochs"],
                temporal_alpha=alpha,
                translation_aug=cfg["translation_aug"],
            )
            trained = waypoint_policy.train_waypoint(view, mc, tc, seed=cfg["train_seed"])
            path = out / f"waypoint_{variant}_alpha{alpha:g}.ckpt"
            ckpt.save_waypoint(path, trained, extra={"dataset_hash": dh})
            model = trained.ema_model if cfg["use_ema"] else trained.model
            _, successes = _eval_rollouts(task, model, None, eval_cfg)
            results[(variant, alpha)] = successes / max(cfg["eval_episodes"], 1)
            ckpt_lines.append(
                f"  {path.name}: sha256 {ckpt.sha256_file(path)}"
            )
            print(
                f"{variant} alpha={alpha:g}: "
                f"{successes}/{cfg['eval_episodes']} success",
                flush=True,
            )

    header = f"  {'variant':24s}" + "".join(f"  alpha={a:<8g}" for a in alphas)
    table = [header]
    for variant in waypoint_policy.VARIANTS:
        row = f"  {variant:24s}" + "".join(
            f"  {results[(variant, a)]:<14.3f}" for a in alphas
        )
        table.append(row)
    report = (
        ["ablate report", ""]
        + _config_block(cfg)
        + ["", f"task = {task}", f"dataset = {args.data}", f"dataset_hash = {dh}", ""]
        + ["success rate by variant and temporal augmentation:", ""]
        + table
        + ["", "checkpoints:"]
        + ckpt_lines
    )
    _write_report(out / "ablate_report.txt", report)
    print(f"ablation table written to {out / 'ablate_report.txt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# replay

REPLAY_DEFAULTS = {
    "tolerance": 1e-6,
}


def cmd_replay(args) -> int:
    cfg = resolve_config(REPLAY_DEFAULTS, args)
    dirs = episode_dirs(args.data)
    if not dirs:
        raise DatasetError(f"no episodes under {args.data}")
    rows, worst = [], 0.0
    for d in dirs:
        ep = load_episode(d)
        env = Env(ep.task)
        scene = replay_episode(env, ep)
        err = 0.0
        for obj, stored in zip(scene.objects, ep.final_object_poses):
            err = max(err, float(np.max(np.abs(obj.pos - stored[0:3]))))
            err = max(err, float(np.max(np.abs(obj.rot - stored[3:6]))))
        if ep.final_attached != scene.attached:
            err = np.inf
        worst = max(worst, err)
        rows.append(f"  {d.name}: max_final_pose_error = {err:.3e}")
    ok = worst <= cfg["tolerance"]
    report = (
        ["replay report", ""]
        + _config_block(cfg)
        + [
            "",
            f"dataset = {args.data}",
            f"dataset_hash = {dataset_hash(args.data)}",
            f"episodes = {len(dirs)}",
            f"worst_error = {worst:.3e}",
            f"within_tolerance = {ok}",
            "",
        ]
        + rows
    )
    if args.out:
        _write_report(args.out, report)
    print("\n".join(report))
    if not ok:
        print("replay mismatch exceeds tolerance", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_common(sp):
    sp.add_argument("--config", help="key=value config file")
    sp.add_argument(
        "-o",
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hilt",
        description="hybrid imitation learning: collection, training, evaluation",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("collect-scripted", help="record scripted demonstrations")
    sp.add_argument("out", help="dataset directory to write")
    _add_common(sp)
    sp.set_defaults(func=cmd_collect_scripted)

    sp = sub.add_parser("serve-teleop", help="serve the teleop websocket protocol")
    sp.add_argument("--out", required=True, help="dataset root for collected episodes")
    sp.add_argument("--port", type=int, help="listen port")
    sp.add_argument("--task", help="task to collect")
    sp.add_argument("--seed", type=int, help="seed of the first episode")
    sp.add_argument(
        "--cloud-budget", type=int, dest="cloud_budget",
        help="point budget of streamed clouds",
    )
    _add_common(sp)
    sp.set_defaults(func=cmd_serve_teleop)

    sp = sub.add_parser("train-waypoint", help="train the waypoint policy")
    sp.add_argument("data", help="dataset directory")
    sp.add_argument("out", help="checkpoint path to write")
    sp.add_argument("--report", help="report path (default: <out>.report.txt)")
    _add_common(sp)
    sp.set_defaults(func=cmd_train_waypoint)

    sp = sub.add_parser("train-dense", help="train the dense diffusion policy")
    sp.add_argument("data", help="dataset directory")
    sp.add_argument("out", help="checkpoint path to write")
    sp.add_argument("--report", help="report path (default: <out>.report.txt)")
    _add_common(sp)
    sp.set_defaults(func=cmd_train_dense)

    sp = sub.add_parser("eval", help="roll out a trained policy")
    sp.add_argument("waypoint", help="waypoint checkpoint")
    sp.add_argument("out", help="report path to write")
    sp.add_argument("--dense", help="dense checkpoint (optional)")
    _add_common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser(
        "ablate", help="train and evaluate every head variant at several alphas"
    )
    sp.add_argument("data", help="dataset directory")
    sp.add_argument("out", help="output directory for checkpoints and the table")
    _add_common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("replay", help="verify stored episodes replay bit-true")
    sp.add_argument("data", help="dataset directory")
    sp.add_argument("--out", help="optional report path")
    _add_common(sp)
    sp.set_defaults(func=cmd_replay)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, SceneGenerationError, ckpt.CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, FileExistsError, NotADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
