"""Command-line entry point: ``wpnav <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .agent import (NavigationAgent, PpoTrainer, policy_from_bytes, policy_params, read_training_log,
                    write_training_log)
from .config import RunConfig, apply_overrides, load_config
from .environment import NavEnv, SensorConfig, Sensors, read_trajectories, run_episode, write_trajectories
from .errors import BadMagic, DataError, DivergedTraining, MalformedInput, WpnavError
from .evaluation import (EvalReport, GeodesicOracle, check_map, evaluate, generate_suite, read_suite,
                         write_suite)
from .grid import generate_map, read_map
from .nncore.checkpoint import checksum
from .perception import SweepDataset, TwinVae, collect_dataset, train_twin_vae
from .planner import FieldCache

log = logging.getLogger("wpnav")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# -- helpers ----------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise BadMagic(f"{path} does not exist") from None


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "stage_scale", None) is not None:
        overrides["curriculum.stage_scale"] = repr(args.stage_scale)
    if getattr(args, "map", None):
        overrides["map"] = args.map
    overrides["out"] = str(args.out)
    return apply_overrides(cfg, overrides)


def _load_grid(cfg: RunConfig):
    if not cfg.map:
        raise UsageError("no map given (use --map or set 'map' in the config)")
    return read_map(cfg.map)


def _finish(command: str, out: Path, cfg: RunConfig | None, artifacts: list[Path], extra: dict) -> None:
    """Write the resolved config and record this command's outputs in out/manifest.json."""
    files = list(artifacts)
    if cfg is not None:
        cfg_path = out / f"{command}.config.txt"
        cfg_path.write_text(cfg.to_text(), encoding="utf-8")
        files.append(cfg_path)
    manifest_path = out / "manifest.json"
    manifest = {"runs": {}}
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError:
            log.warning("replacing unreadable manifest %s", manifest_path)
    entry = {
        "run_id": f"{command}-{cfg.hash() if cfg else 'noconfig'}-{cfg.seed if cfg else 0}",
        "command": command,
        "config_hash": cfg.hash() if cfg else None,
        "version": __version__,
        "artifacts": {p.name: _sha256(p) for p in files},
    }
    entry.update(extra)
    # a file belongs to the latest command that wrote it
    for other in manifest["runs"].values():
        for name in list(other.get("artifacts", {})):
            if name in entry["artifacts"]:
                del other["artifacts"][name]
    manifest["runs"][command] = entry
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------------

def cmd_gen_map(args) -> int:
    grid = generate_map(args.kind, args.size, args.seed, args.cell_size)
    path = args.out / "map.txt"
    path.write_text(grid.to_text(), encoding="utf-8")
    _finish("gen-map", args.out, None, [path],
            {"map_hash": grid.map_hash(), "seed": args.seed, "kind": args.kind, "size": args.size})
    print(f"wrote {path} ({grid.height}x{grid.width}, {len(grid.free_cells())} free cells)")
    return EXIT_OK


def cmd_gen_suite(args) -> int:
    cfg = resolve_config(args)
    grid = _load_grid(cfg)
    n = args.episodes if args.episodes is not None else cfg.evaluation.suite_size
    seed = args.seed if args.seed is not None else cfg.evaluation.suite_seed
    suite = generate_suite(grid, n, seed, cfg.training.min_geodesic, cfg.training.max_steps)
    path = args.out / "suite.txt"
    write_suite(path, suite)
    _finish("gen-suite", args.out, cfg, [path], {"map_hash": grid.map_hash()})
    print(f"wrote {path} ({len(suite)} episodes)")
    return EXIT_OK


def cmd_collect(args) -> int:
    cfg = resolve_config(args)
    grid = _load_grid(cfg)
    n = args.poses if args.poses is not None else cfg.perception.n_poses
    ds = collect_dataset(grid, n, np.random.default_rng(cfg.seed))
    path = args.out / "dataset.nvd"
    path.write_bytes(ds.to_bytes())
    _finish("collect", args.out, cfg, [path], {"map_hash": grid.map_hash(), "samples": len(ds)})
    print(f"wrote {path} ({len(ds)} samples)")
    return EXIT_OK


def cmd_train_vae(args) -> int:
    cfg = resolve_config(args)
    try:
        ds = SweepDataset.from_bytes(Path(args.dataset).read_bytes())
    except OSError as exc:
        raise MalformedInput(f"cannot read dataset {args.dataset}: {exc}") from None
    p = cfg.perception
    sensors = SensorConfig(num_rays=ds.depth.shape[1], max_range=ds.max_range,
                           patch_size=ds.patch.shape[1])
    vae = TwinVae(sensors, n_z=p.n_z, seed=cfg.seed)
    ckpt = args.out / "vae.nvc"
    try:
        curves = train_twin_vae(ds, vae, seed=cfg.seed, batch=p.batch, iterations=p.iterations,
                                lr=p.lr, beta=p.beta)
    except DivergedTraining:
        partial = args.out / "vae.partial.nvc"
        partial.write_bytes(vae.to_bytes({"partial": True}))
        _finish("train-vae", args.out, cfg, [partial], {"partial": True})
        raise
    ckpt.write_bytes(vae.to_bytes())
    curve_path = args.out / "vae_loss.txt"
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("iteration depth_loss patch_loss\n")
        for i, (a, b) in enumerate(zip(curves["depth"], curves["patch"])):
            fh.write(f"{i} {float(a)!r} {float(b)!r}\n")
    _finish("train-vae", args.out, cfg, [ckpt, curve_path],
            {"vae_checksum": vae.checksum(), "dataset_sha256": _sha256(Path(args.dataset))})
    print(f"wrote {ckpt} and {curve_path}")
    return EXIT_OK


def cmd_train_policy(args) -> int:
    cfg = resolve_config(args)
    grid = _load_grid(cfg)
    vae_blob = _read_bytes(args.vae)
    vae = TwinVae.from_bytes(vae_blob)
    vae_sum_before = checksum(vae_blob)
    init = None
    lineage = {}
    if args.init_from:
        parent = _read_bytes(args.init_from)
        init = policy_params(parent)
        lineage = {"parent_checkpoint": str(args.init_from), "parent_sha256": checksum(parent)}
    trainer = PpoTrainer(grid, vae, cfg.curriculum.schedule(), cfg.ppo, seed=cfg.seed,
                         encode_mode=cfg.perception.encode_mode, init_params=init,
                         min_geodesic=cfg.training.min_geodesic, max_steps=cfg.training.max_steps)
    total_episodes = cfg.training.total_episodes or None
    result = trainer.train(total_steps=cfg.training.total_steps if not total_episodes else None,
                           total_episodes=total_episodes)
    if checksum(_read_bytes(args.vae)) != vae_sum_before:
        raise DataError("perception checkpoint changed during policy training")
    ckpt = args.out / "policy.nvc"
    ckpt.write_bytes(trainer.checkpoint(lineage))
    log_path = args.out / "training_log.txt"
    write_training_log(log_path, result.logs)
    _finish("train-policy", args.out, cfg, [ckpt, log_path],
            {"map_hash": grid.map_hash(), "vae_checksum": vae_sum_before, "lineage": lineage,
             "stage_changes": trainer.stage_changes, "env_steps": result.env_steps})
    print(f"wrote {ckpt} ({len(result.logs)} episodes, {result.env_steps} steps)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    grid = _load_grid(cfg)
    suite = read_suite(args.suite)
    fields = FieldCache(grid)
    if args.oracle:
        check_map(suite, grid)
        env = NavEnv(grid, fields)
        policy = GeodesicOracle(env)
        label = "oracle"
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --oracle")
        net, vae, meta = policy_from_bytes(_read_bytes(args.checkpoint))
        check_map(suite, grid, meta.get("map_hash"))
        # observations must match what the embedded encoder was trained on
        env = NavEnv(grid, fields, Sensors(vae.sensor_config))
        policy = NavigationAgent(net, vae, meta["frames"], meta.get("encode_mode", cfg.perception.encode_mode),
                                 mode="greedy")
        label = str(args.checkpoint)
    report = evaluate(policy, suite, grid, fields=fields, seed=cfg.seed, env=env)
    report.label = label
    path = args.out / "report.txt"
    path.write_text(report.to_text(), encoding="utf-8")
    artifacts = [path]
    if args.trajectories:
        traces = []
        for spec in suite.episodes[:args.trajectories]:
            if hasattr(policy, "seed"):
                policy.seed([cfg.seed, spec.episode_id])
            traces.append(run_episode(spec, policy, grid, env=env))
        tpath = args.out / "trajectories.txt"
        write_trajectories(tpath, traces)
        artifacts.append(tpath)
    _finish("eval", args.out, cfg, artifacts, {"map_hash": grid.map_hash(), "suite": str(args.suite)})
    print(f"mean_spl {report.mean_spl:.4f} mean_success {report.mean_success:.4f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    # matplotlib is only imported when plotting
    from .plotting import plot_bars, plot_curves, plot_paths

    out = args.out / f"{args.kind}.svg"
    labels = args.labels or [Path(p).parent.name or Path(p).stem for p in args.inputs]
    if len(labels) != len(args.inputs):
        raise UsageError("--labels must match the number of inputs")
    if args.kind == "curve":
        runs = [(lab, read_training_log(p)) for lab, p in zip(labels, args.inputs)]
        plot_curves(runs, out, metric=args.metric, alpha=args.alpha, x_axis=args.x_axis)
    elif args.kind == "paths":
        if not args.map:
            raise UsageError("plot paths needs --map")
        grid = read_map(args.map)
        goals = None
        if args.suite:
            goals = {e.episode_id: e.goal for e in read_suite(args.suite).episodes}
        trajectories = {}
        for p in args.inputs:
            try:
                trajectories.update(read_trajectories(p))
            except OSError as exc:
                raise MalformedInput(f"cannot read {p}: {exc}") from None
        plot_paths(grid, trajectories, out, goals)
    else:
        reports = []
        for lab, p in zip(labels, args.inputs):
            try:
                reports.append(EvalReport.from_text(Path(p).read_text(encoding="utf-8"), lab))
            except OSError as exc:
                raise MalformedInput(f"cannot read {p}: {exc}") from None
        plot_bars(reports, out)
    _finish(f"plot-{args.kind}", args.out, None, [out], {"inputs": [str(p) for p in args.inputs]})
    print(f"wrote {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wpnav", description="Waypoint-curriculum navigation experiments.")
    parser.add_argument("--version", action="version", version=f"wpnav {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        if config:
            p.add_argument("--config", help="run config file (key = value)")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
            p.add_argument("--map", help="map file (overrides the config)")

    p = sub.add_parser("gen-map", help="generate a random rooms-and-corridors or maze map")
    common(p, config=False)
    p.add_argument("--kind", choices=("rooms", "maze"), default="rooms")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--cell-size", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_map, seed=0)

    p = sub.add_parser("gen-suite", help="generate a fixed evaluation episode suite")
    common(p)
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(func=cmd_gen_suite)

    p = sub.add_parser("collect", help="collect a 360-degree sweep dataset for the VAE")
    common(p)
    p.add_argument("--poses", type=int, default=None)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train-vae", help="train the twin VAE on a sweep dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-policy", help="train a PPO policy under a curriculum")
    common(p)
    p.add_argument("--vae", required=True, help="frozen VAE checkpoint")
    p.add_argument("--init-from", help="policy checkpoint to start from (fine-tuning)")
    p.add_argument("--stage-scale", type=float, default=None, help="divide curriculum boundaries")
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("eval", help="evaluate a policy greedily on a suite")
    common(p)
    p.add_argument("--checkpoint", help="policy checkpoint")
    p.add_argument("--oracle", action="store_true", help="use the scripted geodesic oracle instead")
    p.add_argument("--suite", required=True)
    p.add_argument("--trajectories", type=int, default=0, metavar="N",
                   help="also export trajectories of the first N episodes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="draw curves, path overlays or metric bars as SVG")
    common(p, config=False)
    p.add_argument("kind", choices=("curve", "paths", "bars"))
    p.add_argument("inputs", nargs="+", help="training logs, trajectory files or reports")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--map")
    p.add_argument("--suite")
    p.add_argument("--metric", default="success")
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--x-axis", choices=("episode", "steps"), default="episode")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:      # usage errors, --help, --version
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except UsageError as exc:
        print(f"wpnav: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedTraining as exc:
        print(f"wpnav: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (WpnavError, DataError) as exc:
        print(f"wpnav: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
