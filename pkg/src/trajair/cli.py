"""Command-line entry point: process, synth, train, predict, eval, plot.

Failures print one line ``<category>: <message>`` to stderr and exit 1.
Categories: missing-input, invalid-input, config-error,
training-diverged, io-error. Usage errors exit 2 (argparse).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import ConfigError, RunConfig, canonical_json, resolve, stamp
from .dataset import default_day_split, make_windows, split_days, windows_from_scenes
from .ingest import MetarError, parse_track_log, read_metar_lines
from .geo import process_records
from .model import load_checkpoint, save_checkpoint
from .scenes import SceneError, list_days, read_scene, write_scene
from . import synth as synth_mod
from . import train_eval as te

log = logging.getLogger("trajair")

REPORT_SCHEMA = "trajair-eval-report/1"
PREDICTION_SCHEMA = "trajair-prediction/1"


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise CliError("missing-input", f"{what} not found: {path}")
    return Path(path)


def _require_days(root: Path) -> list[str]:
    _require(root, "data directory")
    days = list_days(root)
    if not days:
        raise CliError("missing-input", f"no day directories with scenes under {root}")
    return days


def dataset_fingerprint(root: Path, days: Sequence[str]) -> str:
    """sha256 over the relative names and bytes of every scene file in ``days``."""
    h = hashlib.sha256()
    for day in sorted(days):
        for f in sorted((Path(root) / day).glob("*.csv")):
            h.update(f"{day}/{f.name}\n".encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def _write_json(path: Path, obj: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------
# subcommands


def cmd_process(args, cfg: RunConfig) -> int:
    frame = cfg.frame.frame()
    out = Path(args.out) if args.out else cfg.data_root
    metar_path = _require(args.metar, "METAR file")
    summary = {}
    for track_file in args.tracks:
        path = _require(track_file, "track log")
        with open(path) as fh:
            records, diags = parse_track_log(fh, str(path))
        for d in diags:
            log.warning("%s", d)
        if not records:
            raise CliError("invalid-input", f"{path}: no usable track records")
        with open(metar_path) as fh:
            reports, mdiags = read_metar_lines(fh, str(metar_path), min(r.timestamp for r in records))
        for d in mdiags:
            log.warning("%s", d)
        day = path.stem
        scenes, stats = process_records(records, reports, frame, day)
        for scene in scenes:
            write_scene(scene, out / day)
        stats["parse_errors"] = len(diags)
        summary[day] = stats
    _write_json(out / "process_report.json", {"days": summary, **stamp(cfg)})
    print(canonical_json(summary))
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = synth_mod.load_spec(_require(args.spec, "pattern spec")) if args.spec else synth_mod.PatternSpec()
    out = Path(args.out) if args.out else cfg.data_root
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("io-error", f"cannot create {out}: {exc}") from None
    manifest = synth_mod.generate_corpus(
        spec, args.scenes, cfg.seed, out, scenes_per_day=args.scenes_per_day, provenance=stamp(cfg)
    )
    print(f"wrote {manifest.n_scenes} scenes to {out}")
    return 0


def _train_test_days(cfg: RunConfig, root: Path) -> tuple[list[str], list[str]]:
    _require_days(root)
    return default_day_split(root, cfg.train.test_fraction)


def cmd_train(args, cfg: RunConfig) -> int:
    root = cfg.data_root
    train_days, test_days = _train_test_days(cfg, root)
    scenes, _ = split_days(root, train_days, [])
    windows = list(windows_from_scenes(scenes, cfg.horizon_config(cfg.train.window_stride)))
    if not windows:
        raise CliError("invalid-input", f"no training windows of {cfg.horizon.t_obs}+{cfg.horizon.t_pred} s in {root}")
    mcfg = cfg.model_config()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log.info("training on %d windows from %d days", len(windows), len(train_days))
    result = te.train(
        windows, mcfg, cfg.train.epochs, cfg.seed,
        batch_size=cfg.train.batch_size,
        learning_rate=cfg.train.learning_rate,
        max_steps=cfg.train.max_steps or None,
        diagnostic_path=out.with_suffix(out.suffix + ".diverged"),
        progress=lambda k, r: log.info("step %d loss %.6f", k, r.l_total) if k % 100 == 0 else None,
    )
    meta = {
        **stamp(cfg),
        "seed": cfg.seed,
        "train_days": train_days,
        "test_days": test_days,
        "dataset_fingerprint": dataset_fingerprint(root, train_days),
        "steps": result.steps,
        "n_windows": len(windows),
        "loss_history": [[r.l_traj, r.l_cvae] for r in result.history],
    }
    save_checkpoint(out, result.params, mcfg, meta)
    last = result.history[-1]
    print(f"trained {result.steps} steps; final loss {last.l_total:.6f} (traj {last.l_traj:.6f}, kl {last.l_cvae:.6f})")
    return 0


def _load_model(path) -> tuple:
    _require(path, "checkpoint")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise CliError("invalid-input", f"{path}: {exc}") from None


def cmd_eval(args, cfg: RunConfig) -> int:
    params, mcfg, meta = _load_model(args.ckpt)
    root = cfg.data_root
    days = _require_days(root)
    test_days = [d for d in meta.get("test_days", []) if d in days]
    train_days = [d for d in meta.get("train_days", []) if d in days]
    if not test_days:
        train_days, test_days = default_day_split(root, cfg.train.test_fraction)
    _, test_scenes = split_days(root, [], test_days)
    horizon = cfg.horizon_config(cfg.eval.window_stride)
    if (horizon.t_obs, horizon.t_pred) != (mcfg.t_obs, mcfg.t_pred):
        raise CliError("config-error", "configured horizon differs from the checkpoint's")
    windows = list(windows_from_scenes(test_scenes, horizon))
    if not windows:
        raise CliError("invalid-input", f"no evaluation windows in days {test_days}")
    n = args.n if args.n is not None else cfg.eval.n_samples
    bs = cfg.eval.batch_size
    metrics = {
        "model": te.evaluate(te.model_predictor(params, mcfg), windows, n, cfg.seed, bs).to_dict(),
        "const_velocity": te.evaluate(te.const_velocity_predictor(mcfg.t_pred), windows, n, cfg.seed, bs).to_dict(),
    }
    if args.nearest_neighbor:
        train_scenes, _ = split_days(root, train_days, [])
        index_windows = list(windows_from_scenes(train_scenes, cfg.horizon_config(cfg.train.window_stride)))
        index = te.NearestNeighborIndex.from_windows(index_windows)
        metrics["nearest_neighbor"] = te.evaluate(te.nearest_neighbor_predictor(index), windows, n, cfg.seed, bs).to_dict()
    cv = metrics["const_velocity"]["ade_km"]
    report = {
        "schema": REPORT_SCHEMA,
        "metrics": metrics,
        "ade_improvement_vs_const_velocity": (1.0 - metrics["model"]["ade_km"] / cv) if cv > 0 else None,
        "test_days": test_days,
        "dataset_fingerprint": dataset_fingerprint(root, test_days),
        "checkpoint_sha256": hashlib.sha256(Path(args.ckpt).read_bytes()).hexdigest(),
        "checkpoint_config_hash": meta.get("config_hash"),
        "seed": cfg.seed,
        **stamp(cfg),
    }
    _write_json(Path(args.out), report)
    m = metrics["model"]
    print(f"model ADE/FDE {m['ade_km']:.3f}/{m['fde_km']:.3f} km; const-vel {cv:.3f}/{metrics['const_velocity']['fde_km']:.3f} km")
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    scene = read_scene(_require(args.scene, "scene file"))
    _, mcfg, _ = _load_model(args.ckpt)
    horizon = cfg.horizon_config(1)
    windows = make_windows(scene, horizon)
    if args.start is not None:
        windows = [w for w in windows if w.start_t == args.start]
    if not windows:
        raise CliError("invalid-input", f"no complete {horizon.length} s window in {args.scene}" +
                       (f" starting at t={args.start}" if args.start is not None else ""))
    window = windows[0]
    n = args.n if args.n is not None else cfg.eval.n_samples
    samples = te.predict(Path(args.ckpt), window, n, cfg.seed)
    best = [
        te.best_sample_index([s.positions[a] for s in samples], window.future[a]) for a in range(window.agents)
    ]
    payload = {
        "schema": PREDICTION_SCHEMA,
        "scene_id": scene.scene_id,
        "start_t": window.start_t,
        "agents": window.agent_ids,
        "history": window.history.tolist(),
        "truth": window.future.tolist(),
        "samples": [s.positions.tolist() for s in samples],
        "best_index": best,
        "seed": cfg.seed,
        **stamp(cfg),
    }
    _write_json(Path(args.out), payload)
    print(f"wrote {n} samples for {window.agents} agents to {args.out}")
    return 0


def cmd_plot(args, cfg: RunConfig) -> int:
    from .plotting import plot_prediction, plot_scene

    src = _require(args.input, "input file")
    if src.stat().st_size == 0:
        raise CliError("invalid-input", f"{src} is empty")
    if src.suffix == ".json":
        counts = plot_prediction(json.loads(src.read_text()), Path(args.out))
    else:
        counts = plot_scene(read_scene(src), Path(args.out))
    print(canonical_json(counts))
    return 0


# ----------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajair", description="Terminal-airspace trajectory toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, data=True):
        p.add_argument("--config", type=Path, help="INI configuration file")
        p.add_argument("--seed", type=int, help="random seed (overrides config)")
        if data:
            p.add_argument("--data", type=Path, help="scene dataset root (overrides config)")

    p = sub.add_parser("process", help="raw track logs + METAR -> scene files")
    common(p, data=False)
    p.add_argument("--tracks", type=Path, nargs="+", required=True, help="track logs, one per day")
    p.add_argument("--metar", type=Path, required=True, help="METAR reports, one per line")
    p.add_argument("--out", type=Path, help="output dataset root")
    p.set_defaults(func=cmd_process)

    p = sub.add_parser("synth", help="generate a synthetic traffic-pattern corpus")
    common(p, data=False)
    p.add_argument("--spec", type=Path, help="pattern spec JSON")
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--scenes-per-day", type=int, default=50)
    p.add_argument("--out", type=Path, help="output dataset root")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model checkpoint")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="sample futures for one window of a scene")
    common(p, data=False)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--start", type=int, help="window start time (default: first complete window)")
    p.add_argument("--n", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="best-of-N ADE/FDE on held-out days")
    common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--nearest-neighbor", action="store_true", help="also score the nearest-neighbour baseline")
    p.add_argument("--out", type=Path, required=True, help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render a scene CSV or prediction JSON")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_plot, config=None, seed=None)
    return parser


FLAG_KEYS = {
    "seed": "run.seed",
    "data": "run.data_root",
    "epochs": "train.epochs",
    "max_steps": "train.max_steps",
}


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        flags = {key: str(getattr(args, attr)) for attr, key in FLAG_KEYS.items() if getattr(args, attr, None) is not None}
        config_file = getattr(args, "config", None)
        if config_file is not None:
            _require(config_file, "config file")
        cfg = resolve(config_file, flags)
        return args.func(args, cfg)
    except CliError as exc:
        category, message = exc.category, str(exc)
    except ConfigError as exc:
        category, message = "config-error", str(exc)
    except te.TrainingDiverged as exc:
        category, message = "training-diverged", str(exc)
    except FileNotFoundError as exc:
        category, message = "missing-input", str(exc)
    except (MetarError, SceneError, ValueError, json.JSONDecodeError) as exc:
        category, message = "invalid-input", str(exc)
    except OSError as exc:
        category, message = "io-error", str(exc)
    print(f"{category}: {' '.join(message.split())}", file=sys.stderr)
    return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
