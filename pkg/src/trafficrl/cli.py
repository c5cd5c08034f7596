"""Command-line entry point: gen-data, train, rollout, eval, export-hist."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .features import feature_dim
from .metrics import FEATURES, feature_histogram, histogram_csv
from .pipeline import (DATASETS, ConfigError, RunConfig, evaluate_tracks, generate_datasets, load_config,
                       rollout_set, tracks_from_logs, train_model)
from .policy import checkpoint_bytes, load_checkpoint
from .scenario import spec_from_dict, spec_to_dict
from .simulator import LOG_COLUMNS, Trajectory, read_trajectory_csv, trajectory_csv, trajectory_rows

SCENARIO_FORMAT = "trafficrl-scenarios"
SCENARIO_VERSION = 1
EPOCH_COLUMNS = ["epoch", "mode", "lr", "il_loss", "bc_loss", "surrogate", "value_loss", "mean_return",
                 "collision_pct", "offroad_pct", "steps", "skipped_steps", "wall_time"]

log = logging.getLogger("trafficrl")


class CommandError(RuntimeError):
    pass


# ------------------------------------------------------------------- file IO

def atomic_write(path, data) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_outputs(outputs: dict) -> None:
    """Commit a batch of ``path -> bytes`` once everything has been computed."""
    for path, data in outputs.items():
        atomic_write(path, data)


def scenarios_bytes(specs) -> bytes:
    doc = {"format": SCENARIO_FORMAT, "version": SCENARIO_VERSION,
           "scenarios": [spec_to_dict(s) for s in specs]}
    return json.dumps(doc, sort_keys=True).encode()


def read_scenarios(path) -> list:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CommandError(f"cannot read scenario file {path}: {e}") from e
    if doc.get("format") != SCENARIO_FORMAT or doc.get("version") != SCENARIO_VERSION:
        raise CommandError(f"{path} is not a version-{SCENARIO_VERSION} scenario file")
    return [spec_from_dict(d) for d in doc["scenarios"]]


def read_checkpoint(path, expected_dim=None):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CommandError(f"cannot read checkpoint {path}: {e}") from e
    return load_checkpoint(data, expected_dim)


def epochs_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPOCH_COLUMNS)
    for r in reports:
        w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in EPOCH_COLUMNS])
    return buf.getvalue()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    version: str = __version__
    started: float = field(default_factory=time.time)
    finished: float | None = None

    def to_bytes(self) -> bytes:
        return json.dumps(asdict(self), indent=2, sort_keys=True).encode()


def _manifest_path(out: Path, is_dir: bool) -> Path:
    return out / "manifest.json" if is_dir else out.with_name(out.name + ".manifest.json")


def _finish(manifest: RunManifest, outputs: dict, out: Path, is_dir: bool) -> None:
    manifest.outputs = sorted(str(p) for p in outputs)
    manifest.finished = time.time()
    outputs = dict(outputs)
    outputs[_manifest_path(out, is_dir)] = manifest.to_bytes()
    write_outputs(outputs)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    data = generate_datasets(cfg)
    outputs = {out / f"{name}.json": scenarios_bytes(data[name]) for name in DATASETS}
    _finish(RunManifest("gen-data", cfg.to_dict(), cfg.seed), outputs, out, True)


def _load_data(data_dir) -> dict:
    d = Path(data_dir)
    return {name: read_scenarios(d / f"{name}.json") for name in DATASETS if (d / f"{name}.json").exists()}


def cmd_train(args, cfg: RunConfig) -> None:
    if args.mode:
        cfg.train.mode = args.mode
        cfg.train.__post_init__()
    out = Path(args.out)
    data = _load_data(args.data)
    fdim = feature_dim(cfg.dataset.history)
    outputs = {}

    def on_epoch(rep, state):
        log.info("epoch %d %s il=%.4g surr=%.4g coll=%.2f%%", rep["epoch"], rep["mode"], rep["il_loss"],
                 rep["surrogate"], rep["collision_pct"])
        outputs[out / "checkpoints" / f"epoch_{rep['epoch']:03d}.json"] = checkpoint_bytes(
            state.params, state.vparams, fdim, {"epoch": rep["epoch"], "mode": cfg.train.mode})

    state, reports = train_model(cfg, data, on_epoch)
    outputs[out / "checkpoint.json"] = checkpoint_bytes(
        state.params, state.vparams, fdim, {"epoch": len(reports), "mode": cfg.train.mode, "config": cfg.to_dict()})
    outputs[out / "epochs.csv"] = epochs_csv(reports)
    _finish(RunManifest("train", cfg.to_dict(), cfg.seed, {"data": str(args.data)}), outputs, out, True)


def cmd_rollout(args, cfg: RunConfig) -> None:
    specs = read_scenarios(args.scenarios)
    out = Path(args.out)
    if args.controller == "expert":
        if not all(s.is_nominal for s in specs):
            raise CommandError("the expert controller needs nominal scenarios with logs")
        text = _expert_csv(specs)
    else:
        params = None
        if args.controller == "policy":
            if not args.checkpoint:
                raise CommandError("--checkpoint is required for the policy controller")
            params, _, _ = read_checkpoint(args.checkpoint, feature_dim(specs[0].history.shape[1] - 1))
        ticks = args.ticks or (cfg.eval.nominal_ticks if all(s.is_nominal for s in specs) else cfg.eval.longtail_ticks)
        traj = rollout_set(specs, ticks, params, args.controller, cfg.eval.action_mode, cfg.seed)
        text = trajectory_csv(traj)
    inputs = {"scenarios": str(args.scenarios), "checkpoint": args.checkpoint}
    _finish(RunManifest("rollout", cfg.to_dict(), cfg.seed, inputs), {out: text}, out, False)


def _expert_csv(specs) -> str:
    """Expert logs in the trajectory-log format; non-hero agents are tagged ``oracle``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for b, s in enumerate(specs):
        lg = s.expert_log
        T, N = lg.actions.shape[:2]
        tr = Trajectory(lg.states[None], lg.actions[None], np.zeros((1, T, N)), np.zeros((1, T, N), bool),
                        np.zeros((1, T, N), bool), np.ones((1, T + 1, N), bool), np.zeros((1, T, N)),
                        np.where(s.hero_flags, "hero", "oracle")[None], np.ones((1, N), bool),
                        np.array([T]), np.zeros(1, bool), [s])
        w.writerows(trajectory_rows(tr, [b]))
    return buf.getvalue()


def _read_logs(path):
    try:
        with open(path) as fh:
            return read_trajectory_csv(fh.read())
    except OSError as e:
        raise CommandError(f"cannot read trajectory log {path}: {e}") from e


def cmd_eval(args, cfg: RunConfig) -> None:
    specs = read_scenarios(args.scenarios)
    tracks = tracks_from_logs(_read_logs(args.logs), specs)
    report = evaluate_tracks(cfg, tracks, specs)
    out = Path(args.out)
    inputs = {"logs": str(args.logs), "scenarios": str(args.scenarios)}
    _finish(RunManifest("eval", cfg.to_dict(), cfg.seed, inputs), {out: report.to_csv()}, out, False)


def cmd_export_hist(args, cfg: RunConfig) -> None:
    specs = read_scenarios(args.scenarios)
    tracks = tracks_from_logs(_read_logs(args.logs), specs)
    out = Path(args.out)
    outputs = {out / f"{args.label}_{feat}.csv": histogram_csv(feature_histogram(tracks, feat))
               for feat in FEATURES}
    inputs = {"logs": str(args.logs), "scenarios": str(args.scenarios)}
    _finish(RunManifest("export-hist", cfg.to_dict(), cfg.seed, inputs), outputs, out, True)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "rollout": cmd_rollout, "eval": cmd_eval,
            "export-hist": cmd_export_hist}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trafficrl", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="run configuration (JSON)")
        return sp

    sp = cmd("gen-data", "generate nominal and long-tail scenario sets")
    sp.add_argument("--out", required=True, help="output directory")

    sp = cmd("train", "train a policy and write checkpoints")
    sp.add_argument("--data", required=True, help="directory written by gen-data")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--mode", choices=["BC", "IL", "RL", "RL_SHAPED", "BC_RL", "RTR"],
                    help="override the configured training mode")

    sp = cmd("rollout", "roll out a controller on a scenario file")
    sp.add_argument("--scenarios", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--controller", choices=["policy", "oracle", "expert"], default="policy")
    sp.add_argument("--ticks", type=int)
    sp.add_argument("--out", required=True, help="trajectory log (CSV)")

    sp = cmd("eval", "metric report over trajectory logs")
    sp.add_argument("--logs", required=True)
    sp.add_argument("--scenarios", required=True)
    sp.add_argument("--out", required=True, help="metric report (CSV)")

    sp = cmd("export-hist", "write feature histograms of trajectory logs")
    sp.add_argument("--logs", required=True)
    sp.add_argument("--scenarios", required=True)
    sp.add_argument("--label", default="model")
    sp.add_argument("--out", required=True, help="output directory")
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage to stderr
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, CommandError, ValueError, OSError) as e:
        print(f"trafficrl {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
