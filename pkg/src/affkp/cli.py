"""``affkp`` command line: generate, train, predict, evaluate, interpret, simulate, validate.

Exit codes: 0 success, 2 configuration, 3 data, 4 model, 5 internal.
``AFFKP_LOG_LEVEL`` sets the log level; every other knob lives in the config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import labels as L
from .config import PathsConfig, PipelineConfig, load_config
from .errors import AffkpError, ConfigError, DataError
from .frames import write_frames
from .instances import read_instances
from .model import load_checkpoint, save_checkpoint
from .pipeline import (evaluate_dataset, load_prediction, model_predictor, predict_cloud, prediction_dirname,
                       save_prediction, scene_dirs, tree_hash)
from .synth import load_scene, sample_scene, save_scene, scene_dirname
from .tasks import corrupt_wrap_width, oracle_predictor, run_campaign, write_campaign
from .train import train

log = logging.getLogger("affkp")

COMMANDS = ("generate", "train", "predict", "evaluate", "interpret", "simulate", "validate")
DEFAULT_OUT = {"generate": "dataset", "train": "run", "predict": "predictions", "evaluate": "report",
               "interpret": "frames", "simulate": "campaign"}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, cfg: PipelineConfig, command: str, inputs: list, started: str) -> None:
    """``manifest.json``: tool version, config hash, input hashes, command, timestamps."""
    manifest = {
        "tool": "affkp",
        "version": __version__,
        "command": command,
        "config_hash": cfg.hash(),
        "inputs": {str(p): tree_hash(p) for p in inputs},
        "started": started,
        "finished": _now(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def _require(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} given (set paths in the config or pass the flag)")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} {p} does not exist")
    return p


def _out_dir(args, command: str) -> Path:
    out = Path(args.out or DEFAULT_OUT[command])
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out} is not writable: {exc}") from exc
    return out


def cmd_generate(cfg: PipelineConfig, out: Path) -> list:
    for s in cfg.scene_seeds():
        save_scene(sample_scene(cfg.synth, s), out / scene_dirname(s))
        log.info("scene %d written", s)
    return []


def cmd_train(cfg: PipelineConfig, out: Path) -> list:
    data = _require(cfg.paths.dataset, "dataset")
    scenes = [load_scene(d) for d in scene_dirs(data)]
    # input paths are provenance and live in the manifest; keep the artifact location-independent
    (out / "config.json").write_text(replace(cfg, paths=PathsConfig()).to_json())

    def progress(epoch, rep):
        log.info("epoch %d: semantic %.6g keypoint %.6g multitask %.6g", epoch, rep.semantic_loss,
                 rep.keypoint_loss, rep.multitask_loss)

    res = train(scenes, cfg.loss, cfg.seed, cfg.model, run_dir=out, progress=progress)
    save_checkpoint(out / "model.bin", res.params)
    return [data]


def cmd_predict(cfg: PipelineConfig, out: Path) -> list:
    data = _require(cfg.paths.dataset, "dataset")
    ckpt = _require(cfg.paths.checkpoint, "checkpoint")
    params = load_checkpoint(ckpt, cfg.model)
    for sd in scene_dirs(data):
        scene = load_scene(sd)
        pred = predict_cloud(scene.cloud, params, cfg.cluster, cfg.predict.n_seeds, cfg.predict.min_points,
                             cfg.seed)
        save_prediction(pred, out / prediction_dirname(sd))
        log.info("%s: %d instances", sd.name, len(pred.instances))
    return [data, ckpt]


def cmd_evaluate(cfg: PipelineConfig, out: Path) -> list:
    data = _require(cfg.paths.dataset, "dataset")
    preds = _require(cfg.paths.predictions, "predictions")
    report = evaluate_dataset(data, preds, cfg.fmeasure, cfg.evaluate.threshold_frac)
    report.write(out)
    for m in report.per_affordance:
        log.info("%s: F=%s NMSE=%s PCK=%s", m.affordance, m.f_measure, m.nmse, m.pck)
    return [data, preds]


def cmd_interpret(cfg: PipelineConfig, out: Path) -> list:
    """Frames for every prediction dump, or for the ground truth when no predictions are set."""
    if cfg.paths.predictions is not None:
        src = _require(cfg.paths.predictions, "predictions")
        dirs = sorted((p for p in src.iterdir() if p.is_dir() and p.name.startswith("pred_")),
                      key=lambda p: (len(p.name), p.name))
    else:
        src = _require(cfg.paths.dataset, "dataset")
        dirs = scene_dirs(src)
    if not dirs:
        raise DataError(f"{src} holds no instance dumps")
    for d in dirs:
        instances, _ = read_instances(d / "instances.json")
        target = out / d.name
        target.mkdir(parents=True, exist_ok=True)
        write_frames(target / "frames.json", instances)
    return [src]


def cmd_simulate(cfg: PipelineConfig, out: Path) -> list:
    sim = cfg.simulate
    inputs = []
    if sim.predictor == "model":
        ckpt = _require(cfg.paths.checkpoint, "checkpoint")
        predictor = model_predictor(load_checkpoint(ckpt, cfg.model), cfg.cluster, cfg.predict.n_seeds,
                                    cfg.predict.min_points)
        inputs.append(ckpt)
    else:
        predictor = oracle_predictor
    corrupt = None
    if sim.wrap_width_factor != 1.0:
        corrupt = lambda preds: corrupt_wrap_width(preds, sim.wrap_width_factor)  # noqa: E731
    results = []
    for task in sim.tasks:
        seeds = [sim.first_seed + 1000 * task + i for i in range(sim.n_trials)]
        res = run_campaign(task, sim.n_trials, seeds, predictor, cfg.synth, cfg.sim, corrupt)
        log.info("task %d: %s", task, res.row())
        results.append(res)
    write_campaign(out, results)
    return inputs


def validate_dataset(path) -> int:
    """Check every scene directory; returns the scene count or raises :class:`DataError`."""
    dirs = scene_dirs(path)
    for sd in dirs:
        scene = load_scene(sd)
        scene.cloud.validate()
        if np.any(np.asarray(scene.labels) >= L.NUM_CLASSES):
            raise DataError(f"{sd}: label outside 0..{L.NUM_CLASSES - 1}")
        seen = set()
        for inst in scene.instances:
            idx = inst.point_indices
            if idx.size == 0 or idx.min() < 0 or idx.max() >= len(scene.cloud):
                raise DataError(f"{sd}: instance {inst.id} has out-of-range point indices")
            if np.any(scene.labels[idx] != inst.affordance):
                raise DataError(f"{sd}: instance {inst.id} covers points with another label")
            if not np.all(np.isfinite(inst.keypoints)):
                raise DataError(f"{sd}: instance {inst.id} has non-finite keypoints")
            if inst.id in seen:
                raise DataError(f"{sd}: duplicate instance id {inst.id}")
            seen.add(inst.id)
    return len(dirs)


def cmd_validate(cfg: PipelineConfig, args) -> None:
    if cfg.paths.dataset is not None:
        data = _require(cfg.paths.dataset, "dataset")
        n = validate_dataset(data)
        print(f"dataset {data}: {n} scenes valid")
        if cfg.paths.predictions is not None:
            preds = _require(cfg.paths.predictions, "predictions")
            for sd in scene_dirs(data):
                load_prediction(preds / prediction_dirname(sd), len(load_scene(sd).cloud))
            print(f"predictions {preds}: {n} dumps valid")
    if cfg.paths.checkpoint is not None:
        load_checkpoint(_require(cfg.paths.checkpoint, "checkpoint"), cfg.model)
        print(f"checkpoint {cfg.paths.checkpoint}: compatible with the model config")
    print(f"config valid (hash {cfg.hash()[:12]})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affkp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"affkp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--data", help="override paths.dataset")
        p.add_argument("--checkpoint", help="override paths.checkpoint")
        p.add_argument("--pred", help="override paths.predictions")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg.seed = args.seed
    for flag, key in (("data", "dataset"), ("checkpoint", "checkpoint"), ("pred", "predictions")):
        if getattr(args, flag) is not None:
            setattr(cfg.paths, key, getattr(args, flag))
    return cfg


def main(argv=None) -> int:
    level = os.environ.get("AFFKP_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "validate":
            cmd_validate(cfg, args)
            return 0
        started = _now()
        t0 = time.perf_counter()
        out = _out_dir(args, args.command)
        handler = globals()[f"cmd_{args.command}"]
        inputs = handler(cfg, out)
        write_manifest(out, cfg, args.command, inputs, started)
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
        return 0
    except AffkpError as exc:
        print(f"affkp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001  internal failures map to exit 5
        print(f"affkp {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
