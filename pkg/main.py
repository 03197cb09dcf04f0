"""
Command-line entry point for the AlignCap desk-scale training stack.

Subcommands:
- god: rank detected classes and build (or select) GOD candidate views.
- grad-check: finite-difference audit of every trainable parameter group.
- train: train on the planted synthetic dataset; writes checkpoint, metrics log and dataset.
- eval: mean loss components and tag recall@k of a checkpoint on a dataset file.
- demo-caption: greedy caption and top-k tags for one region of a scene file.

stdout carries one JSON document per invocation. Logging goes to stderr at the
level named by ALIGNCAP_LOG (error, info or debug; default error) and, for
train, to 'aligncap.log' in the output directory at DEBUG level.

Exit codes: 0 success, 1 check or validation failure, 2 usage error.
"""
import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from config_manager import ConfigManager
from engine import TrainingEngine
from models import AlignCapError, BBox, GodConfig, DiscrepancyMode, SceneInput, TrainingConfig
from modules.frozen_encoders import FrozenVisionEncoder
from modules.god import build_candidates, rank_classes, select_inference_view
from modules.gradcheck import TRAINABLE_MODULES, audit
from modules.tensor import Rng, set_debug_mode
from persistence import EmptyDataError, load_dataset, load_detections, load_scene

logger = logging.getLogger("aligncap")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
LOG_FILE_NAME = "aligncap.log"


class UsageError(Exception):
    pass


def setup_logging(log_dir: Optional[str] = None):
    """Console handler from ALIGNCAP_LOG; detailed file handler when `log_dir` is given."""
    raw = os.environ.get("ALIGNCAP_LOG", "error").strip().lower()
    level = LOG_LEVELS.get(raw, logging.ERROR)

    logger.setLevel(logging.DEBUG)
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)
    logger.propagate = False

    ch = logging.StreamHandler(sys.stderr)
    ch.setLevel(level)
    ch.setFormatter(logging.Formatter('%(levelname)s - %(message)s'))
    logger.addHandler(ch)

    if log_dir:
        fh = logging.FileHandler(os.path.join(log_dir, LOG_FILE_NAME), mode='w')
        fh.setLevel(logging.DEBUG)
        fh.setFormatter(logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s'))
        logger.addHandler(fh)

    if raw not in LOG_LEVELS:
        logger.warning(f"Unknown ALIGNCAP_LOG value '{raw}'; using 'error'")
    set_debug_mode(raw == "debug")


def emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    sys.stdout.flush()


def _require_file(path: str, flag: str):
    if not os.path.isfile(path):
        raise UsageError(f"{flag}: file not found: {path}")


def load_config(args) -> TrainingConfig:
    if args.config:
        _require_file(args.config, "--config")
        return ConfigManager(args.config).get_training_config(seed=args.seed)
    config = TrainingConfig()
    return config.with_overrides(seed=args.seed) if args.seed is not None else config


def _synthetic_scene(config: TrainingConfig) -> SceneInput:
    grid = Rng(config.seed).child("god", "scene").normal(size=(config.grid_size, config.grid_size, config.channels))
    return SceneInput(grid, provenance=f"seed:{config.seed}")


# --- subcommands --------------------------------------------------------------

def cmd_god(args) -> int:
    config = load_config(args)
    _require_file(args.detections, "--detections")
    target = BBox.parse(args.target)
    detections = load_detections(args.detections)
    mode = DiscrepancyMode(args.mode) if args.mode else config.god.discrepancy_mode
    god = GodConfig(k=args.k if args.k is not None else config.god.k,
                    j=args.j if args.j is not None else config.god.j, discrepancy_mode=mode)
    ranked = rank_classes(detections, god.k) if detections else []
    candidates = build_candidates(target, detections, god, Rng(config.seed).child("god"))

    if args.select == "sample":
        emit({"ranked_classes": ranked, "views": [c.to_dict() for c in candidates]})
        return EXIT_OK

    if args.scene:
        _require_file(args.scene, "--scene")
        scene = load_scene(args.scene)
    else:
        scene = _synthetic_scene(config)
    encoder = FrozenVisionEncoder(scene.grid_size, scene.channels, config.d_v, config.seed)
    selected = select_inference_view(candidates[1:], target, scene, encoder, mode)
    emit({"ranked_classes": ranked, "mode": mode.value, "selected": selected.to_dict()})
    return EXIT_OK


def cmd_grad_check(args) -> int:
    config = load_config(args)
    results = audit(config, module=args.module, corrupt_factor=args.corrupt_grad)
    passed = all(r.passed for r in results)
    emit({
        "module": args.module or "all",
        "tolerance": 1e-4,
        "groups": [r.to_dict() for r in results],
        "failed": [r.name for r in results if not r.passed],
        "passed": passed,
    })
    return EXIT_OK if passed else EXIT_FAILURE


def cmd_train(args) -> int:
    config = load_config(args)
    os.makedirs(args.out, exist_ok=True)
    setup_logging(args.out)
    logger.info(f"Training with config {config.to_dict()}")
    engine = TrainingEngine(config, out_dir=args.out)
    summary = engine.train()
    first, last = summary.records[0], summary.records[-1]
    emit({
        "steps": config.steps,
        "initial_total": first.total,
        "final_total": last.total,
        "evaluation": summary.evaluation.to_dict(),
        "checkpoint": summary.checkpoint_path,
        "metrics": summary.metrics_path,
    })
    return EXIT_OK


def _engine_from_checkpoint(args) -> TrainingEngine:
    _require_file(args.checkpoint, "--checkpoint")
    requested = load_config(args) if args.config else None
    return TrainingEngine.from_checkpoint(args.checkpoint, requested)


def cmd_eval(args) -> int:
    _require_file(args.data, "--data")
    engine = _engine_from_checkpoint(args)
    dataset = load_dataset(args.data)
    emit(engine.evaluate(dataset).to_dict())
    return EXIT_OK


def cmd_demo_caption(args) -> int:
    _require_file(args.scene, "--scene")
    engine = _engine_from_checkpoint(args)
    scene = load_scene(args.scene)
    target = BBox.parse(args.target)
    detections = []
    if args.detections:
        _require_file(args.detections, "--detections")
        detections = load_detections(args.detections)
    emit(engine.caption(scene, target, detections))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aligncap", description="AlignCap desk-scale training stack")
    parser.add_argument("--seed", type=int, default=None, help="Override [training] seed")
    parser.add_argument("--config", default=None, help="TrainingConfig INI file")
    sub = parser.add_subparsers(dest="command", required=True)

    god = sub.add_parser("god", help="Build GOD candidate views for a target region")
    god.add_argument("--detections", required=True, help="JSON array of {class, bbox, score}")
    god.add_argument("--target", required=True, help='Target box "x0,y0,x1,y1"')
    god.add_argument("--k", type=int, default=None, help="Number of top classes")
    god.add_argument("--j", type=int, default=None, help="Number of views including the target")
    god.add_argument("--select", choices=("sample", "inference"), default="sample")
    god.add_argument("--mode", choices=[m.value for m in DiscrepancyMode], default=None)
    god.add_argument("--scene", default=None, help="Scene file used by the feature-cosine discrepancy")
    god.set_defaults(handler=cmd_god)

    grad = sub.add_parser("grad-check", help="Finite-difference gradient audit at minimized dims")
    grad.add_argument("--module", choices=TRAINABLE_MODULES, default=None)
    grad.add_argument("--corrupt-grad", type=float, default=None, help=argparse.SUPPRESS)
    grad.set_defaults(handler=cmd_grad_check)

    train = sub.add_parser("train", help="Train on the planted synthetic dataset")
    train.add_argument("--out", required=True, help="Output directory")
    train.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="Evaluate a checkpoint on a dataset file")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.set_defaults(handler=cmd_eval)

    demo = sub.add_parser("demo-caption", help="Greedy caption for one region")
    demo.add_argument("--checkpoint", required=True)
    demo.add_argument("--scene", required=True)
    demo.add_argument("--target", required=True)
    demo.add_argument("--detections", default=None)
    demo.set_defaults(handler=cmd_demo_caption)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging()
    try:
        return args.handler(args)
    except (UsageError, EmptyDataError) as e:
        logger.debug(f"Usage error in {args.command}: {e}")
        sys.stderr.write(f"aligncap {args.command}: error: {e}\n")
        return EXIT_USAGE
    except AlignCapError as e:
        logger.debug(f"{args.command} failed: {e}", exc_info=True)
        sys.stderr.write(f"aligncap {args.command}: {type(e).__name__}: {e}\n")
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
