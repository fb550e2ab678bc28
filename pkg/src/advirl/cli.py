"""Command-line entry point: ``advirl {fit,attack,render,evaluate,demo}``.

Output layout under ``--out``::

    snapshots/   base.avrl, adversarial.avrl, policy.avpl
    renders/     view_000.png ...
    reports/     <name>.txt, <name>_views.csv, <name>_classes.csv
    history.csv  per-step reward trajectory of the attack
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .agent import save_policy, train
from .classifier import ClassifierError
from .config import ExperimentConfig, ExperimentConfigError, load_config, parse_config
from .env import AdvEnvironment, EnvError, prepare_scene
from .field import FieldError, fixture_field, load_snapshot, render_rig, save_snapshot
from .imaging import ImageError, chroma_mask, load_image, load_mask, save_image, save_mask
from .report import MetricsReport, evaluate_field, write_history
from .scene import SceneError, orbit_rig, parse_transforms, write_transforms

log = logging.getLogger("advirl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# Attack profile used by the demo: single-step episodes turn each environment
# step into an independent perturbation of the base field, which is what lets
# PPO make progress inside a 1,000-step budget at this scale.
DEMO_CONFIG = {
    "seed": 0,
    "paths": {
        "images_dir": "inputs/images",
        "masks_dir": "inputs/masks",
        "transforms": "inputs/transforms.json",
    },
    "field": {"resolution": 16, "samples_per_ray": 32, "background": [0.0, 0.0, 0.0]},
    "fit": {"steps": 200, "learning_rate": 3000.0},
    "rig": {"kind": "transforms"},
    "classifier": {
        "kind": "histogram",
        "labels": ["red", "blue"],
        "prototypes": {"red": [1.0, 0.0, 0.0], "blue": [0.0, 0.0, 1.0]},
        "temperature": 0.1,
    },
    "attack": {
        "mode": "targeted",
        "true_label": "red",
        "target_label": "blue",
        "num_views": 8,
        "action_bound": 8.0,
        "episode_length": 1,
        "observation_downsample": 8,
    },
    "ppo": {
        "n_steps": 2,
        "batch_size": 2,
        "max_grad_norm": 1.0,
        "learning_rate": 10.0,
        "total_timesteps": 1000,
    },
}

DEMO_RIG = {"n_views": 8, "radius": 1.5, "elevation": 0.3, "resolution": 64, "focal": 88.0}


def _out(cfg: ExperimentConfig, sub: str = "") -> Path:
    d = cfg.output_dir / sub if sub else cfg.output_dir
    d.mkdir(parents=True, exist_ok=True)
    return d


def _frame_paths(transforms: Path) -> List[str]:
    doc = json.loads(transforms.read_text())
    return [fr["file_path"] for fr in doc["frames"]]


def _resolve_image(cfg: ExperimentConfig, frame_path: str, directory_key: str,
                   base: Path) -> Path:
    name = Path(frame_path)
    if directory_key in cfg.paths:
        candidate = cfg.paths[directory_key] / name.name
    else:
        candidate = base / name
    if candidate.suffix:
        return candidate
    for ext in (".png", ".ppm"):
        if candidate.with_suffix(ext).exists():
            return candidate.with_suffix(ext)
    return candidate.with_suffix(".png")


def _require_attack(cfg: ExperimentConfig):
    if cfg.attack is None:
        raise ExperimentConfigError("config has no 'attack' section")
    if not cfg.classifier_spec:
        raise ExperimentConfigError("config has no 'classifier' section")
    return cfg.attack


def _snapshot_path(cfg: ExperimentConfig, default: str) -> Path:
    if "snapshot" in cfg.paths:
        return cfg.paths["snapshot"]
    p = cfg.output_dir / "snapshots" / default
    if not p.exists():
        raise ExperimentConfigError(f"no snapshot given and {p} does not exist")
    return p


def cmd_fit(cfg: ExperimentConfig) -> Dict:
    attack = _require_attack(cfg)
    if "transforms" not in cfg.paths:
        raise ExperimentConfigError("fit needs paths.transforms")
    transforms = cfg.paths["transforms"]
    rig = parse_transforms(transforms)
    frames = _frame_paths(transforms)
    images = [load_image(_resolve_image(cfg, fp, "images_dir", transforms.parent))
              for fp in frames]
    masks = None
    if "masks_dir" in cfg.paths:
        masks = [load_mask(_resolve_image(cfg, fp, "masks_dir", transforms.parent),
                           label=attack.true_label) for fp in frames]
    model = cfg.build_classifier()
    losses: List[float] = []
    t0 = time.perf_counter()
    field, _, kept = prepare_scene(images, masks, rig, model, attack.true_label, cfg.geometry,
                                   steps=cfg.fit_steps, learning_rate=cfg.fit_learning_rate,
                                   seed=cfg.seed, loss_history=losses)
    elapsed = time.perf_counter() - t0
    snap = _out(cfg, "snapshots") / "base.avrl"
    save_snapshot(field, snap)
    write_transforms(rig.subset(kept), cfg.output_dir / "transforms_kept.json",
                     [frames[i] for i in kept])
    dropped = sorted(set(range(len(images))) - set(kept))
    final = losses[-1] if losses else float("nan")
    lines = [
        f"views: {len(images)} total, {len(kept)} kept, {len(dropped)} dropped",
        f"kept: {kept}",
        f"dropped: {dropped}",
        f"fit steps: {cfg.fit_steps}, learning rate: {cfg.fit_learning_rate}",
        f"initial photometric mse: {losses[0] if losses else float('nan'):.6g}",
        f"final photometric mse: {final:.6g}",
    ]
    (_out(cfg, "reports") / "fit.txt").write_text("\n".join(lines) + "\n")
    log.info("fit done in %.1fs: final photometric mse %.4g, kept %d/%d views",
             elapsed, final, len(kept), len(images))
    return {"snapshot": snap, "kept": kept, "dropped": dropped, "losses": losses, "field": field}


def _attack_rig(cfg: ExperimentConfig):
    if cfg.rig_spec.get("kind") == "transforms":
        kept = cfg.output_dir / "transforms_kept.json"
        return parse_transforms(kept if kept.exists() else cfg.paths["transforms"])
    return cfg.build_rig()


def cmd_attack(cfg: ExperimentConfig, progress=None) -> Dict:
    attack = _require_attack(cfg)
    base = load_snapshot(_snapshot_path(cfg, "base.avrl"))
    rig = _attack_rig(cfg)
    model = cfg.build_classifier()
    env = AdvEnvironment(base, rig, model, attack)
    baseline = evaluate_field(base, rig, model)
    baseline.write(_out(cfg, "reports"), "baseline")
    log.info("baseline: %s", "; ".join(baseline.counts_lines()))

    t0 = time.perf_counter()
    result = train(env, cfg.ppo, progress=progress)
    log.info("attack finished %d steps in %.1fs, best reward %.4f at step %d",
             len(result.history), time.perf_counter() - t0, result.best_reward, result.best_step)

    snaps = _out(cfg, "snapshots")
    adv_path = snaps / "adversarial.avrl"
    save_snapshot(base.with_params(result.best_params), adv_path)
    save_policy(result.policy, snaps / "policy.avpl")
    write_history(result.history, cfg.output_dir / "history.csv")

    adv = load_snapshot(adv_path)
    renders = _out(cfg, "renders")
    for i, img in enumerate(render_rig(adv, rig)):
        save_image(img, renders / f"view_{i:03d}.png")
    final = result.history[-1]["reward"] if result.history else float("nan")
    report = evaluate_field(adv, rig, model, best_reward=result.best_reward, final_reward=final)
    report.write(_out(cfg, "reports"), "attack")
    log.info("adversarial: %s", "; ".join(report.counts_lines()))
    return {"report": report, "baseline": baseline, "train": result, "snapshot": adv_path}


def cmd_render(cfg: ExperimentConfig) -> List[Path]:
    field = load_snapshot(_snapshot_path(cfg, "adversarial.avrl"))
    rig = _attack_rig(cfg) if cfg.rig_spec.get("kind") == "transforms" else cfg.build_rig()
    renders = _out(cfg, "renders")
    paths = []
    for i, img in enumerate(render_rig(field, rig)):
        p = renders / f"view_{i:03d}.png"
        save_image(img, p)
        paths.append(p)
    return paths


def cmd_evaluate(cfg: ExperimentConfig, name: str = "evaluate") -> MetricsReport:
    if not cfg.classifier_spec:
        raise ExperimentConfigError("config has no 'classifier' section")
    field = load_snapshot(_snapshot_path(cfg, "adversarial.avrl"))
    rig = _attack_rig(cfg)
    report = evaluate_field(field, rig, cfg.build_classifier())
    report.write(_out(cfg, "reports"), name)
    return report


def write_demo_inputs(out: Path, seed: int = 0, views: Optional[int] = None) -> Path:
    """Render the red-sphere fixture from an orbit rig and write images, masks and poses."""
    cfg = parse_config(DEMO_CONFIG, base_dir=out, require_paths=False)
    geom = cfg.geometry
    truth = fixture_field("sphere", geom)
    rig_spec = dict(DEMO_RIG)
    if views is not None:
        rig_spec["n_views"] = int(views)
    rig = orbit_rig(**rig_spec)
    images_dir = out / "inputs" / "images"
    masks_dir = out / "inputs" / "masks"
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(render_rig(truth, rig)):
        name = f"view_{i:03d}.png"
        save_image(img, images_dir / name)
        save_mask(chroma_mask(img, geom.background), masks_dir / name)
        names.append(f"images/{name}")
    write_transforms(rig, out / "inputs" / "transforms.json", names)
    doc = json.loads(json.dumps(DEMO_CONFIG))
    doc["seed"] = seed
    doc["attack"]["num_views"] = len(rig)
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(doc, indent=2))
    return cfg_path


def cmd_demo(seed: int = 0, out: Path = Path("demo_out"), views: Optional[int] = None,
             overrides: Optional[dict] = None, progress=None) -> Dict:
    """Fixture -> synthetic views -> fit -> targeted attack -> evaluation, under one seed."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = write_demo_inputs(out, seed, views)
    if overrides:
        doc = json.loads(cfg_path.read_text())
        for section, values in overrides.items():
            if isinstance(values, dict):
                doc.setdefault(section, {}).update(values)
            else:
                doc[section] = values
        cfg_path.write_text(json.dumps(doc, indent=2))
    cfg = load_config(cfg_path, seed=seed, output_dir=out)
    fit_result = cmd_fit(cfg)
    attack_result = cmd_attack(cfg, progress=progress)
    evaluation = cmd_evaluate(cfg)
    return {"config": cfg, "fit": fit_result, "attack": attack_result, "evaluate": evaluation}


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # subcommands repeat the global flags without defaults so they don't clobber earlier values
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", type=Path, default=d(None), help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    parser.add_argument("--out", type=Path, default=d(None), help="output directory")
    parser.add_argument("--views", type=int, default=d(None), help="override the number of views")
    parser.add_argument("--quiet", action="store_true", default=d(False),
                        help="only print warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advirl",
                                     description="Black-box adversarial attacks on radiance fields.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "fit": "fit a field to masked, posed images",
        "attack": "run the PPO attack on a fitted snapshot",
        "render": "render a snapshot from the configured rig",
        "evaluate": "classify renders of a snapshot",
        "demo": "end-to-end run on the red-sphere fixture",
    }
    for name, text in helps.items():
        _global_options(sub.add_parser(name, help=text), suppress=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "demo":
            seed = 0 if args.seed is None else args.seed
            result = cmd_demo(seed, args.out or Path("demo_out"), views=args.views)
            if not args.quiet:
                print(result["evaluate"].to_text(), end="")
            return EXIT_OK
        if args.config is None:
            raise ExperimentConfigError(f"'{args.command}' needs --config <path>")
        cfg = load_config(args.config, seed=args.seed, output_dir=args.out, views=args.views)
        if args.out is None and "output_dir" not in cfg.paths:
            cfg.paths["output_dir"] = args.config.parent / "out"
        if args.command == "fit":
            cmd_fit(cfg)
        elif args.command == "attack":
            report = cmd_attack(cfg)["report"]
            if not args.quiet:
                print(report.to_text(), end="")
        elif args.command == "render":
            for p in cmd_render(cfg):
                log.info("wrote %s", p)
        elif args.command == "evaluate":
            report = cmd_evaluate(cfg)
            if not args.quiet:
                print(report.to_text(), end="")
        return EXIT_OK
    except ExperimentConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EnvError, FieldError, SceneError, ImageError, ClassifierError, OSError,
            RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
