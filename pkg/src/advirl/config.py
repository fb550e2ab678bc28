"""Experiment configuration files.

A config is a JSON document with the sections ``paths``, ``field``, ``fit``,
``rig``, ``classifier``, ``attack`` and ``ppo`` plus a top-level ``seed``.
Every section is optional and every default can be overridden.  Loading is
strict: unknown keys, missing paths and labels outside the classifier's
label space are rejected before any computation starts.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from .agent import AgentError, PpoConfig
from .classifier import Classifier, ClassifierError, build_classifier
from .env import AttackConfig, EnvError
from .field import FieldError, FieldGeometry
from .scene import CameraRig, orbit_rig, parse_transforms

PathLike = Union[str, Path]


class ExperimentConfigError(ValueError):
    """Raised for any invalid configuration; the message is a single actionable line."""


PATH_KEYS = {"images_dir", "masks_dir", "transforms", "output_dir", "snapshot"}
FIT_KEYS = {"steps", "learning_rate"}
ORBIT_KEYS = {"kind", "n_views", "radius", "elevation", "resolution", "focal", "target"}
TOP_KEYS = {"seed", "paths", "field", "fit", "rig", "classifier", "attack", "ppo"}

DEFAULT_ORBIT = {"kind": "orbit", "n_views": 20, "radius": 1.5, "elevation": 0.3,
                 "resolution": 64, "focal": 88.0}


def _check_keys(section: str, data: Mapping, allowed) -> None:
    if not isinstance(data, Mapping):
        raise ExperimentConfigError(f"config section '{section}' must be an object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ExperimentConfigError(
            f"unknown key(s) {unknown} in '{section}'; allowed: {sorted(allowed)}"
        )


@dataclass
class ExperimentConfig:
    seed: int = 0
    paths: Dict[str, Path] = field(default_factory=dict)
    geometry: FieldGeometry = field(default_factory=FieldGeometry)
    fit_steps: int = 300
    fit_learning_rate: float = 1000.0
    rig_spec: Dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_ORBIT))
    classifier_spec: Dict[str, Any] = field(default_factory=dict)
    attack: Optional[AttackConfig] = None
    ppo: PpoConfig = field(default_factory=PpoConfig)
    source: Optional[Path] = None

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.get("output_dir", "out"))

    def build_rig(self) -> CameraRig:
        spec = self.rig_spec
        if spec.get("kind") == "transforms":
            return parse_transforms(self.paths["transforms"])
        return orbit_rig(spec["n_views"], spec["radius"], spec.get("elevation", 0.0),
                         target=spec.get("target", (0.5, 0.5, 0.5)),
                         resolution=spec.get("resolution", 64), focal=spec.get("focal", 88.0))

    def build_classifier(self) -> Classifier:
        return build_classifier(self.classifier_spec)


def parse_config(doc: Mapping, base_dir: Optional[Path] = None, seed: Optional[int] = None,
                 output_dir: Optional[PathLike] = None, views: Optional[int] = None,
                 require_paths: bool = True) -> ExperimentConfig:
    """Validate a config mapping and apply command-line overrides."""
    doc = copy.deepcopy(dict(doc))
    _check_keys("top level", doc, TOP_KEYS)
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()

    paths_in = doc.get("paths", {})
    _check_keys("paths", paths_in, PATH_KEYS)
    paths = {}
    for key, value in paths_in.items():
        p = Path(value)
        if not p.is_absolute():
            p = base_dir / p
        paths[key] = p
    if output_dir is not None:
        paths["output_dir"] = Path(output_dir)
    if require_paths:
        for key, p in paths.items():
            if key != "output_dir" and not p.exists():
                raise ExperimentConfigError(f"paths.{key} does not exist: {p}")

    field_in = doc.get("field", {})
    _check_keys("field", field_in, {f.name for f in fields(FieldGeometry)})
    try:
        geometry = FieldGeometry(**field_in)
    except (FieldError, TypeError) as exc:
        raise ExperimentConfigError(f"field: {exc}") from exc

    fit_in = doc.get("fit", {})
    _check_keys("fit", fit_in, FIT_KEYS)

    rig_in = dict(doc.get("rig", DEFAULT_ORBIT))
    kind = rig_in.get("kind", "orbit")
    if kind == "orbit":
        _check_keys("rig", rig_in, ORBIT_KEYS)
        rig_spec = {**DEFAULT_ORBIT, **rig_in}
        if views is not None:
            rig_spec["n_views"] = int(views)
    elif kind == "transforms":
        _check_keys("rig", rig_in, {"kind"})
        if "transforms" not in paths:
            raise ExperimentConfigError("rig.kind 'transforms' needs paths.transforms")
        rig_spec = rig_in
    else:
        raise ExperimentConfigError(f"rig.kind must be 'orbit' or 'transforms', got {kind!r}")

    classifier_spec = dict(doc.get("classifier", {}))
    classifier_labels = None
    if classifier_spec:
        weights = classifier_spec.get("weights")
        if weights is not None and not Path(weights).is_absolute():
            classifier_spec["weights"] = str(base_dir / weights)
        if require_paths or classifier_spec.get("kind") != "linear":
            try:
                classifier_labels = build_classifier(classifier_spec).labels
            except ClassifierError as exc:
                raise ExperimentConfigError(f"classifier: {exc}") from exc

    attack = None
    if "attack" in doc:
        attack_in = dict(doc["attack"])
        if views is not None:
            attack_in["num_views"] = int(views)
        elif rig_spec.get("kind") == "orbit" and "num_views" not in attack_in:
            attack_in["num_views"] = rig_spec["n_views"]
        try:
            attack = AttackConfig.from_mapping(attack_in)
        except EnvError as exc:
            raise ExperimentConfigError(f"attack: {exc}") from exc
        if rig_spec.get("kind") == "orbit" and attack.num_views != rig_spec["n_views"]:
            raise ExperimentConfigError(
                f"attack.num_views={attack.num_views} but rig.n_views={rig_spec['n_views']}"
            )
        if classifier_labels is not None:
            for label in (attack.true_label, attack.target_label):
                if label is not None and label not in classifier_labels:
                    raise ExperimentConfigError(
                        f"attack label {label!r} is not in the classifier labels "
                        f"{list(classifier_labels.labels)}"
                    )

    ppo_in = dict(doc.get("ppo", {}))
    if seed is not None:
        doc["seed"] = seed
    top_seed = int(doc.get("seed", 0))
    ppo_in.setdefault("seed", top_seed)
    if seed is not None:
        ppo_in["seed"] = seed
    try:
        ppo = PpoConfig.from_mapping(ppo_in)
    except (AgentError, TypeError) as exc:
        raise ExperimentConfigError(f"ppo: {exc}") from exc

    return ExperimentConfig(
        seed=top_seed,
        paths=paths,
        geometry=geometry,
        fit_steps=int(fit_in.get("steps", 300)),
        fit_learning_rate=float(fit_in.get("learning_rate", 1000.0)),
        rig_spec=rig_spec,
        classifier_spec=classifier_spec,
        attack=attack,
        ppo=ppo,
    )


def load_config(path: PathLike, **overrides) -> ExperimentConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except OSError as exc:
        raise ExperimentConfigError(f"cannot read config {p}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ExperimentConfigError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ExperimentConfigError(f"config {p} must contain a JSON object")
    cfg = parse_config(doc, base_dir=p.parent, **overrides)
    cfg.source = p
    return cfg
