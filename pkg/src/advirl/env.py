"""Adversarial environment: perturb field parameters, render, classify, reward.

One call to :meth:`AdvEnvironment.step` applies a parameter delta, renders
all views, classifies them, builds the per-label summary table and scores
the result.  Parameters accumulate within an episode and are restored to the
base field on :meth:`AdvEnvironment.reset`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .classifier import Classifier, PredictionSet, classify_batch, filter_views
from .field import FieldGeometry, RadianceField, RigRenderer, apply_delta, fit, param_count
from .imaging import Image, Mask, apply_mask, downsample, mse
from .scene import CameraRig

log = logging.getLogger(__name__)

TARGETED = "targeted"
UNTARGETED = "untargeted"


class EnvError(ValueError):
    pass


class ConfigError(EnvError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    mode: str = TARGETED
    true_label: str = ""
    target_label: Optional[str] = None
    theta0: float = 100.0
    theta1: float = -1.0
    theta2: float = 0.00005
    theta3: float = 0.0
    num_views: int = 20
    action_bound: float = 0.05
    episode_length: int = 8
    observation_downsample: int = 8

    def __post_init__(self):
        if self.mode not in (TARGETED, UNTARGETED):
            raise ConfigError(f"mode must be 'targeted' or 'untargeted', got {self.mode!r}")
        if not self.true_label:
            raise ConfigError("true_label is required")
        if self.mode == TARGETED:
            if not self.target_label:
                raise ConfigError("targeted mode requires target_label")
            if self.target_label == self.true_label:
                raise ConfigError("target_label must differ from true_label")
        if int(self.num_views) < 1:
            raise ConfigError("num_views must be positive")
        if not self.action_bound > 0:
            raise ConfigError("action_bound must be positive")
        if int(self.episode_length) < 1:
            raise ConfigError("episode_length must be positive")
        if int(self.observation_downsample) < 1:
            raise ConfigError("observation_downsample must be positive")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown attack config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class ClassSummary:
    avg_confidence: float
    count: int


@dataclass
class StepResult:
    observation: np.ndarray
    adversarial_images: List[Image]
    summary: Dict[str, ClassSummary]
    reward: float
    done: bool
    mse: float = 0.0
    success: bool = False
    predictions: List[PredictionSet] = field(default_factory=list)


def aggregate_predictions(preds: Sequence[PredictionSet]) -> Dict[str, ClassSummary]:
    """Per top-1 label: running-average confidence and view count."""
    table: Dict[str, list] = {}
    for ps in preds:
        if ps is None or len(ps) == 0:
            raise EnvError("every view needs a non-empty prediction set")
        label, conf = ps[0].label, ps[0].confidence
        if label not in table:
            table[label] = [conf, 1]
        else:
            total = table[label][0] * table[label][1] + conf
            table[label][1] += 1
            table[label][0] = total / table[label][1]
    return {k: ClassSummary(v[0], v[1]) for k, v in table.items()}


def _summary_conf(summary: Mapping[str, ClassSummary], label: Optional[str]) -> float:
    entry = summary.get(label) if label is not None else None
    return entry.avg_confidence if entry is not None else 0.0


def _summary_count(summary: Mapping[str, ClassSummary], label: Optional[str]) -> int:
    entry = summary.get(label) if label is not None else None
    return entry.count if entry is not None else 0


def mean_mse(x: Sequence[Image], x_adv: Sequence[Image]) -> float:
    if len(x) != len(x_adv):
        raise EnvError(f"{len(x)} reference images but {len(x_adv)} adversarial images")
    if not x:
        return 0.0
    return float(np.mean([mse(a, b) for a, b in zip(x, x_adv)]))


def reward_from_terms(target: float, true: float, image_mse: float, count_fraction: float,
                      cfg: AttackConfig) -> float:
    """Reward from pre-computed terms; ``count_fraction`` is the bonus fraction for the mode."""
    if cfg.mode == TARGETED:
        return (cfg.theta0 * target + cfg.theta1 * true - cfg.theta2 * image_mse
                + cfg.theta3 * count_fraction)
    return cfg.theta1 * true - cfg.theta2 * image_mse + cfg.theta3 * count_fraction


def reward(summary: Mapping[str, ClassSummary], x: Sequence[Image], x_adv: Sequence[Image],
           cfg: AttackConfig) -> float:
    """Targeted: th0*Target + th1*True - th2*MSE + th3*count(target)/N.

    Untargeted: th1*True - th2*MSE + th3*(1 - count(true)/N).  Labels absent
    from the summary contribute zero confidence.
    """
    return _score(summary, mean_mse(x, x_adv), cfg)


def _score(summary: Mapping[str, ClassSummary], image_mse: float, cfg: AttackConfig) -> float:
    if cfg.mode == TARGETED:
        frac = _summary_count(summary, cfg.target_label) / cfg.num_views
    else:
        frac = 1.0 - _summary_count(summary, cfg.true_label) / cfg.num_views
    return reward_from_terms(_summary_conf(summary, cfg.target_label),
                             _summary_conf(summary, cfg.true_label), image_mse, frac, cfg)


def encode_observation(images: Sequence[Image], factor: int = 1) -> np.ndarray:
    """Downsample each view and concatenate row-major rgb values view by view."""
    if not images:
        raise EnvError("cannot encode an empty view list")
    return np.concatenate([downsample(img, factor).pixels.ravel() for img in images])


def is_success(summary: Mapping[str, ClassSummary], cfg: AttackConfig) -> bool:
    if cfg.mode == TARGETED:
        return _summary_count(summary, cfg.target_label) == cfg.num_views
    return _summary_count(summary, cfg.true_label) == 0


class AdvEnvironment:
    """Single-owner stateful attack environment over a fixed camera rig."""

    def __init__(self, base: RadianceField, rig: CameraRig, classifier: Classifier,
                 config: AttackConfig, baseline_images: Optional[Sequence[Image]] = None):
        if config.num_views != len(rig):
            raise ConfigError(f"config expects {config.num_views} views, rig has {len(rig)}")
        for label in (config.true_label, config.target_label):
            if label is not None and label not in classifier.labels:
                raise ConfigError(f"label {label!r} is not in the classifier label space")
        w, h = rig.resolution
        f = config.observation_downsample
        if w % f or h % f:
            raise ConfigError(f"observation_downsample {f} does not divide {w}x{h}")
        self.base = base
        self.rig = rig
        self.classifier = classifier
        self.config = config
        self.renderer = RigRenderer(base.geometry, rig)
        if baseline_images is None:
            baseline_images = self.renderer.render(base.params)
        if len(baseline_images) != len(rig):
            raise ConfigError("one baseline image per view is required")
        self.baseline_images = list(baseline_images)
        self.baseline_predictions = classify_batch(classifier, self.baseline_images)
        self.baseline_summary = aggregate_predictions(self.baseline_predictions)
        self.params = base.params.copy()
        self.steps = 0

    @property
    def action_dim(self) -> int:
        return param_count(self.base.geometry)

    @property
    def observation_dim(self) -> int:
        w, h = self.rig.resolution
        f = self.config.observation_downsample
        return len(self.rig) * 3 * (w // f) * (h // f)

    def current_field(self) -> RadianceField:
        return self.base.with_params(self.params)

    def reset(self) -> np.ndarray:
        self.params = self.base.params.copy()
        self.steps = 0
        return encode_observation(self.baseline_images, self.config.observation_downsample)

    def evaluate_params(self, params) -> StepResult:
        """Render, classify and score a parameter vector without touching episode state."""
        cfg = self.config
        x_adv = self.renderer.render(params)
        preds = classify_batch(self.classifier, x_adv)
        summary = aggregate_predictions(preds)
        image_mse = mean_mse(self.baseline_images, x_adv)
        r = _score(summary, image_mse, cfg)
        obs = encode_observation(x_adv, cfg.observation_downsample)
        return StepResult(obs, x_adv, summary, r, False, image_mse,
                          is_success(summary, cfg), preds)

    def step(self, action) -> StepResult:
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (self.action_dim,):
            raise EnvError(f"action has shape {a.shape}, expected ({self.action_dim},)")
        new_params = apply_delta(self.params, a, self.config.action_bound)
        result = self.evaluate_params(new_params)
        self.params = new_params
        self.steps += 1
        result.done = result.success or self.steps >= self.config.episode_length
        return result


def prepare_scene(images: Sequence[Image], masks: Optional[Sequence[Mask]], rig: CameraRig,
                  classifier: Classifier, true_label: str, geometry: FieldGeometry,
                  steps: int = 300, learning_rate: float = 1000.0, seed: int = 0,
                  loss_history: Optional[list] = None
                  ) -> Tuple[RadianceField, List[Image], List[int]]:
    """Mask, filter to correctly classified views, then fit the field on what remains.

    Returns the fitted field, the re-rendered baseline images of the kept
    views, and the kept view indices.
    """
    if len(images) != len(rig):
        raise EnvError(f"{len(images)} images but {len(rig)} cameras")
    if masks is not None:
        if len(masks) != len(images):
            raise EnvError(f"{len(masks)} masks for {len(images)} images")
        images = [apply_mask(img, m, geometry.background) for img, m in zip(images, masks)]
    kept = filter_views(classifier, images, true_label)
    if not kept:
        raise EnvError(
            f"no view is classified as {true_label!r}; nothing to attack "
            "(check the label, the masks or the classifier)"
        )
    dropped = sorted(set(range(len(images))) - set(kept))
    if dropped:
        log.info("dropping %d misclassified views: %s", len(dropped), dropped)
    sub_rig = rig.subset(kept)
    field_ = fit(geometry, [images[i] for i in kept], sub_rig, steps=steps,
                 learning_rate=learning_rate, seed=seed, loss_history=loss_history)
    baseline = RigRenderer(geometry, sub_rig).render(field_.params)
    return field_, baseline, kept
