"""Black-box classifier boundary and the built-in toy victim models.

A classifier is anything with a ``labels`` attribute and a
``classify(image) -> PredictionSet`` method.  Nothing else about the model
is visible to the attack: no logits, no gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax

from .imaging import Image

PathLike = Union[str, Path]


class ClassifierError(ValueError):
    pass


@dataclass(frozen=True)
class Prediction:
    label: str
    confidence: float

    def __post_init__(self):
        c = float(self.confidence)
        if not 0.0 <= c <= 1.0:
            raise ClassifierError(f"confidence {c} outside [0, 1]")
        object.__setattr__(self, "confidence", c)


@dataclass(frozen=True)
class PredictionSet:
    """Predictions for one image, most confident first."""

    predictions: Tuple[Prediction, ...]

    def __post_init__(self):
        preds = tuple(self.predictions)
        if not preds:
            raise ClassifierError("a prediction set cannot be empty")
        confs = [p.confidence for p in preds]
        if any(a < b for a, b in zip(confs, confs[1:])):
            raise ClassifierError("predictions must be sorted by descending confidence")
        object.__setattr__(self, "predictions", preds)

    @property
    def top(self) -> Prediction:
        return self.predictions[0]

    def confidence_of(self, label: str) -> float:
        for p in self.predictions:
            if p.label == label:
                return p.confidence
        return 0.0

    def __len__(self):
        return len(self.predictions)

    def __iter__(self):
        return iter(self.predictions)

    def __getitem__(self, i):
        return self.predictions[i]

    @classmethod
    def from_scores(cls, labels: Sequence[str], probs: Sequence[float]) -> "PredictionSet":
        # stable sort keeps label-space order among ties
        order = sorted(range(len(labels)), key=lambda i: -probs[i])
        return cls(tuple(Prediction(labels[i], min(max(float(probs[i]), 0.0), 1.0)) for i in order))


@dataclass(frozen=True)
class LabelSpace:
    labels: Tuple[str, ...]

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        if len(labels) < 2:
            raise ClassifierError("a label space needs at least two labels")
        if len(set(labels)) != len(labels):
            raise ClassifierError(f"duplicate labels in {labels}")
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __contains__(self, item):
        return item in self.labels

    def index(self, label: str) -> int:
        return self.labels.index(label)


class Classifier(Protocol):
    labels: LabelSpace

    def classify(self, img: Image) -> PredictionSet: ...


def _as_label_space(labels) -> LabelSpace:
    return labels if isinstance(labels, LabelSpace) else LabelSpace(tuple(labels))


class _SizedModel:
    input_size: Optional[Tuple[int, int]] = None

    def _check(self, img: Image) -> None:
        if self.input_size is not None and (img.width, img.height) != tuple(self.input_size):
            raise ClassifierError(
                f"model accepts {self.input_size[0]}x{self.input_size[1]} images, "
                f"got {img.width}x{img.height}"
            )


class HistogramClassifier(_SizedModel):
    """Softmax over negative squared distances between the image mean color and per-label prototypes."""

    def __init__(self, labels, prototypes, temperature: float = 1.0,
                 input_size: Optional[Tuple[int, int]] = None):
        self.labels = _as_label_space(labels)
        if isinstance(prototypes, Mapping):
            missing = [lb for lb in self.labels if lb not in prototypes]
            if missing:
                raise ClassifierError(f"no prototype for labels {missing}")
            prototypes = [prototypes[lb] for lb in self.labels]
        protos = np.array(prototypes, dtype=np.float64)
        if protos.shape != (len(self.labels), 3):
            raise ClassifierError(
                f"prototypes must have shape ({len(self.labels)}, 3), got {protos.shape}"
            )
        if not temperature > 0:
            raise ClassifierError(f"temperature must be positive, got {temperature}")
        protos.setflags(write=False)
        self.prototypes = protos
        self.temperature = float(temperature)
        self.input_size = input_size

    def scores(self, img: Image) -> np.ndarray:
        d = img.mean_color()[None, :] - self.prototypes
        return softmax(-np.sum(d * d, axis=1) / self.temperature)

    def classify(self, img: Image) -> PredictionSet:
        self._check(img)
        return PredictionSet.from_scores(self.labels.labels, self.scores(img))


def color_histogram(img: Image, bins: int = 4) -> np.ndarray:
    """Joint color histogram with per-bin channel mass, flattened to 3*bins**3 features.

    Entry ``(b, c)`` is the sum of channel ``c`` over pixels falling in joint
    bin ``b``, divided by the pixel count.  Summing over bins recovers the
    mean color.
    """
    px = img.pixels.reshape(-1, 3)
    q = np.minimum((px * bins).astype(np.int64), bins - 1)
    flat = (q[:, 0] * bins + q[:, 1]) * bins + q[:, 2]
    feats = np.zeros((bins ** 3, 3))
    for c in range(3):
        feats[:, c] = np.bincount(flat, weights=px[:, c], minlength=bins ** 3)
    return (feats / px.shape[0]).ravel()


class LinearClassifier(_SizedModel):
    """Softmax over ``W @ color_histogram(img) + b``."""

    def __init__(self, labels, weights, bias, bins: int = 4,
                 input_size: Optional[Tuple[int, int]] = None):
        self.labels = _as_label_space(labels)
        if int(bins) < 1:
            raise ClassifierError(f"bins must be positive, got {bins}")
        self.bins = int(bins)
        w = np.array(weights, dtype=np.float64)
        b = np.array(bias, dtype=np.float64)
        n_feat = 3 * self.bins ** 3
        if w.shape != (len(self.labels), n_feat):
            raise ClassifierError(
                f"weights must have shape ({len(self.labels)}, {n_feat}), got {w.shape}"
            )
        if b.shape != (len(self.labels),):
            raise ClassifierError(f"bias must have length {len(self.labels)}, got {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ClassifierError("weights and bias must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        self.weights, self.bias = w, b
        self.input_size = input_size

    def scores(self, img: Image) -> np.ndarray:
        return softmax(self.weights @ color_histogram(img, self.bins) + self.bias)

    def classify(self, img: Image) -> PredictionSet:
        self._check(img)
        return PredictionSet.from_scores(self.labels.labels, self.scores(img))


def histogram_classifier(labels, prototypes, temperature: float = 1.0) -> HistogramClassifier:
    return HistogramClassifier(labels, prototypes, temperature)


def linear_classifier(labels, weights_path: PathLike) -> LinearClassifier:
    """Load a linear classifier from a JSON weights file.

    ``labels`` may be ``None`` to take the file's label list; otherwise it must
    match the file exactly.
    """
    p = Path(weights_path)
    try:
        doc = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ClassifierError(f"cannot load classifier weights from {p}: {exc}") from exc
    for key in ("labels", "bins", "weights", "bias"):
        if key not in doc:
            raise ClassifierError(f"{p}: missing field {key!r}")
    if labels is not None and tuple(labels) != tuple(doc["labels"]):
        raise ClassifierError(f"{p}: labels {doc['labels']} do not match {list(labels)}")
    return LinearClassifier(doc["labels"], doc["weights"], doc["bias"], bins=doc["bins"])


def save_linear_weights(model: LinearClassifier, path: PathLike) -> None:
    doc = {
        "labels": list(model.labels.labels),
        "bins": model.bins,
        "weights": model.weights.tolist(),
        "bias": model.bias.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def classify(model: Classifier, img: Image) -> PredictionSet:
    return model.classify(img)


def classify_batch(model: Classifier, images: Sequence[Image]) -> List[PredictionSet]:
    return [model.classify(img) for img in images]


def filter_views(model: Classifier, images: Sequence[Image], true_label: str) -> List[int]:
    """Indices of views whose top-1 prediction is ``true_label``."""
    if not images:
        raise ClassifierError("filter_views needs at least one image")
    return [i for i, ps in enumerate(classify_batch(model, images)) if ps.top.label == true_label]


def build_classifier(spec: Mapping) -> Classifier:
    """Construct a built-in classifier from a config mapping."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "histogram":
        allowed = {"labels", "prototypes", "temperature"}
        unknown = set(spec) - allowed
        if unknown:
            raise ClassifierError(f"unknown histogram classifier keys: {sorted(unknown)}")
        if "labels" not in spec or "prototypes" not in spec:
            raise ClassifierError("histogram classifier needs 'labels' and 'prototypes'")
        return HistogramClassifier(spec["labels"], spec["prototypes"], spec.get("temperature", 1.0))
    if kind == "linear":
        unknown = set(spec) - {"weights", "labels"}
        if unknown:
            raise ClassifierError(f"unknown linear classifier keys: {sorted(unknown)}")
        if "weights" not in spec:
            raise ClassifierError("linear classifier needs a 'weights' path")
        return linear_classifier(spec.get("labels"), spec["weights"])
    raise ClassifierError(f"unknown classifier kind {kind!r} (expected 'histogram' or 'linear')")
