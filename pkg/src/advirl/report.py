"""Evaluation reports and reward-history files."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from .classifier import Classifier, PredictionSet, classify_batch
from .env import ClassSummary, aggregate_predictions
from .field import RadianceField, render_rig
from .scene import CameraRig

PathLike = Union[str, Path]

HISTORY_COLUMNS = ("step", "episode", "reward", "target_avg_conf", "true_avg_conf", "mse",
                   "target_count")


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class ViewRow:
    view: int
    label: str
    confidence: float


@dataclass
class MetricsReport:
    rows: List[ViewRow]
    summary: Dict[str, ClassSummary]
    best_reward: Optional[float] = None
    final_reward: Optional[float] = None

    @property
    def n_views(self) -> int:
        return len(self.rows)

    def count(self, label: str) -> int:
        entry = self.summary.get(label)
        return entry.count if entry else 0

    def avg_confidence(self, label: str) -> float:
        entry = self.summary.get(label)
        return entry.avg_confidence if entry else 0.0

    def counts_lines(self) -> List[str]:
        ordered = sorted(self.summary.items(), key=lambda kv: (-kv[1].count, kv[0]))
        return [f"{s.count} out of {self.n_views} views classified as {label}"
                for label, s in ordered]

    def to_text(self) -> str:
        width = max([5] + [len(r.label) for r in self.rows] + [len(k) for k in self.summary])
        out = [f"{'view':>4}  {'label':<{width}}  confidence"]
        out += [f"{r.view:>4}  {r.label:<{width}}  {r.confidence:.4f}" for r in self.rows]
        out.append("")
        out.append(f"{'class':<{width}}  avg_conf  count")
        for label, s in self.summary.items():
            out.append(f"{label:<{width}}  {s.avg_confidence:.4f}  {s.count:>5}")
        out.append("")
        out.extend(self.counts_lines())
        if self.best_reward is not None:
            out.append(f"reward: best {self.best_reward:.6f}, final {self.final_reward:.6f}")
        return "\n".join(out) + "\n"

    def views_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["view", "label", "confidence"])
        for r in self.rows:
            w.writerow([r.view, r.label, _fmt(r.confidence)])
        return buf.getvalue()

    def classes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "avg_confidence", "count"])
        for label, s in self.summary.items():
            w.writerow([label, _fmt(s.avg_confidence), s.count])
        return buf.getvalue()

    def write(self, directory: PathLike, name: str) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{name}.txt").write_text(self.to_text())
        (d / f"{name}_views.csv").write_text(self.views_csv())
        (d / f"{name}_classes.csv").write_text(self.classes_csv())


def report_from_predictions(preds: Sequence[PredictionSet], **rewards) -> MetricsReport:
    rows = [ViewRow(i, ps.top.label, ps.top.confidence) for i, ps in enumerate(preds)]
    return MetricsReport(rows, aggregate_predictions(preds), **rewards)


def evaluate_field(field: RadianceField, rig: CameraRig, model: Classifier,
                   **rewards) -> MetricsReport:
    images = render_rig(field, rig)
    return report_from_predictions(classify_batch(model, images), **rewards)


def read_views_csv(path: PathLike) -> List[ViewRow]:
    with open(path, newline="") as fh:
        return [ViewRow(int(r["view"]), r["label"], float(r["confidence"]))
                for r in csv.DictReader(fh)]


def history_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in rows:
        w.writerow([r["step"], r["episode"], _fmt(r["reward"]), _fmt(r["target_avg_conf"]),
                    _fmt(r["true_avg_conf"]), _fmt(r["mse"]), r["target_count"]])
    return buf.getvalue()


def write_history(rows: Sequence[dict], path: PathLike) -> None:
    Path(path).write_text(history_csv(rows))


def read_history(path: PathLike) -> List[dict]:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            out.append({
                "step": int(r["step"]),
                "episode": int(r["episode"]),
                "reward": float(r["reward"]),
                "target_avg_conf": float(r["target_avg_conf"]),
                "true_avg_conf": float(r["true_avg_conf"]),
                "mse": float(r["mse"]),
                "target_count": int(r["target_count"]),
            })
        return out
