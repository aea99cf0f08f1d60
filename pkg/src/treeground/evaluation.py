"""IoU and the thresholded per-video accuracy protocol."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

THRESHOLDS = (0.4, 0.5, 0.6)
Box = tuple[float, float, float, float]


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) boxes."""
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    if area_a <= 0 or area_b <= 0:
        log.warning("degenerate box in iou: %s vs %s", a, b)
        return 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    return inter / (area_a + area_b - inter)


def video_mean_iou(pred: Mapping[int, Box], gt: Sequence[Box | None], absent: str = "exclude") -> float | None:
    """Mean IoU over frames with ground truth; ``None`` when no frame is evaluable.

    With ``absent="zero"`` frames without a target count as IoU 0 instead of
    being skipped.
    """
    scores = []
    for frame, box in enumerate(gt):
        if box is None:
            if absent == "zero":
                scores.append(0.0)
            continue
        scores.append(iou(pred[frame], box) if frame in pred else 0.0)
    if not scores or all(b is None for b in gt):
        return None
    return float(np.mean(scores))


def video_accuracy(pred: Mapping[int, Box], gt: Sequence[Box | None], alpha: float,
                   absent: str = "exclude") -> tuple[bool | None, float | None]:
    m = video_mean_iou(pred, gt, absent)
    if m is None:
        return None, None
    return m > alpha, m


@dataclass
class VideoRow:
    video_id: int
    mean_iou: float | None
    frames: int


@dataclass
class EvalReport:
    rows: list[VideoRow] = field(default_factory=list)
    accuracy: dict[float, float] = field(default_factory=dict)
    mean_iou: float = 0.0
    evaluated: int = 0
    excluded: int = 0

    @property
    def avg(self) -> float:
        return float(np.mean([self.accuracy[a] for a in THRESHOLDS]))

    def metrics(self) -> dict[str, float]:
        out = {f"acc@{a}": self.accuracy[a] for a in THRESHOLDS}
        out["avg"] = self.avg
        out["mean_iou"] = self.mean_iou
        return out

    def table(self) -> str:
        """Aligned text table: one header, one row of accuracies in percent."""
        head = f"{'Method':<10}|" + "".join(f"{a:>7}" for a in THRESHOLDS) + f"{'Avg':>7} |{'mIoU':>7}"
        vals = "".join(f"{100 * self.accuracy[a]:>7.1f}" for a in THRESHOLDS)
        row = f"{'model':<10}|{vals}{100 * self.avg:>7.1f} |{100 * self.mean_iou:>7.1f}"
        rule = "-" * len(head)
        return "\n".join([rule, head, rule, row, rule]) + "\n"


def summarize(rows: list[VideoRow]) -> EvalReport:
    scored = [r.mean_iou for r in rows if r.mean_iou is not None]
    report = EvalReport(rows=rows, evaluated=len(scored), excluded=len(rows) - len(scored))
    for a in THRESHOLDS:
        report.accuracy[a] = float(np.mean([m > a for m in scored])) if scored else 0.0
    report.mean_iou = float(np.mean(scored)) if scored else 0.0
    return report


def evaluate(predict: Callable[[object], Mapping[int, Box]], videos: Sequence, absent: str = "exclude") -> EvalReport:
    """Score a predictor (video -> frame -> box) on ``videos``."""
    rows = []
    for v in videos:
        boxes = predict(v)
        gt = [v.gt[i] for i in range(v.num_frames)]
        rows.append(VideoRow(v.video_id, video_mean_iou(boxes, gt, absent), v.num_frames))
    return summarize(rows)
