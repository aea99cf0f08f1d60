"""Static matplotlib figures: per-frame box overlays and evaluation summaries."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from treeground.evaluation import THRESHOLDS, EvalReport  # noqa: E402

PRED_GID = "pred-box"
GT_GID = "gt-box"

# fixed salt and no date keep SVG output byte-stable across runs
_SVG_RC = {"svg.hashsalt": "treeground", "svg.fonttype": "none"}
_SVG_META = {"Date": None, "Creator": None}


def _to_image(frame: np.ndarray) -> np.ndarray:
    """(3, H, W) floats -> (H, W, 3) clipped to [0, 1] for imshow."""
    return np.clip(np.transpose(frame, (1, 2, 0)), 0.0, 1.0)


def _rect(box: Sequence[float], size: tuple[int, int], color: str, gid: str, style: str) -> Rectangle:
    h, w = size
    x0, y0, x1, y1 = box
    r = Rectangle((x0 * w - 0.5, y0 * h - 0.5), (x1 - x0) * w, (y1 - y0) * h,
                  fill=False, edgecolor=color, linewidth=1.5, linestyle=style)
    r.set_gid(gid)
    return r


def render_overlay(frame: np.ndarray, pred: Sequence[float] | None, gt: Sequence[float] | None,
                   path: str | Path, title: str = "") -> int:
    """Write one SVG with the frame, the predicted box (solid) and ground truth (dashed).

    Returns the number of rectangles drawn.
    """
    h, w = frame.shape[1:]
    count = 0
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(3, 3))
        ax.imshow(_to_image(frame), interpolation="nearest")
        if gt is not None:
            ax.add_patch(_rect(gt, (h, w), "lime", GT_GID, "--"))
            count += 1
        if pred is not None:
            ax.add_patch(_rect(pred, (h, w), "red", PRED_GID, "-"))
            count += 1
        ax.set_axis_off()
        if title:
            ax.set_title(title, fontsize=8)
        fig.savefig(path, format="svg", metadata=_SVG_META, bbox_inches="tight")
        plt.close(fig)
    return count


def render_video(frames: np.ndarray, preds: Mapping[int, Sequence[float]], gts: Sequence[Sequence[float] | None],
                 out_dir: str | Path, stem: str = "frame") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(frames.shape[0]):
        path = out_dir / f"{stem}_{i:03d}.svg"
        render_overlay(frames[i], preds.get(i), gts[i], path, title=f"frame {i}")
        paths.append(path)
    return paths


def report_figures(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """Accuracy-per-threshold bars and a histogram of per-video mean IoU, as PNG files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(4, 3))
    labels = [f"Acc@{a}" for a in THRESHOLDS] + ["Avg"]
    values = [report.accuracy[a] for a in THRESHOLDS] + [report.avg]
    ax.bar(labels, values, color=["tab:blue"] * len(THRESHOLDS) + ["tab:gray"])
    ax.set_ylim(0, 1)
    ax.set_ylabel("fraction of videos")
    acc_path = out_dir / "accuracy.png"
    fig.tight_layout()
    fig.savefig(acc_path, dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4, 3))
    scores = [r.mean_iou for r in report.rows if r.mean_iou is not None]
    ax.hist(scores, bins=np.linspace(0, 1, 21), color="tab:blue")
    for a in THRESHOLDS:
        ax.axvline(a, color="k", linewidth=0.8, linestyle=":")
    ax.set_xlabel("per-video mean IoU")
    ax.set_ylabel("videos")
    hist_path = out_dir / "mean_iou_hist.png"
    fig.tight_layout()
    fig.savefig(hist_path, dpi=100)
    plt.close(fig)
    return [acc_path, hist_path]
