"""Loss assembly, one-shot matching, mismatch sampling and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from treeground import numerics as nx
from treeground.config import RunConfig
from treeground.data import Box, Dataset, VideoSample
from treeground.errors import NumericError
from treeground.evaluation import EvalReport, evaluate
from treeground.grounding_model import BoxPrediction, GroundingModel
from treeground.info_tree import build_tree, select_branch_training
from treeground.numerics import OptimizerState, Tape, Tensor, optimizer_step
from treeground.pipeline import branch_tokens, encode_video, predict_video, unweighted_leaves

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    detection_l1: float = 0.0
    detection_iou: float = 0.0
    detection_cls: float = 0.0
    mfm: float = 0.0
    vtm: float = 0.0
    total: float = 0.0
    beta_det: float = 1.0
    beta_mfm: float = 1.0
    beta_vtm: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return {
            "detection_l1": self.detection_l1, "detection_iou": self.detection_iou,
            "detection_cls": self.detection_cls, "mfm": self.mfm, "vtm": self.vtm, "total": self.total,
        }


@dataclass
class TrainSample:
    video: VideoSample
    is_matched: bool
    query: tuple[int, ...]


def sample_mismatch(video: VideoSample, pool: Sequence[VideoSample], rng: np.random.Generator,
                    rate: float = 0.5) -> TrainSample:
    """With probability ``rate`` swap in another video's query (never the video's own).

    Donors whose query differs from the video's own are preferred, so a
    swapped query really describes something else; any other video is used
    only when no such donor exists.
    """
    others = [v for v in pool if v.video_id != video.video_id]
    if not others:
        log.warning("mismatch pool has a single video; sample stays matched")
        return TrainSample(video, True, video.query)
    if rng.random() < rate:
        donors = [v for v in others if tuple(v.query) != tuple(video.query)] or others
        other = donors[int(rng.integers(len(donors)))]
        return TrainSample(video, False, other.query)
    return TrainSample(video, True, video.query)


# ---------------------------------------------------------------------------
# matching and detection losses
# ---------------------------------------------------------------------------


def xyxy_to_cxcywh(box: Sequence[float]) -> np.ndarray:
    x0, y0, x1, y1 = box
    return np.array([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0])


def cxcywh_to_xyxy(box: Sequence[float]) -> np.ndarray:
    cx, cy, w, h = box
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def _iou_xyxy(a: np.ndarray, b: np.ndarray) -> float:
    iw = max(min(a[2], b[2]) - max(a[0], b[0]), 0.0)
    ih = max(min(a[3], b[3]) - max(a[1], b[1]), 0.0)
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def match_costs(boxes: np.ndarray, logits: np.ndarray, gt_box: Box) -> np.ndarray:
    """Per-candidate cost: L1(cxcywh) + (1 - IoU) - ln P."""
    target = xyxy_to_cxcywh(gt_box)
    gt = np.asarray(gt_box, dtype=np.float64)
    neg_log_p = np.logaddexp(0.0, -logits)
    return np.array([
        np.abs(b - target).sum() + (1.0 - _iou_xyxy(cxcywh_to_xyxy(b), gt)) + nlp
        for b, nlp in zip(boxes, neg_log_p)
    ])


def match_predictions(pred: BoxPrediction, gt_box: Box) -> int:
    costs = match_costs(pred.boxes, _logit(pred.probs) if pred.logit_tensor is None else pred.logit_tensor.data,
                        gt_box)
    return int(np.argmin(costs))


def box_iou_tensor(box: Tensor, gt_box: Box) -> Tensor:
    """Differentiable IoU of one (cx, cy, w, h) tensor against a constant xyxy box."""
    center = nx.take(box, slice(0, 2))
    half = nx.scale(nx.take(box, slice(2, 4)), 0.5)
    lo, hi = nx.sub(center, half), nx.add(center, half)
    g_lo, g_hi = Tensor(np.array(gt_box[:2])), Tensor(np.array(gt_box[2:]))
    overlap = nx.relu(nx.sub(nx.minimum(hi, g_hi), nx.maximum(lo, g_lo)))
    inter = nx.mul_elementwise(nx.take(overlap, slice(0, 1)), nx.take(overlap, slice(1, 2)))
    size = nx.take(box, slice(2, 4))
    area = nx.mul_elementwise(nx.take(size, slice(0, 1)), nx.take(size, slice(1, 2)))
    g_area = (gt_box[2] - gt_box[0]) * (gt_box[3] - gt_box[1])
    union = nx.sub(nx.add(area, Tensor(np.array([g_area]))), inter)
    return nx.reshape(nx.div(inter, union), ())


def detection_loss(pred: BoxPrediction, matched: int, gt_box: Box) -> tuple[Tensor, Tensor, Tensor]:
    """(L1 on the matched box, 1 - IoU on the matched box, mean BCE over all candidates)."""
    box = nx.take(pred.box_tensor, matched)
    l1 = nx.sum_all(nx.abs_(nx.sub(box, Tensor(xyxy_to_cxcywh(gt_box)))))
    iou_term = nx.sub(Tensor(1.0), box_iou_tensor(box, gt_box))
    k = pred.logit_tensor.shape[0]
    target = np.zeros(k)
    target[matched] = 1.0
    z = pred.logit_tensor
    pos = nx.mul_elementwise(Tensor(target), nx.log_sigmoid(z))
    neg = nx.mul_elementwise(Tensor(1.0 - target), nx.log_sigmoid(nx.scale(z, -1.0)))
    cls = nx.scale(nx.mean_lastdim(nx.add(pos, neg)), -1.0)
    return l1, iou_term, cls


def vtm_loss(logit: Tensor, matched: bool) -> Tensor:
    return nx.scale(nx.log_sigmoid(logit if matched else nx.scale(logit, -1.0)), -1.0)


# ---------------------------------------------------------------------------
# step
# ---------------------------------------------------------------------------


def forward_losses(sample: TrainSample, model: GroundingModel, cfg: RunConfig,
                   rng: np.random.Generator) -> tuple[Tensor, LossBreakdown]:
    """Build every loss term for one sample (under whatever tape is active)."""
    t = cfg.train
    video = sample.video
    labeled = video.one_shot_frame
    feats = encode_video(model, video.frames, sample.query)
    if cfg.tree.enabled:
        tree = build_tree(feats.pooled, feats.query.pooled, model.relevance, cfg.tree)
        branch = select_branch_training(tree, labeled, cfg.tree)
        _, batch = branch_tokens(model, feats, tree, branch, cfg)
    else:
        batch = model.assemble_tokens(unweighted_leaves(video.num_frames), feats.encoded, feats.query)

    # detection and matching read the clean tokens; only feature modeling sees the masked copy
    f_out = model.encode(batch)
    lb = LossBreakdown(beta_det=t.beta_det, beta_mfm=t.beta_mfm, beta_vtm=t.beta_vtm)
    terms: list[Tensor] = []
    if t.self_supervised:
        masked = model.mask_tokens(batch, cfg.model.mask_rate, rng)
        mfm = model.mfm_loss(model.encode(masked), masked)
        vtm = vtm_loss(model.vtm_logit(f_out), sample.is_matched)
        lb.mfm, lb.vtm = float(mfm.data), float(vtm.data)
        terms += [nx.scale(mfm, t.beta_mfm), nx.scale(vtm, t.beta_vtm)]
    if sample.is_matched:
        (pred,) = model.decode_boxes(f_out, batch, [labeled], feats.query.pooled)
        gt_box = video.one_shot_box
        k = match_predictions(pred, gt_box)
        l1, iou_term, cls = detection_loss(pred, k, gt_box)
        lb.detection_l1, lb.detection_iou, lb.detection_cls = (float(x.data) for x in (l1, iou_term, cls))
        terms.append(nx.scale(nx.add(nx.add(l1, iou_term), cls), t.beta_det))
    total = terms[0]
    for term in terms[1:]:
        total = nx.add(total, term)
    lb.total = float(total.data)
    if not math.isfinite(lb.total):
        raise NumericError(f"non-finite loss: {lb.as_dict()}")
    return total, lb


def train_step(sample: TrainSample, model: GroundingModel, state: OptimizerState, cfg: RunConfig,
               rng: np.random.Generator, epoch: int = 0) -> LossBreakdown:
    params = model.parameters()
    with Tape() as tape:
        try:
            total, lb = forward_losses(sample, model, cfg, rng)
        except NumericError as exc:
            raise NumericError(f"step aborted on video {sample.video.video_id}: {exc}") from exc
        grads = tape.backward(total, params) if total.tracked else {}
    if grads:
        optimizer_step(params, grads, state, epoch, cfg.train.grad_clip)
    return lb


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def format_metrics(row: dict) -> str:
    parts = []
    for key, value in row.items():
        parts.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    return " ".join(parts)


def parse_metrics(line: str) -> dict:
    out: dict = {}
    for part in line.split():
        key, _, value = part.partition("=")
        if key == "split":
            out[key] = value
        elif key == "epoch":
            out[key] = int(value)
        else:
            out[key] = float(value)
    return out


@dataclass
class TrainResult:
    model: GroundingModel
    best_state: dict[str, np.ndarray]
    final_state: dict[str, np.ndarray]
    metrics: list[dict] = field(default_factory=list)
    best_epoch: int = -1


def evaluate_model(model: GroundingModel, videos: Sequence[VideoSample], cfg: RunConfig) -> EvalReport:
    return evaluate(lambda v: predict_video(model, v.frames, v.query, cfg).selected_boxes(), videos,
                    cfg.eval.absent_frames)


def train_loop(dataset: Dataset, cfg: RunConfig, log_path: str | Path | None = None,
               on_step: Callable[[int, LossBreakdown], None] | None = None,
               model: GroundingModel | None = None) -> TrainResult:
    """Shuffled single-sample epochs with periodic held-out evaluation.

    The returned ``best_state`` is the evaluated snapshot with the highest
    Acc@0.5 (the initial weights when nothing was evaluated).
    """
    t = cfg.train
    cfg.tree.validate()
    rng = np.random.default_rng(t.seed)
    model = model or GroundingModel(cfg)
    state = OptimizerState(base_lr=t.lr, decay_factor=t.lr_decay, decay_period=t.resolved_lr_period())
    train_videos = dataset.split("train")
    eval_videos = dataset.split("eval")
    if not train_videos:
        raise ValueError("train_loop: no training videos")
    result = TrainResult(model, model.state_dict(), model.state_dict())
    best_acc = -1.0
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(t.epochs):
            sums: dict[str, float] = {}
            for idx in rng.permutation(len(train_videos)):
                video = train_videos[idx]
                rate = t.mismatch_rate if t.self_supervised else 0.0
                sample = sample_mismatch(video, train_videos, rng, rate)
                lb = train_step(sample, model, state, cfg, rng, epoch)
                for k, v in lb.as_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                if on_step:
                    on_step(epoch, lb)
            last = epoch == t.epochs - 1
            if (epoch + 1) % max(t.eval_every, 1) and not last:
                continue
            report = evaluate_model(model, eval_videos, cfg) if eval_videos else None
            row: dict = {"epoch": epoch + 1, "split": "eval"}
            if report is not None:
                row.update({k: float(v) for k, v in report.metrics().items()})
            row.update({f"loss.{k}": v / len(train_videos) for k, v in sums.items()})
            result.metrics.append(row)
            log.info(format_metrics(row))
            if sink:
                sink.write(format_metrics(row) + "\n")
                sink.flush()
            acc = report.accuracy[0.5] if report is not None else 0.0
            if acc > best_acc:
                best_acc = acc
                result.best_state = model.state_dict()
                result.best_epoch = epoch + 1
    finally:
        if sink:
            sink.close()
    result.final_state = model.state_dict()
    return result


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-300, 1 - 1e-16)
    return np.log(p) - np.log1p(-p)
