"""Forward passes shared by training and inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from treeground import numerics as nx
from treeground.config import RunConfig
from treeground.encoders import EncodedVideo, QueryFeatures
from treeground.grounding_model import BoxPrediction, GroundingModel, TokenBatch
from treeground.info_tree import (
    Branch,
    CropResult,
    InfoTree,
    WeightedNode,
    build_tree,
    crop_branch,
    reweight_tokens,
    select_branches_inference,
)
from treeground.numerics import Tensor


@dataclass
class VideoFeatures:
    encoded: EncodedVideo
    query: QueryFeatures
    pooled: Tensor  # (I, C)


@dataclass
class VideoPrediction:
    tree: InfoTree | None
    branches: list[Branch]
    predictions: dict[int, BoxPrediction] = field(default_factory=dict)

    def selected_boxes(self) -> dict[int, tuple[float, float, float, float]]:
        """frame -> chosen box as (x_min, y_min, x_max, y_max)."""
        out = {}
        for f, pred in sorted(self.predictions.items()):
            out[f] = pred.xyxy(int(np.argmax(pred.probs)))
        return out


def encode_video(model: GroundingModel, frames: np.ndarray, query) -> VideoFeatures:
    encoded = model.frame_encoder(frames)
    q = model.text_encoder(query)
    return VideoFeatures(encoded, q, nx.maxpool_spatial(encoded.grids))


def unweighted_leaves(num_frames: int, frames=None) -> list[WeightedNode]:
    """All frames as leaves with factor 1: the tree-disabled ablation."""
    one = Tensor(1.0)
    frames = range(num_frames) if frames is None else frames
    return [WeightedNode(f, "leaf", one, one, (f, f)) for f in frames]


def branch_tokens(model: GroundingModel, feats: VideoFeatures, tree: InfoTree, branch: Branch,
                  cfg: RunConfig) -> tuple[CropResult, TokenBatch]:
    crop = crop_branch(branch, tree, cfg.tree)
    nodes = reweight_tokens(crop, tree)
    return crop, model.assemble_tokens(nodes, feats.encoded, feats.query)


def predict_video(model: GroundingModel, frames: np.ndarray, query, cfg: RunConfig) -> VideoPrediction:
    """Inference over every frame: search branches, crop, encode and decode each branch."""
    feats = encode_video(model, frames, query)
    num_frames = frames.shape[0]
    if not cfg.tree.enabled:
        batch = model.assemble_tokens(unweighted_leaves(num_frames), feats.encoded, feats.query)
        f_out = model.encode(batch)
        branch = Branch(root=-1, leaves=tuple(range(num_frames)), r_tv=1.0, fallback=True)
        preds = model.decode_boxes(f_out, batch, list(range(num_frames)), feats.query.pooled)
        return VideoPrediction(None, [branch], {p.frame_index: p for p in preds})

    tree = build_tree(feats.pooled, feats.query.pooled, model.relevance, cfg.tree)
    branches = select_branches_inference(tree, cfg.tree)
    out = VideoPrediction(tree, branches)
    for branch in branches:
        _, batch = branch_tokens(model, feats, tree, branch, cfg)
        f_out = model.encode(batch)
        for p in model.decode_boxes(f_out, batch, list(branch.leaves), feats.query.pooled):
            out.predictions[p.frame_index] = p
    return out
