"""Query-guided binary tree over frames, branch search, cropping and reweighting.

Leaves are frames (pooled frame features).  Each construction round pairs
the queue front to back, scores every pair by how the two nodes relate to
the query and to each other, merges the best-scoring fraction of pairs and
replaces each merged pair in place by its parent.  Rounds repeat until one
node (the root) remains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from treeground import numerics as nx
from treeground.config import TreeConfig
from treeground.encoders import FeatureGrid
from treeground.errors import ShapeError
from treeground.layers import Module, param
from treeground.numerics import Tensor


class RelevanceParams(Module):
    """Text/visual projections for relevance and the merge map."""

    def __init__(self, rng: np.random.Generator, width: int, proj_dim: int, gamma: float = 0.3):
        std = 1.0 / math.sqrt(width * math.sqrt(proj_dim))
        self.w_t = param(rng, (width, proj_dim), std=std)
        self.w_v = param(rng, (width, proj_dim), std=std)
        self.w_mg = param(rng, (width, width), std=0.5 / math.sqrt(width))
        self.b_mg = param(rng, (width,), fill=0.0)
        self.gamma = gamma

    @classmethod
    def identity(cls, width: int, gamma: float = 0.3) -> "RelevanceParams":
        p = cls(np.random.default_rng(0), width, width, gamma)
        for t in (p.w_t, p.w_v, p.w_mg):
            t.data = np.eye(width)
        return p


@dataclass
class TreeNode:
    id: int
    kind: str  # "leaf" | "internal"
    span: tuple[int, int]  # inclusive frame range
    feature: Tensor  # (C,)
    relevance: Tensor  # scalar r_tv
    children: tuple[int, int] | None = None
    removed: bool = False
    weight: float = 1.0

    @property
    def r_tv(self) -> float:
        return float(self.relevance.data)

    @property
    def leaf_count(self) -> int:
        return self.span[1] - self.span[0] + 1

    @property
    def is_leaf(self) -> bool:
        return self.kind == "leaf"


@dataclass
class InfoTree:
    nodes: list[TreeNode]
    root: int
    log: list[tuple[int, tuple[int, int], int]] = field(default_factory=list)  # (round, (a, b), new)

    @property
    def num_frames(self) -> int:
        return self.nodes[self.root].span[1] + 1

    def parents(self) -> dict[int, int]:
        out = {}
        for n in self.nodes:
            if n.children:
                for c in n.children:
                    out[c] = n.id
        return out

    def subtree(self, node_id: int) -> list[int]:
        """Node ids under ``node_id`` (inclusive), parents before children."""
        order, stack = [], [node_id]
        while stack:
            nid = stack.pop()
            order.append(nid)
            kids = self.nodes[nid].children
            if kids:
                stack.extend(reversed(kids))
        return order

    def leaves_under(self, node_id: int) -> list[int]:
        return [i for i in self.subtree(node_id) if self.nodes[i].is_leaf]

    def reset_crop(self) -> None:
        for n in self.nodes:
            n.removed = False
            n.weight = 1.0

    def dump(self) -> str:
        lines = []
        for n in self.nodes:
            kids = f"({n.children[0]},{n.children[1]})" if n.children else "()"
            lines.append(f"{n.id} {n.kind} span=[{n.span[0]},{n.span[1]}] r_tv={n.r_tv:.6f} "
                         f"weight={n.weight:.1f} removed={int(n.removed)} children={kids}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Branch:
    root: int
    leaves: tuple[int, ...]  # leaf node ids == frame indices, ascending
    r_tv: float
    fallback: bool = False

    @property
    def span(self) -> tuple[int, int]:
        return self.leaves[0], self.leaves[-1]


@dataclass
class WeightedNode:
    node_id: int
    kind: str
    factor: Tensor  # r_tv * lambda, scalar
    feature: Tensor  # factor * pooled feature
    span: tuple[int, int] = (0, 0)


@dataclass
class CropResult:
    branch: Branch
    removed: set[int]
    weights: dict[int, float]  # leaf id -> lambda
    surviving_internal: list[int]


# ---------------------------------------------------------------------------
# relevance
# ---------------------------------------------------------------------------


def pool_node_feature(grid: FeatureGrid | Tensor) -> Tensor:
    features = grid.features if isinstance(grid, FeatureGrid) else grid
    return nx.maxpool_spatial(features)


def visual_relevance(a: Tensor, b: Tensor) -> float:
    return float(nx.cosine_similarity(a.detach(), b.detach()).data)


def semantic_relevance(f_t: Tensor, f_v: Tensor, params: RelevanceParams) -> Tensor:
    return _relevance(nx.matmul(f_t, params.w_t), f_v, params)


def _relevance(text_proj: Tensor, f_v: Tensor, params: RelevanceParams) -> Tensor:
    return nx.sigmoid(nx.matmul(text_proj, nx.matmul(f_v, params.w_v)))


def pair_score(a: TreeNode, b: TreeNode, gamma: float, rank_mode: str = "similarity") -> float:
    """Pair ranking score; the top-ranked pairs merge first.

    ``literal``: |r_a - r_b| + gamma * r_vv.  ``similarity``: the semantic
    difference enters with a minus sign so that semantically close pairs
    rank high.
    """
    diff = abs(a.r_tv - b.r_tv)
    r_vv = visual_relevance(a.feature, b.feature)
    if rank_mode == "literal":
        return diff + gamma * r_vv
    if rank_mode == "similarity":
        return -diff + gamma * r_vv
    raise ValueError(f"unknown rank_mode {rank_mode!r}")


def merge_count(rho: float, pairs: int) -> int:
    """ceil(rho * pairs), at least one; the epsilon absorbs float error such as 0.7 * 10."""
    return max(1, math.ceil(rho * pairs - 1e-9))


def merge_pair(a: TreeNode, b: TreeNode, params: RelevanceParams, new_id: int, text_proj: Tensor) -> TreeNode:
    if a.span[1] + 1 != b.span[0]:
        raise ShapeError(f"merge_pair: spans {a.span} and {b.span} are not adjacent in order")
    feature = nx.add(nx.matmul(nx.add(a.feature, b.feature), params.w_mg), params.b_mg)
    return TreeNode(
        id=new_id, kind="internal", span=(a.span[0], b.span[1]), feature=feature,
        relevance=_relevance(text_proj, feature, params), children=(a.id, b.id),
    )


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def make_leaves(pooled: Tensor, text_proj: Tensor, params: RelevanceParams) -> list[TreeNode]:
    """Leaf nodes from a (I, C) matrix of pooled frame features."""
    if pooled.ndim != 2 or pooled.shape[0] == 0:
        raise ShapeError(f"build_tree: need a non-empty (I, C) leaf matrix, got {pooled.shape}")
    scores = nx.sigmoid(nx.matmul(nx.matmul(pooled, params.w_v), text_proj))  # (I,)
    return [
        TreeNode(id=i, kind="leaf", span=(i, i), feature=nx.take(pooled, i), relevance=nx.take(scores, i))
        for i in range(pooled.shape[0])
    ]


def build_tree(leaves: Sequence[TreeNode] | Tensor, f_t: Tensor, params: RelevanceParams,
               config: TreeConfig) -> InfoTree:
    text_proj = nx.matmul(f_t, params.w_t)
    if isinstance(leaves, Tensor):
        leaves = make_leaves(leaves, text_proj, params)
    nodes = list(leaves)
    if not nodes:
        raise ShapeError("build_tree: no leaves")
    queue = [n.id for n in nodes]
    tree_log = []
    rnd = 0
    while len(queue) > 1:
        rnd += 1
        npairs = len(queue) // 2
        scores = [pair_score(nodes[queue[2 * i]], nodes[queue[2 * i + 1]], params.gamma, config.rank_mode)
                  for i in range(npairs)]
        ranked = sorted(range(npairs), key=lambda i: (-scores[i], i))
        chosen = set(ranked[:merge_count(config.rho, npairs)])
        nxt = []
        for i in range(npairs):
            a, b = queue[2 * i], queue[2 * i + 1]
            if i in chosen:
                node = merge_pair(nodes[a], nodes[b], params, len(nodes), text_proj)
                nodes.append(node)
                tree_log.append((rnd, (a, b), node.id))
                nxt.append(node.id)
            else:
                nxt.extend((a, b))
        if len(queue) % 2:
            nxt.append(queue[-1])
        queue = nxt
    return InfoTree(nodes=nodes, root=queue[0], log=tree_log)


# ---------------------------------------------------------------------------
# branch search
# ---------------------------------------------------------------------------


def _branch(tree: InfoTree, node_id: int, fallback: bool = False) -> Branch:
    n = tree.nodes[node_id]
    return Branch(root=node_id, leaves=tuple(range(n.span[0], n.span[1] + 1)), r_tv=n.r_tv, fallback=fallback)


def candidate_branches(tree: InfoTree, config: TreeConfig) -> list[Branch]:
    """Subtrees whose leaf count lies strictly between delta_min and delta_max."""
    lo, hi = config.delta_min, config.resolved_delta_max(tree.num_frames)
    return [_branch(tree, n.id) for n in tree.nodes if lo < n.leaf_count < hi]


def select_branch_training(tree: InfoTree, labeled_frame: int, config: TreeConfig) -> Branch:
    if not 0 <= labeled_frame < tree.num_frames:
        raise ShapeError(f"labeled frame {labeled_frame} outside [0, {tree.num_frames})")
    hits = [b for b in candidate_branches(tree, config) if labeled_frame in b.leaves]
    if not hits:
        return _branch(tree, tree.root, fallback=True)
    return min(hits, key=lambda b: (-b.r_tv, len(b.leaves), b.root))


def select_branches_inference(tree: InfoTree, config: TreeConfig) -> list[Branch]:
    """Greedy: take the most relevant candidate, drop every candidate overlapping it, repeat.

    Frames left uncovered become single-leaf fallback branches, so the
    result partitions all frames.
    """
    candidates = candidate_branches(tree, config)
    covered: set[int] = set()
    chosen: list[Branch] = []
    while True:
        live = [b for b in candidates if covered.isdisjoint(b.leaves)]
        if not live:
            break
        best = min(live, key=lambda b: (-b.r_tv, b.span[0], b.root))
        chosen.append(best)
        covered.update(best.leaves)
    for frame in range(tree.num_frames):
        if frame not in covered:
            chosen.append(_branch(tree, frame, fallback=True))
    return chosen


# ---------------------------------------------------------------------------
# cropping and reweighting
# ---------------------------------------------------------------------------


def crop_branch(branch: Branch, tree: InfoTree, config: TreeConfig) -> CropResult:
    """Drop internal nodes below the crop threshold together with their internal descendants.

    Leaves are never dropped; leaves under a dropped node are down-weighted.
    Flags are also written onto the tree nodes (for dumps).
    """
    removed: set[int] = set()
    weights: dict[int, float] = {}
    surviving: list[int] = []
    stack = [(branch.root, False)]
    while stack:
        nid, under_removed = stack.pop()
        node = tree.nodes[nid]
        if node.is_leaf:
            node.removed = False
            node.weight = config.down_weight if under_removed else 1.0
            weights[nid] = node.weight
            continue
        drop = under_removed or node.r_tv < config.crop_threshold
        node.removed = drop
        node.weight = 1.0
        if drop:
            removed.add(nid)
        else:
            surviving.append(nid)
        for child in reversed(node.children):
            stack.append((child, drop))
    return CropResult(branch, removed, dict(sorted(weights.items())), sorted(surviving))


def reweight_tokens(crop: CropResult, tree: InfoTree) -> list[WeightedNode]:
    """Surviving nodes (leaves first, in frame order, then internal nodes by id) scaled by r_tv * lambda."""
    out = []
    for nid in list(crop.weights) + crop.surviving_internal:
        node = tree.nodes[nid]
        lam = crop.weights.get(nid, 1.0)
        factor = nx.scale(node.relevance, lam)
        out.append(WeightedNode(nid, node.kind, factor, nx.scale(node.feature, factor), node.span))
    return out
