"""Token assembly, transformer encoder, self-supervised heads and the box decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from treeground import numerics as nx
from treeground.config import ModelConfig, RunConfig
from treeground.encoders import EncodedVideo, FrameEncoder, QueryFeatures, TextEncoder
from treeground.info_tree import RelevanceParams, WeightedNode
from treeground.layers import EncoderLayer, LayerNorm, Linear, MLP, Module, MultiHeadAttention, param
from treeground.numerics import Tensor

KINDS = ("local", "global", "text", "cls")
NEG = -1e9


@dataclass
class TokenBatch:
    """Transformer input: content rows plus (position, frame, type) embedding rows.

    ``tokens`` is what the encoder sees.  ``content`` keeps the pre-mask,
    post-reweighting features that masked feature modeling regresses to.
    """

    content: Tensor  # (T, C)
    extras: Tensor  # (T, C)
    kinds: list[str]
    frame_index: np.ndarray  # (T,), -1 when the token has no frame
    cell: np.ndarray  # (T, 2) (row, col), -1 when not a local token
    masked: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    tokens: Tensor | None = None

    def __post_init__(self):
        if self.masked.size == 0:
            self.masked = np.zeros(len(self.kinds), dtype=bool)
        if self.tokens is None:
            self.tokens = nx.add(self.content, self.extras)

    def __len__(self) -> int:
        return len(self.kinds)

    def count(self, kind: str) -> int:
        return sum(k == kind for k in self.kinds)

    def frames(self) -> list[int]:
        return sorted({int(f) for f, k in zip(self.frame_index, self.kinds) if k == "local"})


@dataclass
class BoxPrediction:
    frame_index: int
    boxes: np.ndarray  # (K, 4) cx, cy, w, h
    probs: np.ndarray  # (K,)
    box_tensor: Tensor | None = None
    logit_tensor: Tensor | None = None

    def xyxy(self, k: int) -> tuple[float, float, float, float]:
        cx, cy, w, h = self.boxes[k]
        return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


class EmbeddingTables(Module):
    def __init__(self, rng: np.random.Generator, width: int, grid: int, max_frames: int):
        self.rows = param(rng, (grid, width), std=0.5)
        self.cols = param(rng, (grid, width), std=0.5)
        self.frame = param(rng, (max_frames, width), std=0.5)
        self.type = param(rng, (len(KINDS), width), std=0.5)
        self.mask = param(rng, (width,), std=0.5)
        self.cls = param(rng, (width,), std=0.5)


class DecoderLayer(Module):
    def __init__(self, rng: np.random.Generator, width: int, heads: int, ffn: int):
        self.norm1 = LayerNorm(width)
        self.self_attn = MultiHeadAttention(rng, width, heads)
        self.norm2 = LayerNorm(width)
        self.cross_attn = MultiHeadAttention(rng, width, heads)
        self.norm3 = LayerNorm(width)
        self.ffn = MLP(rng, width, ffn, width)

    def __call__(self, q: Tensor, memory: Tensor, self_bias: np.ndarray, cross_bias: np.ndarray) -> Tensor:
        h = self.norm1(q)
        q = nx.add(q, self.self_attn(h, h, self_bias))
        q = nx.add(q, self.cross_attn(self.norm2(q), memory, cross_bias))
        return nx.add(q, self.ffn(self.norm3(q)))


class GroundingModel(Module):
    def __init__(self, cfg: RunConfig):
        m: ModelConfig = cfg.model
        rng = np.random.default_rng(m.init_seed)
        patch = cfg.data.height // m.grid
        self.config = cfg
        self.frame_encoder = FrameEncoder(rng, m.width, patch)
        self.text_encoder = TextEncoder(rng, cfg.data.vocab, m.width, m.max_query, m.heads, m.ffn)
        self.relevance = RelevanceParams(rng, m.width, m.relevance_dim, cfg.tree.gamma)
        self.tables = EmbeddingTables(rng, m.width, m.grid, m.max_frames)
        self.encoder = [EncoderLayer(rng, m.width, m.heads, m.ffn) for _ in range(m.enc_layers)]
        self.mlp_t = MLP(rng, m.width, m.ffn, m.width)
        self.mlp_v = MLP(rng, m.width, m.ffn, m.width)
        self.vtm_head = Linear(rng, m.width, 1)
        self.queries = param(rng, (m.queries, m.width), std=0.5)
        self.query_text = Linear(rng, m.width, m.width)
        self.decoder = [DecoderLayer(rng, m.width, m.heads, m.ffn) for _ in range(m.dec_layers)]
        self.dec_norm = LayerNorm(m.width)
        self.pointer_q = Linear(rng, m.width, m.width)
        self.pointer_k = Linear(rng, m.width, m.width)
        self.box_head = MLP(rng, m.width, m.ffn, 4)
        self.prob_head = Linear(rng, m.width, 1)
        self._grid = m.grid
        centers = (np.arange(m.grid) + 0.5) / m.grid
        # (G*G, 2) cell centres as (x, y) in row-major cell order
        self._centers = np.stack([np.tile(centers, m.grid), np.repeat(centers, m.grid)], axis=1)

    # -- token assembly ------------------------------------------------------

    def assemble_tokens(self, nodes: list[WeightedNode], video: EncodedVideo, query: QueryFeatures) -> TokenBatch:
        """cls, then H*W local tokens per surviving leaf, one token per surviving internal node, then text.

        Leaf node ids are frame indices; a global token takes the frame
        embedding of its span centre.
        """
        t = self.tables
        g = self._grid
        cells_per_frame = g * g
        rows = np.repeat(np.arange(g), g)
        cols = np.tile(np.arange(g), g)
        kind_ids = {k: i for i, k in enumerate(KINDS)}

        contents = [nx.reshape(t.cls, (1, -1))]
        extra_rows: list[Tensor] = [nx.take(t.type, [kind_ids["cls"]])]
        kinds = ["cls"]
        frame_index = [-1]
        cell = [(-1, -1)]

        leaves = [n for n in nodes if n.kind == "leaf"]
        internal = [n for n in nodes if n.kind != "leaf"]
        if not leaves:
            raise AssertionError("assemble_tokens: a branch always keeps its leaves")
        pos = nx.add(nx.take(t.rows, rows), nx.take(t.cols, cols))  # (G*G, C)
        local_type = nx.take(t.type, [kind_ids["local"]])
        for n in leaves:
            f = n.node_id
            contents.append(nx.scale(nx.take(video.cells, f), n.factor))
            extra_rows.append(nx.add(nx.add(pos, nx.take(t.frame, f)), nx.reshape(local_type, (-1,))))
            kinds += ["local"] * cells_per_frame
            frame_index += [f] * cells_per_frame
            cell += list(zip(rows.tolist(), cols.tolist()))
        for n in internal:
            center = (n.span[0] + n.span[1]) // 2
            contents.append(nx.reshape(n.feature, (1, -1)))
            extra_rows.append(nx.add(nx.take(t.type, [kind_ids["global"]]), nx.take(t.frame, center)))
            kinds.append("global")
            frame_index.append(-1)
            cell.append((-1, -1))
        L = query.per_token.shape[0]
        contents.append(query.per_token)
        extra_rows.append(nx.take(t.type, [kind_ids["text"]] * L))
        kinds += ["text"] * L
        frame_index += [-1] * L
        cell += [(-1, -1)] * L
        return TokenBatch(
            content=nx.concat(contents), extras=nx.concat(extra_rows), kinds=kinds,
            frame_index=np.array(frame_index), cell=np.array(cell),
        )

    def mask_tokens(self, batch: TokenBatch, rate: float, rng: np.random.Generator) -> TokenBatch:
        """Replace floor(rate * maskable) non-cls token contents by the mask embedding."""
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"mask rate must lie in [0, 1), got {rate}")
        maskable = np.array([i for i, k in enumerate(batch.kinds) if k != "cls"])
        count = int(math.floor(rate * len(maskable) + 1e-9))
        masked = np.zeros(len(batch), dtype=bool)
        if count == 0:
            return TokenBatch(batch.content, batch.extras, batch.kinds, batch.frame_index, batch.cell,
                              masked, batch.tokens)
        masked[np.sort(rng.choice(maskable, size=count, replace=False))] = True
        keep = np.repeat((~masked)[:, None].astype(np.float64), batch.content.shape[1], axis=1)
        swap = nx.mul_elementwise(Tensor(1.0 - keep), self.tables.mask)
        content = nx.add(nx.mul_elementwise(batch.content, Tensor(keep)), swap)
        tokens = nx.add(content, batch.extras)
        return TokenBatch(batch.content, batch.extras, batch.kinds, batch.frame_index, batch.cell, masked, tokens)

    # -- encoder and heads --------------------------------------------------

    def encode(self, batch: TokenBatch) -> Tensor:
        x = batch.tokens
        for layer in self.encoder:
            x = layer(x)
        return x

    def mfm_loss(self, f_out: Tensor, batch: TokenBatch) -> Tensor:
        """Squared L2 distance between reconstruction and (detached) pre-mask content, per element.

        Averaged over masked tokens and channels, so the scale does not grow
        with the model width.
        """
        idx = np.flatnonzero(batch.masked)
        if idx.size == 0:
            return Tensor(0.0)
        text_idx = [i for i in idx if batch.kinds[i] == "text"]
        video_idx = [i for i in idx if batch.kinds[i] in ("local", "global")]
        terms = []
        target = batch.content.detach()
        for rows, head in ((text_idx, self.mlp_t), (video_idx, self.mlp_v)):
            if rows:
                pred = head(nx.take(f_out, rows))
                terms.append(nx.sum_all(nx.l2_distance(pred, nx.take(target, rows))))
        total = terms[0] if len(terms) == 1 else nx.add(terms[0], terms[1])
        return nx.scale(total, 1.0 / (idx.size * f_out.shape[1]))

    def vtm_logit(self, f_out: Tensor) -> Tensor:
        return nx.reshape(self.vtm_head(nx.take(f_out, 0)), ())

    def vtm_prob(self, f_out: Tensor) -> float:
        return float(nx.sigmoid(self.vtm_logit(f_out).detach()).data)

    # -- decoder --------------------------------------------------------------

    def decode_boxes(self, f_out: Tensor, batch: TokenBatch, frames: list[int],
                     text: Tensor | None = None) -> list[BoxPrediction]:
        """K candidates per frame; each frame's queries see its own local tokens plus every non-local token.

        ``text`` (the pooled query feature) is projected and added to every
        decoder query when given.
        """
        K = self.queries.shape[0]
        F = len(frames)
        q_frames = np.repeat(np.asarray(frames), K)
        q = nx.add(nx.take(self.queries, np.tile(np.arange(K), F)), nx.take(self.tables.frame, q_frames))
        if text is not None:
            q = nx.add(q, self.query_text(text))
        same_frame = q_frames[:, None] == q_frames[None, :]
        self_bias = np.where(same_frame, 0.0, NEG)
        is_local = np.array([k == "local" for k in batch.kinds])
        visible = ~is_local[None, :] | (batch.frame_index[None, :] == q_frames[:, None])
        cross_bias = np.where(visible, 0.0, NEG)
        for layer in self.decoder:
            q = layer(q, f_out, self_bias, cross_bias)
        h = self.dec_norm(q)

        # reference point: soft-argmax over the frame's own cells
        pq = self.pointer_q(h)
        local_rows = {f: np.flatnonzero(is_local & (batch.frame_index == f)) for f in frames}
        width = h.shape[1]
        refs = []
        for j, f in enumerate(frames):
            rows = local_rows[f]
            keys = self.pointer_k(nx.take(f_out, rows))  # (G*G, C)
            logits = nx.scale(nx.matmul(nx.take(pq, slice(j * K, (j + 1) * K)), nx.permute(keys, (1, 0))),
                              1.0 / math.sqrt(width))
            cells = batch.cell[rows]
            centers = Tensor(self._centers[cells[:, 0] * self._grid + cells[:, 1]])
            refs.append(nx.matmul(nx.softmax_lastdim(logits), centers))  # (K, 2)
        ref = nx.concat(refs)  # (F*K, 2)
        ref_logit = nx.sub(nx.log(ref), nx.log(nx.sub(Tensor(np.ones(ref.shape)), ref)))
        delta = self.box_head(h)  # (F*K, 4)
        zeros = Tensor(np.zeros((F * K, 2)))
        boxes = nx.sigmoid(nx.add(delta, nx.concat([ref_logit, zeros], axis=1)))
        logits = nx.reshape(self.prob_head(h), (F * K,))

        out = []
        for j, f in enumerate(frames):
            b = nx.take(boxes, slice(j * K, (j + 1) * K))
            z = nx.take(logits, slice(j * K, (j + 1) * K))
            out.append(BoxPrediction(f, b.data.copy(), _sigmoid(z.data), b, z))
        return out


def select_box(pred: BoxPrediction) -> int:
    """Index of the most probable candidate; ties go to the lowest index."""
    return int(np.argmax(pred.probs))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))
