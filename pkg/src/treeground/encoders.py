"""Small trainable stand-ins for the image and text backbones."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from treeground import numerics as nx
from treeground.errors import ShapeError
from treeground.layers import EncoderLayer, Linear, Module, param
from treeground.numerics import Tensor


@dataclass
class FeatureGrid:
    frame_index: int
    features: Tensor  # (C, H, W)


@dataclass
class EncodedVideo:
    """Frame features in the two layouts the rest of the pipeline reads."""

    grids: Tensor  # (I, C, H, W)
    cells: Tensor  # (I, H*W, C), row-major cells

    @property
    def num_frames(self) -> int:
        return self.grids.shape[0]

    def feature_grids(self) -> list[FeatureGrid]:
        return [FeatureGrid(i, nx.take(self.grids, i)) for i in range(self.num_frames)]


@dataclass
class QueryFeatures:
    token_ids: tuple[int, ...]
    per_token: Tensor  # (L, C)
    pooled: Tensor  # (C,)


def space_to_depth(frames: np.ndarray, factor: int) -> np.ndarray:
    """(I, 3, Hp, Wp) -> (I, Hp/f, Wp/f, 3*f*f) patches, channel-major inside a patch."""
    n, c, h, w = frames.shape
    if h % factor or w % factor:
        raise ShapeError(f"frame size {h}x{w} is not divisible by patch factor {factor}")
    x = frames.reshape(n, c, h // factor, factor, w // factor, factor)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(n, h // factor, w // factor, c * factor * factor)


class FrameEncoder(Module):
    """Per-patch pointwise projection, ReLU, then a 3x3 same-padding convolution.

    With ``patch == 1`` the first stage is a plain 1x1 convolution over the
    three colour channels.
    """

    def __init__(self, rng: np.random.Generator, width: int, patch: int, in_channels: int = 3):
        self.patch = patch
        self.proj = Linear(rng, in_channels * patch * patch, width)
        self.conv = Linear(rng, 9 * width, width, std=1.0 / np.sqrt(9 * width))

    def __call__(self, frames: np.ndarray) -> EncodedVideo:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 4 or frames.shape[0] == 0:
            raise ShapeError(f"encode_frames: expected a non-empty (I, 3, H, W) stack, got {frames.shape}")
        patches = Tensor(space_to_depth(frames, self.patch))
        n, h, w, _ = patches.shape
        hidden = nx.relu(self.proj(patches))  # (I, H, W, C)
        cols = nx.unfold3x3(nx.permute(hidden, (0, 3, 1, 2)))  # (I, H, W, 9C)
        out = self.conv(cols)  # (I, H, W, C)
        c = out.shape[-1]
        return EncodedVideo(grids=nx.permute(out, (0, 3, 1, 2)), cells=nx.reshape(out, (n, h * w, c)))


class TextEncoder(Module):
    """Embedding table + learned positions + one self-attention block."""

    def __init__(self, rng: np.random.Generator, vocab: int, width: int, max_len: int, heads: int, ffn: int):
        self.vocab = vocab
        self.embed = param(rng, (vocab, width), std=1.0)
        self.positions = param(rng, (max_len, width), std=0.1)
        self.block = EncoderLayer(rng, width, heads, ffn)

    def __call__(self, token_ids) -> QueryFeatures:
        ids = tuple(int(t) for t in token_ids)
        if not ids:
            raise ShapeError("encode_query: empty query")
        if any(t < 0 or t >= self.vocab for t in ids):
            raise ShapeError(f"encode_query: token id out of vocabulary [0, {self.vocab}): {ids}")
        if len(ids) > self.positions.shape[0]:
            raise ShapeError(f"encode_query: query of {len(ids)} tokens exceeds max length {self.positions.shape[0]}")
        x = nx.add(nx.embed_lookup(self.embed, ids), nx.take(self.positions, slice(0, len(ids))))
        per_token = self.block(x)
        pooled = nx.mean_lastdim(nx.permute(per_token, (1, 0)))
        return QueryFeatures(ids, per_token, pooled)


def encode_frames(encoder: FrameEncoder, frames: np.ndarray) -> list[FeatureGrid]:
    return encoder(frames).feature_grids()


def encode_query(encoder: TextEncoder, token_ids) -> QueryFeatures:
    return encoder(token_ids)
