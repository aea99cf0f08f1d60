"""Synthetic grounding videos and the ITVD dataset container.

Each video shows one target patch whose colour ("signature") is named by
the query tokens, plus distractor patches with other signatures.  Some
frames are irrelevant: the target is absent there and has no box.  Exactly
one target-present frame carries the one-shot label.

ITVD layout (integers little-endian)::

    b"ITVD" | version u16 | manifest_len u32 | manifest utf-8 text |
    blocks...

    block: id, I, H, W, L, flags (u32 each; flags bit 0 = eval split)
           frames f64[I, 3, H, W]
           token ids u32[L]
           one-shot frame u32, one-shot box f64[4]
           presence bitmap u8[ceil(I / 8)] (bit i%8 of byte i//8 = frame i)
           boxes f64[4] for each present frame, in frame order
           signature count u32, signatures u32[count] (target first)

Manifest offsets are measured from the first byte after the manifest.
"""

from __future__ import annotations

import colorsys
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from treeground.config import DataConfig, RunConfig
from treeground.errors import DataError, UsageError

log = logging.getLogger(__name__)

MAGIC = b"ITVD"
VERSION = 1
Box = tuple[float, float, float, float]  # (x_min, y_min, x_max, y_max), normalised


class GroundTruth:
    """Per-frame boxes behind an accessor that counts every read.

    Training code must only ever touch the labeled frame; tests inspect
    ``reads`` to prove it.
    """

    def __init__(self, boxes: Sequence[Box | None]):
        self._boxes = list(boxes)
        self.reads: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._boxes)

    def __getitem__(self, frame: int) -> Box | None:
        self.reads[frame] = self.reads.get(frame, 0) + 1
        return self._boxes[frame]

    def present(self) -> list[bool]:
        """Presence flags only; reading them is not a label read."""
        return [b is not None for b in self._boxes]

    def unsealed(self) -> list[Box | None]:
        return list(self._boxes)


@dataclass
class VideoSample:
    video_id: int
    frames: np.ndarray  # (I, 3, H, W)
    query: tuple[int, ...]
    one_shot_frame: int
    one_shot_box: Box
    gt: GroundTruth
    signatures: tuple[int, ...]  # target first, then distractors
    split: str = "train"

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def target_signature(self) -> int:
        return self.signatures[0]

    @property
    def irrelevant(self) -> list[bool]:
        return [not p for p in self.gt.present()]


@dataclass
class Dataset:
    config: DataConfig
    seed: int
    videos: list[VideoSample] = field(default_factory=list)

    def split(self, name: str) -> list[VideoSample]:
        return [v for v in self.videos if v.split == name]

    def by_id(self, video_id: int) -> VideoSample:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise DataError(f"no video with id {video_id}")


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def signature_colors(count: int) -> np.ndarray:
    """Evenly spaced fully saturated hues, one RGB row per signature."""
    return np.array([colorsys.hsv_to_rgb(k / count, 1.0, 1.0) for k in range(count)])


def query_capacity(vocab: int) -> int:
    return (vocab - 1) // 2


def encode_query(signature: int, cfg: DataConfig) -> tuple[int, ...]:
    """2-4 tokens; the first names the signature, the rest are fixed filler per signature."""
    if signature >= query_capacity(cfg.vocab):
        raise UsageError(f"signature {signature} does not fit a vocabulary of {cfg.vocab}")
    length = 2 + signature % 3
    base = 1 + query_capacity(cfg.vocab)
    span = cfg.vocab - base
    return (1 + signature,) + tuple(base + (signature * 5 + j) % span for j in range(length - 1))


def decode_query(tokens: Sequence[int]) -> int:
    return tokens[0] - 1


def one_shot_select(present: Sequence[bool], rng: np.random.Generator) -> int:
    choices = [i for i, p in enumerate(present) if p]
    if not choices:
        raise DataError("target never present; video cannot carry a one-shot label")
    return choices[int(rng.integers(len(choices)))]


def _validate(cfg: DataConfig) -> None:
    if cfg.signatures > query_capacity(cfg.vocab):
        raise UsageError(f"{cfg.signatures} signatures exceed the capacity {query_capacity(cfg.vocab)} of vocab {cfg.vocab}")
    if cfg.signatures < 1 or cfg.frames < 1:
        raise UsageError("need at least one signature and one frame")
    if cfg.distractors_max > cfg.signatures - 1 and cfg.distractors_max > 0:
        raise UsageError("distractors need distinct signatures: distractors_max must be < signatures")
    if not 0 <= cfg.distractors_min <= cfg.distractors_max:
        raise UsageError("need 0 <= distractors_min <= distractors_max")
    if not 0.0 <= cfg.irrelevant_prob <= 1.0:
        raise UsageError("irrelevant_prob must lie in [0, 1]")
    if not 1 <= cfg.object_min <= cfg.object_max <= min(cfg.height, cfg.width):
        raise UsageError("object size bounds must satisfy 1 <= object_min <= object_max <= frame size")


def _trajectory(rng: np.random.Generator, cfg: DataConfig, frames: int) -> list[tuple[int, int, int, int]]:
    """Integer pixel rectangles (x0, y0, w, h): linear motion plus jitter, reflected at the border."""
    w = int(rng.integers(cfg.object_min, cfg.object_max + 1))
    h = int(rng.integers(cfg.object_min, cfg.object_max + 1))
    x = rng.uniform(0, cfg.width - w)
    y = rng.uniform(0, cfg.height - h)
    vx, vy = rng.uniform(-cfg.max_speed, cfg.max_speed, size=2)
    rects = []
    for _ in range(frames):
        rects.append((int(round(x)), int(round(y)), w, h))
        x += vx + rng.normal(0, cfg.motion_noise)
        y += vy + rng.normal(0, cfg.motion_noise)
        if not 0 <= x <= cfg.width - w:
            vx = -vx
            x = min(max(x, 0.0), cfg.width - w)
        if not 0 <= y <= cfg.height - h:
            vy = -vy
            y = min(max(y, 0.0), cfg.height - h)
    return rects


def generate_video(video_id: int, cfg: DataConfig, seed: int, split: str = "train") -> VideoSample:
    rng = np.random.default_rng(np.random.SeedSequence([seed, video_id]))
    colors = signature_colors(cfg.signatures)
    target = int(rng.integers(cfg.signatures))
    n_dis = int(rng.integers(cfg.distractors_min, cfg.distractors_max + 1))
    others = [s for s in range(cfg.signatures) if s != target]
    distractors = [int(s) for s in rng.permutation(others)[:n_dis]]

    present = [bool(rng.random() >= cfg.irrelevant_prob) for _ in range(cfg.frames)]
    if not any(present):
        present[int(rng.integers(cfg.frames))] = True
    labeled = one_shot_select(present, rng)

    frames = rng.normal(0.0, cfg.pixel_noise, size=(cfg.frames, 3, cfg.height, cfg.width))
    for sig in distractors:
        for i, (x0, y0, w, h) in enumerate(_trajectory(rng, cfg, cfg.frames)):
            frames[i, :, y0:y0 + h, x0:x0 + w] = colors[sig][:, None, None]
    boxes: list[Box | None] = []
    for i, (x0, y0, w, h) in enumerate(_trajectory(rng, cfg, cfg.frames)):
        if present[i]:
            frames[i, :, y0:y0 + h, x0:x0 + w] = colors[target][:, None, None]
            boxes.append((x0 / cfg.width, y0 / cfg.height, (x0 + w) / cfg.width, (y0 + h) / cfg.height))
        else:
            boxes.append(None)

    return VideoSample(
        video_id=video_id,
        frames=frames,
        query=encode_query(target, cfg),
        one_shot_frame=labeled,
        one_shot_box=boxes[labeled],
        gt=GroundTruth(boxes),
        signatures=(target, *distractors),
        split=split,
    )


def generate_dataset(cfg: DataConfig, seed: int | None = None) -> Dataset:
    _validate(cfg)
    seed = cfg.seed if seed is None else seed
    videos = [generate_video(i, cfg, seed, "train") for i in range(cfg.num_train)]
    videos += [generate_video(cfg.num_train + i, cfg, seed, "eval") for i in range(cfg.num_eval)]
    return Dataset(config=cfg, seed=seed, videos=videos)


# ---------------------------------------------------------------------------
# ITVD container
# ---------------------------------------------------------------------------


def _encode_block(v: VideoSample) -> bytes:
    n, c, h, w = v.frames.shape
    flags = 1 if v.split == "eval" else 0
    present = v.gt.present()
    bitmap = bytearray((n + 7) // 8)
    for i, p in enumerate(present):
        if p:
            bitmap[i // 8] |= 1 << (i % 8)
    parts = [
        struct.pack("<6I", v.video_id, n, h, w, len(v.query), flags),
        np.ascontiguousarray(v.frames, dtype="<f8").tobytes(),
        struct.pack(f"<{len(v.query)}I", *v.query),
        struct.pack("<I4d", v.one_shot_frame, *v.one_shot_box),
        bytes(bitmap),
    ]
    for box in v.gt.unsealed():
        if box is not None:
            parts.append(struct.pack("<4d", *box))
    parts.append(struct.pack(f"<I{len(v.signatures)}I", len(v.signatures), *v.signatures))
    return b"".join(parts)


def _manifest(ds: Dataset, offsets: Sequence[int]) -> str:
    cfg_text = RunConfig(data=ds.config).section_text("data")
    lines = [
        f"format_version={VERSION}",
        f"seed={ds.seed}",
        f"config_hash={hashlib.sha256(cfg_text.encode()).hexdigest()[:16]}",
        f"count.train={len(ds.split('train'))}",
        f"count.eval={len(ds.split('eval'))}",
        "offsets=" + ",".join(str(o) for o in offsets),
    ]
    lines += [f"config.{line.replace(' = ', '=')}" for line in cfg_text.splitlines()]
    return "\n".join(lines) + "\n"


def encode_dataset(ds: Dataset) -> bytes:
    blocks = [_encode_block(v) for v in ds.videos]
    offsets, pos = [], 0
    for b in blocks:
        offsets.append(pos)
        pos += len(b)
    manifest = _manifest(ds, offsets).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<HI", VERSION, len(manifest)), manifest, *blocks])


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.blob):
            raise DataError(f"truncated ITVD file: {what} at offset {self.pos} needs {size} bytes, "
                            f"{len(self.blob) - self.pos} left")
        out = self.blob[self.pos:self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        key, _, value = line.partition("=")
        out[key] = value
    return out


def decode_dataset(blob: bytes) -> Dataset:
    if blob[:4] != MAGIC:
        raise DataError(f"bad magic {blob[:4]!r}: not an ITVD file (expected {MAGIC!r})")
    r = _Reader(blob)
    r.take(4, "magic")
    version, mlen = r.unpack("<HI", "header")
    if version != VERSION:
        raise DataError(f"unsupported ITVD version {version}")
    manifest = parse_manifest(r.take(mlen, "manifest").decode("utf-8"))
    cfg_values = {k[len("config."):]: v for k, v in manifest.items() if k.startswith("config.")}
    try:
        cfg = RunConfig().update(cfg_values).data
        seed = int(manifest["seed"])
        offsets = [int(o) for o in manifest["offsets"].split(",") if o]
    except (KeyError, ValueError, UsageError) as exc:
        raise DataError(f"malformed ITVD manifest: {exc}") from None
    cfg_text = RunConfig(data=cfg).section_text("data")
    if manifest.get("config_hash") != hashlib.sha256(cfg_text.encode()).hexdigest()[:16]:
        raise DataError("ITVD manifest config hash does not match its config")

    base = r.pos
    videos = []
    for k, expected in enumerate(offsets):
        if r.pos - base != expected:
            raise DataError(f"block {k} found at offset {r.pos - base}, manifest says {expected}")
        vid, n, h, w, L, flags = r.unpack("<6I", f"block {k} header")
        frames = np.frombuffer(r.take(8 * n * 3 * h * w, f"block {k} frames"), dtype="<f8")
        frames = frames.reshape(n, 3, h, w).astype(np.float64)
        query = r.unpack(f"<{L}I", f"block {k} tokens")
        shot = r.unpack("<I4d", f"block {k} one-shot record")
        bitmap = r.take((n + 7) // 8, f"block {k} presence bitmap")
        boxes: list[Box | None] = []
        for i in range(n):
            if bitmap[i // 8] >> (i % 8) & 1:
                boxes.append(r.unpack("<4d", f"block {k} box {i}"))
            else:
                boxes.append(None)
        (ns,) = r.unpack("<I", f"block {k} signature count")
        sigs = r.unpack(f"<{ns}I", f"block {k} signatures")
        videos.append(VideoSample(
            video_id=vid, frames=frames, query=tuple(query), one_shot_frame=shot[0],
            one_shot_box=tuple(shot[1:]), gt=GroundTruth(boxes), signatures=tuple(sigs),
            split="eval" if flags & 1 else "train",
        ))
    if r.pos != len(blob):
        raise DataError(f"trailing bytes after offset {r.pos}")
    return Dataset(config=cfg, seed=seed, videos=videos)


def write_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def read_dataset(path: str | Path) -> Dataset:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None
    return decode_dataset(blob)


def manifest_of(path_or_blob) -> dict[str, str]:
    blob = path_or_blob if isinstance(path_or_blob, bytes) else Path(path_or_blob).read_bytes()
    (mlen,) = struct.unpack_from("<I", blob, 6)
    return parse_manifest(blob[10:10 + mlen].decode("utf-8"))

