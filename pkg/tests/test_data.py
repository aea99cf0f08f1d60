import struct

import numpy as np
import pytest

from treeground.config import DataConfig
from treeground.data import (
    MAGIC,
    decode_dataset,
    decode_query,
    encode_dataset,
    encode_query,
    generate_dataset,
    manifest_of,
    one_shot_select,
    query_capacity,
    read_dataset,
    signature_colors,
    write_dataset,
)
from treeground.errors import DataError, UsageError


def small(**kw) -> DataConfig:
    base = dict(num_train=3, num_eval=2, frames=6, height=16, width=16, object_min=4, object_max=7)
    base.update(kw)
    return DataConfig(**base)


def target_mask(frame: np.ndarray, color: np.ndarray) -> np.ndarray:
    return np.all(frame == color[:, None, None], axis=0)


# -- generation ---------------------------------------------------------------------


def test_no_distractors_no_irrelevant_frames():
    cfg = small(distractors_min=0, distractors_max=0, irrelevant_prob=0.0)
    colors = signature_colors(cfg.signatures)
    for v in generate_dataset(cfg).videos:
        assert v.signatures == (v.target_signature,)
        boxes = v.gt.unsealed()
        assert all(b is not None for b in boxes)
        for frame, box in zip(v.frames, boxes):
            inside = target_mask(frame, colors[v.target_signature])
            x0, y0, x1, y1 = (round(c * 16) for c in box)
            expected = np.zeros((16, 16), bool)
            expected[y0:y1, x0:x1] = True
            assert np.array_equal(inside, expected)
            for other, col in enumerate(colors):
                if other != v.target_signature:
                    assert not target_mask(frame, col).any()


def test_all_irrelevant_except_label():
    cfg = small(irrelevant_prob=1.0)
    for v in generate_dataset(cfg).videos:
        present = v.gt.present()
        assert present.count(True) == 1
        assert present[v.one_shot_frame]


def test_same_seed_same_bytes():
    cfg = small()
    assert encode_dataset(generate_dataset(cfg, 7)) == encode_dataset(generate_dataset(cfg, 7))
    assert encode_dataset(generate_dataset(cfg, 7)) != encode_dataset(generate_dataset(cfg, 8))


def test_video_invariants_default_config():
    cfg = DataConfig(num_train=40, num_eval=10)
    cell = 1 / 8
    colors = signature_colors(cfg.signatures)
    ds = generate_dataset(cfg)
    assert len(ds.split("train")) == 40 and len(ds.split("eval")) == 10
    for v in ds.videos:
        assert v.gt.present()[v.one_shot_frame]
        assert v.one_shot_box == v.gt.unsealed()[v.one_shot_frame]
        assert 2 <= len(v.query) <= 4
        assert decode_query(v.query) == v.target_signature
        assert len(set(v.signatures)) == len(v.signatures)
        for frame, box in zip(v.frames, v.gt.unsealed()):
            if box is None:
                assert not target_mask(frame, colors[v.target_signature]).any()
                continue
            x0, y0, x1, y1 = box
            assert 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1
            assert x1 - x0 >= cell and y1 - y0 >= cell


def test_query_encoding_is_bijective():
    cfg = DataConfig(vocab=64, signatures=31)
    queries = [encode_query(s, cfg) for s in range(query_capacity(64))]
    assert len(set(queries)) == len(queries)
    assert [decode_query(q) for q in queries] == list(range(len(queries)))
    assert all(0 <= t < 64 for q in queries for t in q)


def test_too_many_signatures_rejected():
    with pytest.raises(UsageError):
        generate_dataset(DataConfig(vocab=8, signatures=4))


# -- one-shot selection -------------------------------------------------------------


def test_one_shot_select_cases():
    rng = np.random.default_rng(0)
    assert one_shot_select([False, False, True, False], rng) == 2
    a = one_shot_select([True] * 8, np.random.default_rng(5))
    assert a == one_shot_select([True] * 8, np.random.default_rng(5))
    with pytest.raises(DataError):
        one_shot_select([False, False], rng)


def test_one_shot_select_is_uniform():
    rng = np.random.default_rng(1)
    counts = np.bincount([one_shot_select([True] * 8, rng) for _ in range(10_000)], minlength=8)
    assert np.all(np.abs(counts - 1250) <= 0.2 * 1250)


# -- container ----------------------------------------------------------------------


def test_round_trip_byte_exact(tmp_path):
    ds = generate_dataset(small())
    write_dataset(ds, tmp_path / "a.itvd")
    back = read_dataset(tmp_path / "a.itvd")
    write_dataset(back, tmp_path / "b.itvd")
    assert (tmp_path / "a.itvd").read_bytes() == (tmp_path / "b.itvd").read_bytes()
    for v, w in zip(ds.videos, back.videos):
        assert np.array_equal(v.frames, w.frames)
        assert v.gt.unsealed() == w.gt.unsealed() and v.split == w.split


def test_bad_magic_and_truncation():
    blob = encode_dataset(generate_dataset(small(num_train=2, num_eval=1)))
    with pytest.raises(DataError, match="magic"):
        decode_dataset(b"ITVX" + blob[4:])
    with pytest.raises(DataError, match=r"offset \d+"):
        decode_dataset(blob[:-100])
    with pytest.raises(DataError, match="version"):
        decode_dataset(MAGIC + struct.pack("<H", 9) + blob[6:])


def test_manifest_offsets_match_block_scan():
    cfg = small(num_train=2, num_eval=1)
    ds = generate_dataset(cfg)
    blob = encode_dataset(ds)
    manifest = manifest_of(blob)
    (mlen,) = struct.unpack_from("<I", blob, 6)
    base = 10 + mlen
    # scan: walk blocks using only their headers and the documented layout
    found, pos = [], base
    while pos < len(blob):
        vid, n, h, w, L, flags = struct.unpack_from("<6I", blob, pos)
        found.append((pos - base, vid))
        pos += 24 + 8 * n * 3 * h * w + 4 * L + 4 + 32
        bitmap = blob[pos:pos + (n + 7) // 8]
        pos += (n + 7) // 8 + 32 * sum(bitmap[i // 8] >> (i % 8) & 1 for i in range(n))
        (ns,) = struct.unpack_from("<I", blob, pos)
        pos += 4 + 4 * ns
    assert pos == len(blob)
    assert [o for o, _ in found] == [int(x) for x in manifest["offsets"].split(",")]
    assert [v for _, v in found] == [v.video_id for v in ds.videos]
    offsets = [o for o, _ in found]
    assert offsets == sorted(set(offsets))
    assert manifest["count.train"] == "2" and manifest["count.eval"] == "1"


def test_manifest_hash_checked():
    blob = encode_dataset(generate_dataset(small(num_train=1, num_eval=0)))
    tampered = blob.replace(b"config.data.seed=0", b"config.data.seed=1")
    assert tampered != blob
    with pytest.raises(DataError, match="hash"):
        decode_dataset(tampered)
