"""Packed binary codes and the two-layer search over them: global top-K by
Hamming distance, then sliding-window local matching over cached feature
maps. Also owns the code-db file format and the mAP evaluator.

Packing convention: code bit i lives in 64-bit word i // 64 at bit
position i % 64 (LSB first); +1 maps to 1, -1 to 0, pad bits stay 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

CODE_MAGIC = b"HMARCODE"
CODE_VERSION = 1

WINDOW_STRIDE = 5
FEATURE_DOWNSAMPLE = 4


class IndexError_(ValueError):
    """Raised for malformed code sets or empty databases."""


@dataclass
class BoundingBox:
    """Pixel-space ROI [x1, x2) x [y1, y2)."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box [{self.x1},{self.y1},{self.x2},{self.y2}]")
        if self.x1 < 0 or self.y1 < 0:
            raise ValueError(f"negative box origin [{self.x1},{self.y1}]")

    def validate_within(self, width: int, height: int) -> None:
        if self.x2 > width or self.y2 > height:
            raise ValueError(f"box [{self.x1},{self.y1},{self.x2},{self.y2}] exceeds "
                             f"image bounds {width}x{height}")

    def as_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass
class FeatureBox:
    """Feature-map-space window [fx1, fx2) x [fy1, fy2)."""

    fx1: int
    fy1: int
    fx2: int
    fy2: int

    @property
    def width(self) -> int:
        return self.fx2 - self.fx1

    @property
    def height(self) -> int:
        return self.fy2 - self.fy1


@dataclass
class WindowMatch:
    """Best local window of one candidate: feature origin, integer Hamming
    score, and the pixel-space box for UI overlay."""

    candidate_id: int
    origin: tuple[int, int]  # (row, col) in feature space
    score: int
    pixel_box: list[int]


@dataclass
class RetrievalResult:
    """Ranked candidates; distances non-decreasing, ties by ascending id."""

    ids: np.ndarray
    distances: np.ndarray
    windows: list[WindowMatch] | None = None
    query_id: int | None = None


@dataclass
class PackedCodeSet:
    """Bit-packed codes for N images: [N, ceil(q/64)] uint64 words + ids."""

    bits: int
    words: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.words = np.ascontiguousarray(self.words, dtype=np.uint64)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        if self.words.ndim != 2 or self.words.shape[1] != words_per_code(self.bits):
            raise IndexError_(f"words shape {self.words.shape} wrong for q={self.bits}")
        if self.words.shape[0] != self.ids.shape[0]:
            raise IndexError_(f"{self.words.shape[0]} codes vs {self.ids.shape[0]} ids")

    @property
    def count(self) -> int:
        return self.words.shape[0]


def words_per_code(bits: int) -> int:
    return (bits + 63) // 64


def pack_signs(signs: np.ndarray, bits: int | None = None) -> np.ndarray:
    """[N, q] array of +-1 -> [N, ceil(q/64)] uint64 words."""
    signs = np.atleast_2d(np.asarray(signs))
    n, q = signs.shape
    if bits is None:
        bits = q
    if q != bits:
        raise IndexError_(f"sign rows of length {q}, expected {bits}")
    nw = words_per_code(bits)
    padded = np.zeros((n, nw * 64), dtype=np.uint64)
    padded[:, :q] = (signs > 0).astype(np.uint64)
    shifts = (np.arange(nw * 64, dtype=np.uint64) % np.uint64(64))
    words = (padded << shifts).reshape(n, nw, 64).sum(axis=2, dtype=np.uint64)
    return words


def unpack_words(words: np.ndarray, bits: int) -> np.ndarray:
    """Inverse of pack_signs: words -> [N, q] array of +-1 (int8)."""
    words = np.atleast_2d(np.asarray(words, dtype=np.uint64))
    n, nw = words.shape
    shifts = (np.arange(nw * 64, dtype=np.uint64) % np.uint64(64))
    bitsarr = ((words[:, :, None] >> shifts.reshape(1, nw, 64)) & np.uint64(1))
    flat = bitsarr.reshape(n, nw * 64)[:, :bits]
    return np.where(flat > 0, 1, -1).astype(np.int8)


def pack_code_set(signs: np.ndarray, ids: Sequence[int], bits: int) -> PackedCodeSet:
    return PackedCodeSet(bits=bits, words=pack_signs(signs, bits), ids=np.asarray(ids))


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    """Popcount of XOR between two packed codes of equal word length."""
    a = np.asarray(a, dtype=np.uint64).reshape(-1)
    b = np.asarray(b, dtype=np.uint64).reshape(-1)
    if a.shape != b.shape:
        raise IndexError_(f"packed length mismatch: {a.shape} vs {b.shape}")
    return int(np.bitwise_count(a ^ b).sum())


def hamming_many(query: np.ndarray, words: np.ndarray) -> np.ndarray:
    """Distances from one packed query to every row of a packed matrix."""
    query = np.asarray(query, dtype=np.uint64).reshape(1, -1)
    if words.shape[1] != query.shape[1]:
        raise IndexError_(f"packed length mismatch: {words.shape} vs {query.shape}")
    return np.bitwise_count(words ^ query).sum(axis=1).astype(np.int64)


def top_k_global(query_words: np.ndarray, db: PackedCodeSet, k: int) -> RetrievalResult:
    """K nearest codes by Hamming distance, ascending, ties by ascending id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if db.count == 0:
        raise IndexError_("empty code database")
    dists = hamming_many(query_words, db.words)
    order = np.lexsort((db.ids, dists))
    take = order[:min(k, db.count)]
    return RetrievalResult(ids=db.ids[take].copy(), distances=dists[take].copy())


def map_box_to_feature(box: BoundingBox, factor: int = FEATURE_DOWNSAMPLE) -> FeatureBox:
    """Pixel box -> feature-map box: floor the origin, ceil the extent."""
    fb = FeatureBox(
        fx1=box.x1 // factor,
        fy1=box.y1 // factor,
        fx2=-(-box.x2 // factor),
        fy2=-(-box.y2 // factor),
    )
    if fb.width <= 0 or fb.height <= 0:
        raise ValueError(f"mapped box empty: {fb}")
    return fb


def window_origins(extent: int, win: int, stride: int = WINDOW_STRIDE) -> list[int]:
    """Stride-multiple origins plus the flush-edge origin so the far edge is
    always reachable."""
    if win > extent:
        raise ValueError(f"window {win} larger than extent {extent}")
    last = extent - win
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def sliding_window_match(query_words: np.ndarray, candidate_id: int,
                         fmap: np.ndarray, window_hw: tuple[int, int],
                         encode_windows: Callable[[np.ndarray, list[tuple[int, int]], tuple[int, int]], np.ndarray],
                         stride: int = WINDOW_STRIDE,
                         pixel_box_size: tuple[int, int] | None = None) -> WindowMatch:
    """Scan same-sized windows over a candidate's feature map and return the
    minimum-Hamming window, ties broken by row-major earliest origin.

    `encode_windows(fmap, origins, window_hw)` must return packed uint64
    words, one row per origin, produced by the local hash head.
    """
    wh, ww = window_hw
    c, h, w = fmap.shape
    if wh > h or ww > w:
        raise ValueError(f"window {window_hw} larger than feature map {(h, w)}")
    rows = window_origins(h, wh, stride)
    cols = window_origins(w, ww, stride)
    origins = [(i, j) for i in rows for j in cols]  # row-major order
    words = encode_windows(fmap, origins, window_hw)
    scores = np.bitwise_count(words ^ np.asarray(query_words, dtype=np.uint64).reshape(1, -1)).sum(axis=1)
    best = int(np.argmin(scores))  # argmin takes the first minimum: row-major earliest
    oi, oj = origins[best]
    if pixel_box_size is None:
        pw, ph = ww * FEATURE_DOWNSAMPLE, wh * FEATURE_DOWNSAMPLE
    else:
        pw, ph = pixel_box_size
    px, py = oj * FEATURE_DOWNSAMPLE, oi * FEATURE_DOWNSAMPLE
    return WindowMatch(candidate_id=int(candidate_id), origin=(oi, oj),
                       score=int(scores[best]), pixel_box=[px, py, px + pw, py + ph])


def local_rerank(query_words: np.ndarray, candidates: RetrievalResult, n: int,
                 fmap_for: Callable[[int], np.ndarray], window_hw: tuple[int, int],
                 encode_windows, stride: int = WINDOW_STRIDE,
                 pixel_box_size: tuple[int, int] | None = None) -> RetrievalResult:
    """Score each global candidate by its best window and keep the n best,
    ascending score, ties by ascending id."""
    matches = []
    for cid in candidates.ids:
        fmap = fmap_for(int(cid))
        matches.append(sliding_window_match(query_words, int(cid), fmap, window_hw,
                                            encode_windows, stride, pixel_box_size))
    scores = np.array([m.score for m in matches], dtype=np.int64)
    ids = np.array([m.candidate_id for m in matches], dtype=np.uint64)
    order = np.lexsort((ids, scores))
    take = order[:min(n, len(matches))]
    return RetrievalResult(ids=ids[take].copy(), distances=scores[take].copy(),
                           windows=[matches[i] for i in take])


def compute_map(query_words: np.ndarray, query_labels: np.ndarray,
                db: PackedCodeSet, db_labels: np.ndarray,
                top_k_eval: int | None = None) -> float:
    """Mean average precision with relevance = label inner product > 0.

    Labels are one-hot or multi-hot rows. AP_i sums Precision@k over
    relevant ranks in the top-K, divided by the total number of relevant
    database items; zero-relevant queries contribute AP 0 and are counted.
    """
    if db.count == 0:
        raise IndexError_("empty code database")
    query_words = np.atleast_2d(np.asarray(query_words, dtype=np.uint64))
    query_labels = np.atleast_2d(np.asarray(query_labels))
    db_labels = np.atleast_2d(np.asarray(db_labels))
    if db_labels.shape[0] != db.count:
        raise ValueError(f"{db.count} codes vs {db_labels.shape[0]} labels")
    k = db.count if top_k_eval is None else min(top_k_eval, db.count)
    aps = []
    for qi in range(query_words.shape[0]):
        dists = hamming_many(query_words[qi], db.words)
        order = np.lexsort((db.ids, dists))[:k]
        rel_all = (db_labels @ query_labels[qi]) > 0
        total_rel = int(rel_all.sum())
        if total_rel == 0:
            aps.append(0.0)
            continue
        rel_ranked = rel_all[order]
        hits = np.cumsum(rel_ranked)
        precision_at = hits / np.arange(1, k + 1)
        aps.append(float((precision_at * rel_ranked).sum() / total_rel))
    return float(np.mean(aps))


def save_codes(path, pcs: PackedCodeSet) -> None:
    """Write the code-db file: magic, version u16, q u16, N u64, words, ids
    (all little-endian)."""
    with open(path, "wb") as f:
        f.write(CODE_MAGIC)
        f.write(struct.pack("<HHQ", CODE_VERSION, pcs.bits, pcs.count))
        f.write(pcs.words.astype("<u8").tobytes(order="C"))
        f.write(pcs.ids.astype("<u8").tobytes(order="C"))


def load_codes(path) -> PackedCodeSet:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CODE_MAGIC:
            raise IndexError_(f"bad magic {magic!r}, expected {CODE_MAGIC!r}")
        version, bits, count = struct.unpack("<HHQ", f.read(12))
        if version != CODE_VERSION:
            raise IndexError_(f"unsupported code-db version {version}")
        nw = words_per_code(bits)
        words = np.frombuffer(f.read(count * nw * 8), dtype="<u8").reshape(count, nw)
        ids = np.frombuffer(f.read(count * 8), dtype="<u8")
        rest = f.read()
        if rest:
            raise IndexError_(f"{len(rest)} trailing bytes in code-db file")
    return PackedCodeSet(bits=bits, words=words.copy(), ids=ids.copy())
