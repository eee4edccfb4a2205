"""Pseudogradient codecs, error feedback and the simulated collective.

Codecs operate on 2-D float64 matrices. ``logical_bytes`` on an encoded
delta is the modeled wire size: fp32 values and metadata, bit-packed
quantization indices and top-k indices of ``ceil(log2(m*n))`` bits. The
binary dump format (:meth:`EncodedDelta.to_bytes`) keeps float64 reals so
that a dump decodes bit-exactly; it is for diffing runs, not for sizing.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from muloco.linalg import as_matrix
from muloco.outer_optim import mean_in_order

KINDS = ("none", "topk", "quant")
SCHEMES = ("linear", "statistical")
GRANULARITIES = ("global", "rowwise")
VALUE_BYTES = 4
LLOYD_MAX_ITERS = 50

_HEADER = struct.Struct("<BBBBII")


@dataclass(frozen=True)
class CompressorSpec:
    kind: str = "none"
    k_pct: float | None = None
    bits: int | None = None
    scheme: str | None = None
    granularity: str | None = None
    error_feedback: bool = False
    ef_beta: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown compressor kind {self.kind!r}")
        quant_fields = (self.bits, self.scheme, self.granularity)
        if self.kind == "topk":
            if self.k_pct is None or not 0.0 < self.k_pct <= 100.0:
                raise ValueError("topk needs k_pct in (0, 100]")
            if any(f is not None for f in quant_fields):
                raise ValueError("topk spec must not set quantization fields")
        elif self.kind == "quant":
            if self.k_pct is not None:
                raise ValueError("quant spec must not set k_pct")
            if self.bits not in (2, 4, 8):
                raise ValueError("quant bits must be 2, 4 or 8")
            if self.scheme not in SCHEMES:
                raise ValueError(f"quant scheme must be one of {SCHEMES}")
            if self.granularity not in GRANULARITIES:
                raise ValueError(f"quant granularity must be one of {GRANULARITIES}")
        else:
            if self.k_pct is not None or any(f is not None for f in quant_fields):
                raise ValueError("'none' spec takes no codec fields")
        if not 0.0 <= self.ef_beta <= 1.0:
            raise ValueError("ef_beta must lie in [0, 1]")

    @classmethod
    def none(cls) -> "CompressorSpec":
        return cls()

    @classmethod
    def topk(cls, k_pct: float, error_feedback: bool = False, ef_beta: float = 1.0) -> "CompressorSpec":
        return cls("topk", k_pct=k_pct, error_feedback=error_feedback, ef_beta=ef_beta)

    @classmethod
    def quant(cls, bits: int, scheme: str = "linear", granularity: str = "global",
              error_feedback: bool = False, ef_beta: float = 1.0) -> "CompressorSpec":
        return cls("quant", bits=bits, scheme=scheme, granularity=granularity,
                   error_feedback=error_feedback, ef_beta=ef_beta)


@dataclass(frozen=True)
class EncodedDelta:
    kind: str
    shape: tuple[int, int]
    logical_bytes: int
    values: np.ndarray | None = None        # none: dense values; topk: kept values
    indices: np.ndarray | None = None       # topk: flat indices; quant: level indices
    codebooks: np.ndarray | None = None     # quant: (groups, n_levels) levels
    bits: int = 0
    scheme: str | None = None
    granularity: str | None = None

    def decode(self) -> np.ndarray:
        if self.kind == "none":
            return self.values.reshape(self.shape).copy()
        if self.kind == "topk":
            return topk_decode(self)
        return quant_decode(self)

    def to_bytes(self) -> bytes:
        rows, cols = self.shape
        head = _HEADER.pack(KINDS.index(self.kind), self.bits,
                            SCHEMES.index(self.scheme) if self.scheme else 0,
                            GRANULARITIES.index(self.granularity) if self.granularity else 0,
                            rows, cols)
        if self.kind == "none":
            body = self.values.astype("<f8").tobytes()
        elif self.kind == "topk":
            body = (struct.pack("<I", self.indices.size) + self.indices.astype("<u4").tobytes()
                    + self.values.astype("<f8").tobytes())
        else:
            groups, levels = self.codebooks.shape
            body = (struct.pack("<II", groups, levels) + self.codebooks.astype("<f8").tobytes()
                    + _pack_indices(self.indices, self.bits))
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EncodedDelta":
        kind_i, bits, scheme_i, gran_i, rows, cols = _HEADER.unpack_from(blob, 0)
        off = _HEADER.size
        kind = KINDS[kind_i]
        n = rows * cols
        if kind == "none":
            values = np.frombuffer(blob, "<f8", n, off).astype(np.float64)
            return cls("none", (rows, cols), VALUE_BYTES * n, values=values)
        if kind == "topk":
            (count,) = struct.unpack_from("<I", blob, off)
            off += 4
            idx = np.frombuffer(blob, "<u4", count, off).astype(np.int64)
            off += 4 * count
            values = np.frombuffer(blob, "<f8", count, off).astype(np.float64)
            return cls("topk", (rows, cols), _topk_bytes(count, n), values=values, indices=idx)
        groups, levels = struct.unpack_from("<II", blob, off)
        off += 8
        books = np.frombuffer(blob, "<f8", groups * levels, off).astype(np.float64).reshape(groups, levels)
        off += 8 * groups * levels
        idx = _unpack_indices(blob[off:], bits, n).reshape(rows, cols)
        scheme, gran = SCHEMES[scheme_i], GRANULARITIES[gran_i]
        return cls("quant", (rows, cols), _quant_bytes(bits, scheme, rows, cols, gran),
                   indices=idx, codebooks=books, bits=bits, scheme=scheme, granularity=gran)


def _pack_indices(idx: np.ndarray, bits: int) -> bytes:
    flat = idx.reshape(-1).astype(np.uint8)
    bit_matrix = ((flat[:, None] >> np.arange(bits, dtype=np.uint8)) & 1).astype(np.uint8)
    return np.packbits(bit_matrix.reshape(-1), bitorder="little").tobytes()


def _unpack_indices(raw: bytes, bits: int, n: int) -> np.ndarray:
    bit_arr = np.unpackbits(np.frombuffer(raw, np.uint8), bitorder="little")[: n * bits]
    weights = (1 << np.arange(bits)).astype(np.int64)
    return (bit_arr.reshape(n, bits).astype(np.int64) * weights).sum(axis=1)


def index_bits(numel: int) -> int:
    return max(1, math.ceil(math.log2(numel))) if numel > 1 else 1


def _topk_bytes(count: int, numel: int) -> int:
    return VALUE_BYTES * count + math.ceil(count * index_bits(numel) / 8)


def _quant_bytes(bits: int, scheme: str, rows: int, cols: int, granularity: str) -> int:
    groups = rows if granularity == "rowwise" else 1
    per_group = 2 if scheme == "linear" else 2 ** bits
    return math.ceil(bits * rows * cols / 8) + VALUE_BYTES * per_group * groups


def topk_count(k_pct: float, numel: int) -> int:
    return min(numel, max(1, int(round(k_pct / 100.0 * numel))))


# -- top-k -------------------------------------------------------------------

def topk_encode(w, k_pct: float) -> EncodedDelta:
    """Keep the ``k_pct`` percent largest-magnitude entries; ties go to the lowest flat index."""
    w = as_matrix(w, "w")
    if not 0.0 < k_pct <= 100.0:
        raise ValueError("k_pct must lie in (0, 100]")
    flat = w.reshape(-1)
    k = topk_count(k_pct, flat.size)
    order = np.argsort(-np.abs(flat), kind="stable")
    kept = np.sort(order[:k])
    return EncodedDelta("topk", w.shape, _topk_bytes(k, flat.size), values=flat[kept].copy(), indices=kept)


def topk_decode(e: EncodedDelta) -> np.ndarray:
    out = np.zeros(e.shape[0] * e.shape[1])
    out[e.indices] = e.values
    return out.reshape(e.shape)


# -- quantization ------------------------------------------------------------

def _linear_codebook(x: np.ndarray, levels: int) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.array([lo])
    step = (hi - lo) / (levels - 1)
    return lo + np.arange(levels) * step


def _linear_indices(x: np.ndarray, lo: float, hi: float, levels: int) -> np.ndarray:
    if hi == lo:
        return np.zeros(x.shape, dtype=np.int64)
    step = (hi - lo) / (levels - 1)
    return np.clip(np.rint((x - lo) / step), 0, levels - 1).astype(np.int64)


def _nearest(x: np.ndarray, book: np.ndarray) -> np.ndarray:
    # Sorted codebook; a value on a midpoint goes to the lower level.
    if book.size == 1:
        return np.zeros(x.shape, dtype=np.int64)
    mids = (book[:-1] + book[1:]) / 2.0
    return np.searchsorted(mids, x, side="left").astype(np.int64)


def _lloyd(x: np.ndarray, book: np.ndarray) -> np.ndarray:
    book = np.sort(book)
    assign = _nearest(x, book)
    for _ in range(LLOYD_MAX_ITERS):
        sums = np.bincount(assign, weights=x, minlength=book.size)
        counts = np.bincount(assign, minlength=book.size)
        filled = counts > 0
        book = book.copy()
        book[filled] = sums[filled] / counts[filled]
        book = np.sort(book)
        new_assign = _nearest(x, book)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return book


def _statistical_codebook(x: np.ndarray, levels: int) -> np.ndarray:
    """1-D Lloyd-Max levels from the better of a quantile start and a uniform-grid start."""
    if x.max() == x.min():
        return np.full(levels, float(x.min()))
    starts = (np.quantile(x, (np.arange(levels) + 0.5) / levels),
              np.linspace(x.min(), x.max(), levels))
    best, best_err = None, np.inf
    for start in starts:
        book = _lloyd(x, start)
        err = float(np.mean((book[_nearest(x, book)] - x) ** 2))
        if err < best_err:
            best, best_err = book, err
    return best


def quant_encode(w, spec: CompressorSpec) -> EncodedDelta:
    w = as_matrix(w, "w")
    if spec.kind != "quant":
        raise ValueError("quant_encode needs a quant spec")
    levels = 2 ** spec.bits
    groups = w if spec.granularity == "rowwise" else w.reshape(1, -1)
    books = []
    idx = np.empty(groups.shape, dtype=np.int64)
    for g, row in enumerate(groups):
        if spec.scheme == "linear":
            lo, hi = float(row.min()), float(row.max())
            idx[g] = _linear_indices(row, lo, hi, levels)
            books.append(_linear_codebook(row, levels) if hi > lo else np.full(levels, lo))
        else:
            book = _statistical_codebook(row, levels)
            idx[g] = _nearest(row, book)
            books.append(book)
    rows, cols = w.shape
    return EncodedDelta("quant", w.shape, _quant_bytes(spec.bits, spec.scheme, rows, cols, spec.granularity),
                        indices=idx.reshape(w.shape), codebooks=np.array(books), bits=spec.bits,
                        scheme=spec.scheme, granularity=spec.granularity)


def quant_decode(e: EncodedDelta) -> np.ndarray:
    if e.granularity == "rowwise":
        rows = np.arange(e.shape[0])[:, None]
        return e.codebooks[rows, e.indices]
    return e.codebooks[0][e.indices]


def encode(w, spec: CompressorSpec) -> EncodedDelta:
    w = as_matrix(w, "w")
    if spec.kind == "none":
        return EncodedDelta("none", w.shape, VALUE_BYTES * w.size, values=w.reshape(-1).copy())
    if spec.kind == "topk":
        return topk_encode(w, spec.k_pct)
    return quant_encode(w, spec)


# -- error feedback ------------------------------------------------------------

def ef_wrap(delta, residual, spec: CompressorSpec, codec=None) -> tuple[EncodedDelta, np.ndarray]:
    """Compress ``beta * residual + delta`` and keep what was not transmitted.

    ``codec`` defaults to :func:`encode` with ``spec``; any callable mapping a
    matrix to an :class:`EncodedDelta` may be substituted.
    """
    delta = as_matrix(delta, "delta")
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != delta.shape:
        raise ValueError(f"residual shape {residual.shape} != delta shape {delta.shape}")
    acc = spec.ef_beta * residual + delta
    enc = codec(acc) if codec is not None else encode(acc, spec)
    return enc, acc - enc.decode()


# -- collective ----------------------------------------------------------------

@dataclass
class CommStats:
    """Per-worker traffic for one reduction; byte counts are exact fractions."""

    collective: str
    payload_bytes: list[int] = field(default_factory=list)
    sent_bytes: list[Fraction] = field(default_factory=list)
    recv_bytes: list[Fraction] = field(default_factory=list)
    stages: int = 1

    @property
    def total_payload(self) -> int:
        return sum(self.payload_bytes)

    @property
    def max_sent(self) -> Fraction:
        return max(self.sent_bytes) if self.sent_bytes else Fraction(0)

    def merge(self, other: "CommStats") -> "CommStats":
        if not self.payload_bytes:
            return CommStats(other.collective, list(other.payload_bytes), list(other.sent_bytes),
                             list(other.recv_bytes), other.stages)
        return CommStats(self.collective,
                         [a + b for a, b in zip(self.payload_bytes, other.payload_bytes)],
                         [a + b for a, b in zip(self.sent_bytes, other.sent_bytes)],
                         [a + b for a, b in zip(self.recv_bytes, other.recv_bytes)],
                         max(self.stages, other.stages))


def collective_name(spec: CompressorSpec) -> str:
    return {"none": "ring_allreduce", "topk": "allgather", "quant": "a2a_rs_then_ag"}[spec.kind]


def collective_reduce(encoded: Sequence[EncodedDelta], spec: CompressorSpec) -> tuple[np.ndarray, CommStats]:
    """Average K encoded deltas the way the modeled collective would.

    Quantized payloads go through an all-to-all reduce-scatter (decode, average
    in full precision, re-quantize) and an all-gather, so the result has been
    quantized twice. Top-k payloads are all-gathered and averaged once;
    uncompressed payloads model a ring all-reduce.
    """
    if not encoded:
        raise ValueError("collective over zero workers")
    shape = encoded[0].shape
    if any(e.shape != shape for e in encoded):
        raise ValueError("shape mismatch across workers")
    k = len(encoded)
    payload = [e.logical_bytes for e in encoded]
    mean = mean_in_order([e.decode() for e in encoded])
    if spec.kind == "quant":
        stage2 = quant_encode(mean, spec)
        result = stage2.decode()
        share = Fraction(k - 1, k)
        sent = [share * p + share * stage2.logical_bytes for p in payload]
        recv = [Fraction(sum(payload) - p, k) + share * stage2.logical_bytes for p in payload]
        return result, CommStats("a2a_rs_then_ag", payload, sent, recv, stages=2)
    if spec.kind == "topk":
        sent = [Fraction((k - 1) * p) for p in payload]
        recv = [Fraction(sum(payload) - p) for p in payload]
        return mean, CommStats("allgather", payload, sent, recv, stages=1)
    factor = Fraction(2 * (k - 1), k)
    vol = [factor * p for p in payload]
    return mean, CommStats("ring_allreduce", payload, vol, list(vol), stages=1)


def comm_bytes(spec: CompressorSpec, shape: tuple[int, int], k: int) -> dict[str, Fraction | int]:
    """Closed-form per-worker wire sizes for one matrix of ``shape`` across ``k`` workers."""
    rows, cols = shape
    numel = rows * cols
    if spec.kind == "none":
        payload = VALUE_BYTES * numel
        vol = Fraction(2 * (k - 1), k) * payload
        return {"payload": payload, "metadata": 0, "sent": vol, "recv": vol}
    if spec.kind == "topk":
        count = topk_count(spec.k_pct, numel)
        payload = _topk_bytes(count, numel)
        return {"payload": payload, "metadata": 0,
                "sent": Fraction((k - 1) * payload), "recv": Fraction((k - 1) * payload)}
    payload = _quant_bytes(spec.bits, spec.scheme, rows, cols, spec.granularity)
    meta = payload - math.ceil(spec.bits * numel / 8)
    vol = Fraction(2 * (k - 1), k) * payload
    return {"payload": payload, "metadata": meta, "sent": vol, "recv": vol}
