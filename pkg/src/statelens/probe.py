"""The measurement core: binarized activation states and their statistics.

At every probed node, each spatial position of the output tensor yields
one *state value*: the channel vector thresholded at zero and packed
into an integer bit pattern (bit c set iff channel c was strictly
positive). Per-class histograms over these values feed three
utilization readings of a node's 2^D state space:

* ``eta_state``    fraction of the space observed (distinct / 2^D)
* ``eta_entropy``  Shannon entropy of the distribution over D bits
* ``eta_kldiv``    shortfall against a uniform per-class share of the
  space; with the no-alignment assumption it reduces to the closed form
  (D - log2 C) - H, so it *decreases* as utilization rises and can go
  negative when one class occupies more than its share (flagged, never
  clamped, keeping the closed-form identity exact).

Counting is exact: histograms never drop states. If the configured
memory budget would be exceeded the run fails fast with sizing advice.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from collections import Counter

import numpy as np

from . import engine
from .errors import BudgetError, NumericError, ValidationError
from .graph import ComputationGraph

MAX_STATE_WIDTH = 4096

# Rough per-entry cost of a Python dict slot holding (int state, int count).
_ENTRY_OVERHEAD = 96


def entry_bytes(width: int) -> int:
    return _ENTRY_OVERHEAD + 8 * ((width + 63) // 64)


def binarize(x: np.ndarray) -> np.ndarray:
    """Zero-threshold: 1 where strictly positive, 0 at or below zero."""
    x = np.asarray(x)
    if np.isnan(x).any():
        raise NumericError("cannot binarize a tensor containing NaN")
    return (x > 0).astype(np.uint8)


def pack_bit_rows(bits: np.ndarray) -> list[int]:
    """Pack (N, D) binary rows into N integers, bit d = column d."""
    packed = np.packbits(bits.astype(np.uint8, copy=False), axis=1, bitorder="little")
    nb = packed.shape[1]
    if nb <= 8:
        if nb < 8:
            packed = np.pad(packed, ((0, 0), (0, 8 - nb)))
        return np.ascontiguousarray(packed).view("<u8").ravel().tolist()
    raw = packed.tobytes()
    return [int.from_bytes(raw[i * nb : (i + 1) * nb], "little") for i in range(bits.shape[0])]


def extract_states(arr: np.ndarray) -> tuple[list[int], int]:
    """State values of one activation tensor.

    Rank-4 (batch, channels, rows, cols) yields one value per
    (batch, row, col) position with width = channel count; rank-2
    (batch, features) yields one value per batch row.
    """
    if arr.ndim == 4:
        b, c, h, w = arr.shape
        width = c
        bits = binarize(arr).transpose(0, 2, 3, 1).reshape(b * h * w, c)
    elif arr.ndim == 2:
        width = arr.shape[1]
        bits = binarize(arr)
    else:
        raise ValidationError(f"state extraction needs rank 2 or 4, got rank {arr.ndim}")
    if width > MAX_STATE_WIDTH:
        raise ValidationError(
            f"state width {width} exceeds the {MAX_STATE_WIDTH}-bit cap; "
            "restrict probes to narrower nodes"
        )
    return pack_bit_rows(bits), width


@dataclass
class StateHistogram:
    """Per-(node, class) map from state value to occurrence count."""

    node_id: int
    class_label: int
    width: int
    counts: dict[int, int]
    n_obs: int = 0
    images: int | None = 0

    @property
    def unique_count(self) -> int:
        return len(self.counts)

    def estimated_bytes(self) -> int:
        return self.unique_count * entry_bytes(self.width)

    def merge(self, other: "StateHistogram") -> "StateHistogram":
        if other.width != self.width:
            raise ValidationError(f"width mismatch: {self.width} vs {other.width}")
        for s, c in other.counts.items():
            self.counts[s] = self.counts.get(s, 0) + c
        self.n_obs += other.n_obs
        if self.images is None or other.images is None:
            self.images = None
        else:
            self.images += other.images
        return self


def accumulate(hist: StateHistogram, states: list[int], images: int = 0) -> StateHistogram:
    limit = 1 << hist.width
    counts = hist.counts
    for s in states:
        if s >= limit:
            raise ValidationError(f"state 0x{s:x} wider than histogram width {hist.width}")
        counts[s] = counts.get(s, 0) + 1
    hist.n_obs += len(states)
    if hist.images is not None:
        hist.images += images
    return hist


class ShardedStateCounter:
    """Exact state counter sharded by the low bits of the state value.

    Workers accumulate into private counters; merging shard by shard and
    summing counts is order-independent, so results do not depend on the
    worker count.
    """

    def __init__(self, width: int, shards: int = 16):
        if shards & (shards - 1):
            raise ValidationError("shard count must be a power of two")
        self.width = width
        self.mask = shards - 1
        self.shards: list[dict[int, int]] = [{} for _ in range(shards)]

    def add(self, states: list[int]) -> None:
        mask = self.mask
        shards = self.shards
        for s in states:
            d = shards[s & mask]
            d[s] = d.get(s, 0) + 1

    def merge_counts(self, counts: dict[int, int]) -> None:
        mask = self.mask
        shards = self.shards
        for s, c in counts.items():
            d = shards[s & mask]
            d[s] = d.get(s, 0) + c

    @property
    def unique_count(self) -> int:
        return sum(len(d) for d in self.shards)

    @property
    def total(self) -> int:
        return sum(c for d in self.shards for c in d.values())

    def estimated_bytes(self) -> int:
        return self.unique_count * entry_bytes(self.width)

    def to_counts(self) -> dict[int, int]:
        merged: dict[int, int] = {}
        for d in self.shards:  # fixed shard order
            merged.update(d)
        return merged


# -- utilization ------------------------------------------------------------------

@dataclass(frozen=True)
class UtilizationTriple:
    eta_state: float
    eta_entropy: float
    entropy_bits: float
    eta_kldiv: float
    width: int
    over_reference: bool

    def metric(self, name: str) -> float:
        if name == "state":
            return self.eta_state
        if name == "entropy":
            return self.entropy_bits
        if name == "entropy-frac":
            return self.eta_entropy
        if name == "kldiv":
            return self.eta_kldiv
        raise ValidationError(f"unknown metric {name!r} (state|entropy|entropy-frac|kldiv)")


METRICS = ("state", "entropy", "entropy-frac", "kldiv")


def entropy_bits(counts: dict[int, int], n_obs: int) -> float:
    """H = log2(N) - (1/N) * sum c*log2(c), iterated in sorted key order so
    the float result is independent of dict insertion history."""
    if n_obs < 1:
        raise ValidationError("entropy of an empty histogram")
    acc = 0.0
    for key in sorted(counts):
        c = counts[key]
        if c > 1:
            acc += c * math.log2(c)
    return math.log2(n_obs) - acc / n_obs


def utilization(hist: StateHistogram, num_classes: int) -> UtilizationTriple:
    if num_classes < 1:
        raise ValidationError("class count must be >= 1")
    if hist.n_obs < 1:
        raise ValidationError(f"histogram for node {hist.node_id} is empty")
    d = hist.width
    h = entropy_bits(hist.counts, hist.n_obs)
    eta_state = math.exp2(math.log2(hist.unique_count) - d)  # log space, no 2^D blowup
    kldiv = (d - math.log2(num_classes)) - h
    return UtilizationTriple(
        eta_state=eta_state,
        eta_entropy=h / d,
        entropy_bits=h,
        eta_kldiv=kldiv,
        width=d,
        over_reference=kldiv < 0,
    )


# -- cost planning ------------------------------------------------------------------

def estimate_cost(images: int, avg_infer_seconds: float, max_output_bytes: int,
                  n_probes: int) -> tuple[float, int]:
    """(total seconds, memory upper bound in bytes) for a fingerprint run."""
    if min(images, n_probes) < 0 or avg_infer_seconds < 0 or max_output_bytes < 0:
        raise ValidationError("cost inputs must be nonnegative")
    return images * avg_infer_seconds, max_output_bytes * images * n_probes


def capacity_classes(width: int, rows: int, cols: int, images_per_class: int) -> float:
    """How many classes a node's 2^width state space could distinguish when
    each class consumes rows*cols*images_per_class values."""
    if min(width, rows, cols, images_per_class) < 1:
        raise ValidationError("capacity inputs must be >= 1")
    return math.exp2(width - math.log2(rows * cols * images_per_class))


def visualization_budget(n_probes: int, avg_width: int, images: int) -> int:
    """Grayscale images needed to eyeball every recorded state (one image
    per 8 bits of width per input image per probe)."""
    if avg_width % 8:
        raise ValidationError("average width must be divisible by 8")
    if min(n_probes, images) < 0:
        raise ValidationError("budget inputs must be nonnegative")
    return n_probes * (avg_width // 8) * images


def budget_advice(estimated: int, budget: int) -> str:
    return (
        f"state histograms would need ~{estimated:,} bytes, over the {budget:,}-byte budget; "
        "profile fewer images per class (subsample and extrapolate the trend) or restrict "
        "probes to a name list, or raise STATELENS_MEM_BUDGET"
    )


DEFAULT_MEM_BUDGET = 2 << 30


# -- profiling ----------------------------------------------------------------------

def profile_class(
    graph: ComputationGraph,
    weights,
    batch: np.ndarray,
    class_label: int,
    probe_names: list[str] | None = None,
    threads: int = 1,
    mem_budget: int | None = None,
    by_predicted: bool = False,
) -> dict[int, StateHistogram]:
    """Histogram every probed node over a batch of one class's images.

    `batch` is float32 (N,3,H,W). With by_predicted=True only images the
    model itself assigns to `class_label` contribute (default: the caller
    vouches for the labels). Image-level parallelism with a count-sum
    merge keeps results independent of `threads`.
    """
    if batch.ndim != 4 or batch.shape[0] < 1:
        raise ValidationError("profile needs a non-empty (N,3,H,W) batch")
    budget = DEFAULT_MEM_BUDGET if mem_budget is None else mem_budget
    probe_ids = graph.probe_ids(probe_names)
    if not probe_ids:
        raise ValidationError("no probes selected")
    widths = {nid: graph.output_width(nid) for nid in probe_ids}
    for nid, width in widths.items():
        if width > MAX_STATE_WIDTH:
            raise ValidationError(
                f"node {graph.node(nid).name!r} is {width} bits wide (cap {MAX_STATE_WIDTH}); "
                "exclude it from the probe list"
            )

    if by_predicted:
        keep = engine.predict(graph, weights, batch) == class_label
        batch = batch[keep]
        if not len(batch):
            raise ValidationError(f"model assigns no image to class {class_label}")

    counters = {nid: ShardedStateCounter(widths[nid]) for nid in probe_ids}
    hists = {
        nid: StateHistogram(nid, class_label, widths[nid], {}, 0, 0) for nid in probe_ids
    }

    def run_chunk(indices) -> dict[int, Counter]:
        local: dict[int, Counter] = {nid: Counter() for nid in probe_ids}
        for i in indices:
            _, records = forward_one(graph, weights, batch[i : i + 1], probe_ids)
            for rec in records:
                states, width = extract_states(rec.array)
                if width != widths[rec.node_id]:
                    raise ValidationError(
                        f"node {rec.node_id}: state width {width} != declared {widths[rec.node_id]}"
                    )
                local[rec.node_id].update(states)
        return local

    n = len(batch)
    chunks = [range(start, min(start + 16, n)) for start in range(0, n, 16)]
    if threads <= 1:
        results = map(run_chunk, chunks)
    else:
        pool = ThreadPoolExecutor(max_workers=threads)
        results = pool.map(run_chunk, chunks)

    done_images = 0
    for chunk, local in zip(chunks, results):
        for nid, counter in local.items():
            counters[nid].merge_counts(counter)
            hists[nid].n_obs += sum(counter.values())
        done_images += len(chunk)
        used = sum(c.estimated_bytes() for c in counters.values())
        if used > budget:
            if threads > 1:
                pool.shutdown(wait=False, cancel_futures=True)
            raise BudgetError(budget_advice(used, budget))
    if threads > 1:
        pool.shutdown()

    for nid in probe_ids:
        hists[nid].counts = counters[nid].to_counts()
        hists[nid].images = done_images
    return hists


def forward_one(graph, weights, batch, probe_ids):
    return engine.forward(graph, weights, batch, probe_ids=probe_ids)


# -- histogram files -----------------------------------------------------------------

_TSH_MAGIC = b"TSH1"
_HEADER = struct.Struct("<4sIIIQQ")


def write_histogram(path, hist: StateHistogram, min_count: int = 0) -> None:
    """Canonical on-disk form: fixed header then entries sorted ascending
    by bit pattern (words little-endian first, then a 64-bit count).
    `min_count` keeps only entries whose count exceeds it."""
    entries = sorted((s, c) for s, c in hist.counts.items() if c > min_count)
    n_obs = sum(c for _, c in entries)
    words = (hist.width + 63) // 64
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_TSH_MAGIC, hist.node_id, hist.width,
                              hist.class_label, n_obs, len(entries)))
        for s, c in entries:
            fh.write(s.to_bytes(words * 8, "little"))
            fh.write(struct.pack("<Q", c))


def read_histogram(path) -> StateHistogram:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValidationError(f"{path}: truncated histogram header")
        magic, node_id, width, class_label, n_obs, unique = _HEADER.unpack(header)
        if magic != _TSH_MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        words = (width + 63) // 64
        counts: dict[int, int] = {}
        for _ in range(unique):
            raw = fh.read(words * 8 + 8)
            if len(raw) != words * 8 + 8:
                raise ValidationError(f"{path}: truncated histogram entry")
            counts[int.from_bytes(raw[: words * 8], "little")] = struct.unpack(
                "<Q", raw[words * 8 :])[0]
    got = sum(counts.values())
    if got != n_obs:
        raise ValidationError(f"{path}: header claims {n_obs} observations, entries sum {got}")
    return StateHistogram(node_id, width=width, class_label=class_label,
                          counts=counts, n_obs=n_obs, images=None)
