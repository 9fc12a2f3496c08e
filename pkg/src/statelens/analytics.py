"""Class encodings, model fingerprints, and the comparisons between them.

A class encoding is the vector of utilization readings over all probes
(topological order) for one class's images; stacking encodings for every
class, ordered by label, gives the model's fingerprint matrix. Fingerprints
of independently trained models are never compared element-to-element;
comparisons go through value histograms, correlations, and state-set
overlaps.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine, probe
from .errors import ValidationError
from .graph import ComputationGraph
from .probe import StateHistogram, UtilizationTriple

EVAL_SETS = ("set1", "set2", "set3")
EVAL_SET_ALIASES = {
    "set1": "set1", "clean-on-clean": "set1",
    "set2": "set2", "clean-on-poisoned-model": "set2",
    "set3": "set3", "triggered-on-poisoned-model": "set3",
}


@dataclass
class ClassEncoding:
    class_label: int
    probe_ids: list[int]
    triples: list[UtilizationTriple]

    def values(self, metric: str) -> np.ndarray:
        return np.array([t.metric(metric) for t in self.triples], dtype=np.float64)


@dataclass
class Fingerprint:
    model_id: str
    metric: str
    class_labels: list[int]
    probe_ids: list[int]
    probe_names: list[str]
    matrix: np.ndarray  # (classes, probes)
    provenance: dict = field(default_factory=dict)

    def row(self, class_label: int) -> np.ndarray:
        return self.matrix[self.class_labels.index(class_label)]


def class_encoding(graph: ComputationGraph, hists: dict[int, StateHistogram],
                   num_classes: int, class_label: int) -> ClassEncoding:
    probe_ids = [nid for nid in graph.topo_order() if nid in hists]
    triples = [probe.utilization(hists[nid], num_classes) for nid in probe_ids]
    return ClassEncoding(class_label, probe_ids, triples)


def fingerprint(
    graph: ComputationGraph,
    weights,
    dataset,
    eval_set: str = "set1",
    metric: str = "entropy",
    model_id: str = "model",
    probe_names: list[str] | None = None,
    threads: int = 1,
    mem_budget: int | None = None,
    limit_per_class: int | None = None,
    by_predicted: bool = False,
    keep_histograms: bool = False,
):
    """Profile every class and assemble the class-by-probe matrix.

    Evaluation regimes: set1/set2 run the manifest's clean images (against
    a clean or a poisoned model respectively); set3 additionally re-renders
    the trigger onto source-class images before inference.
    """
    eval_set = EVAL_SET_ALIASES.get(eval_set)
    if eval_set is None:
        raise ValidationError(f"unknown evaluation set (have {sorted(EVAL_SET_ALIASES)})")
    trig = dataset.manifest.trigger
    if eval_set == "set3" and trig.kind == "none":
        raise ValidationError("set3 needs a poisoned dataset; this manifest has no trigger")

    num_classes = dataset.manifest.classes
    encodings: list[ClassEncoding] = []
    all_hists: dict[int, dict[int, StateHistogram]] = {}
    for c in range(num_classes):
        triggered = eval_set == "set3" and c == trig.source_class
        imgs = dataset.class_images(c, limit=limit_per_class, triggered=triggered)
        batch = dataset.to_input(imgs)
        hists = probe.profile_class(
            graph, weights, batch, c, probe_names=probe_names, threads=threads,
            mem_budget=mem_budget, by_predicted=by_predicted,
        )
        encodings.append(class_encoding(graph, hists, num_classes, c))
        if keep_histograms:
            all_hists[c] = hists

    probe_ids = encodings[0].probe_ids
    fp = Fingerprint(
        model_id=model_id,
        metric=metric,
        class_labels=list(range(num_classes)),
        probe_ids=probe_ids,
        probe_names=[graph.node(nid).name for nid in probe_ids],
        matrix=np.stack([e.values(metric) for e in encodings]),
        provenance={
            "eval_set": eval_set,
            "dataset_hash": dataset.manifest.dataset_hash,
            "dataset_seed": dataset.manifest.seed,
            "limit_per_class": limit_per_class,
        },
    )
    return (fp, all_hists) if keep_histograms else fp


# -- fingerprint files ---------------------------------------------------------------

def write_fingerprint(path, fp: Fingerprint) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class"] + fp.probe_names)
    for label, row in zip(fp.class_labels, fp.matrix):
        writer.writerow([label] + [repr(float(v)) for v in row])
    Path(path).write_text(buf.getvalue())
    meta = {
        "model_id": fp.model_id,
        "metric": fp.metric,
        "probe_ids": fp.probe_ids,
        "provenance": fp.provenance,
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def read_fingerprint(path) -> Fingerprint:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["class"]:
        raise ValidationError(f"{path}: not a fingerprint CSV")
    probe_names = rows[0][1:]
    labels = [int(r[0]) for r in rows[1:]]
    matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    meta_path = Path(str(path) + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Fingerprint(
        model_id=meta.get("model_id", Path(path).stem),
        metric=meta.get("metric", "entropy"),
        class_labels=labels,
        probe_ids=meta.get("probe_ids", list(range(len(probe_names)))),
        probe_names=probe_names,
        matrix=matrix,
        provenance=meta.get("provenance", {}),
    )


# -- fingerprint histogram delta --------------------------------------------------------

@dataclass
class DisjointRange:
    low: float
    high: float
    present_in: str  # model id of the fingerprint occupying the range
    probes: list[str]
    classes: list[int]


@dataclass
class DeltaResult:
    bin_edges: np.ndarray
    counts1: np.ndarray
    counts2: np.ndarray
    disjoint_ranges: list[DisjointRange]
    model_ids: tuple[str, str]


def fingerprint_histogram_delta(f1: Fingerprint, f2: Fingerprint, bins: int = 40) -> DeltaResult:
    """Histogram all matrix entries of both fingerprints over shared bin
    edges and report value ranges occupied by exactly one model, with the
    probes (and classes) that put values there."""
    if bins < 2:
        raise ValidationError("need at least 2 bins")
    if f1.metric != f2.metric:
        raise ValidationError(f"metric mismatch: {f1.metric} vs {f2.metric}")
    v1, v2 = f1.matrix.ravel(), f2.matrix.ravel()
    lo = float(min(v1.min(), v2.min()))
    hi = float(max(v1.max(), v2.max()))
    if hi <= lo:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, bins + 1)
    c1, _ = np.histogram(v1, bins=edges)
    c2, _ = np.histogram(v2, bins=edges)

    def occupants(fp: Fingerprint, b: int) -> tuple[list[str], list[int]]:
        left, right = edges[b], edges[b + 1]
        if b == bins - 1:
            inside = (fp.matrix >= left) & (fp.matrix <= right)
        else:
            inside = (fp.matrix >= left) & (fp.matrix < right)
        cls_idx, probe_idx = np.nonzero(inside)
        names = sorted({fp.probe_names[j] for j in probe_idx})
        labels = sorted({fp.class_labels[i] for i in cls_idx})
        return names, labels

    ranges: list[DisjointRange] = []
    current: DisjointRange | None = None
    for b in range(bins):
        who = None
        if c1[b] > 0 and c2[b] == 0:
            who = 0
        elif c2[b] > 0 and c1[b] == 0:
            who = 1
        if who is None:
            current = None
            continue
        fp = (f1, f2)[who]
        names, labels = occupants(fp, b)
        if current is not None and current.present_in == fp.model_id \
                and math.isclose(current.high, edges[b]):
            current.high = float(edges[b + 1])
            current.probes = sorted(set(current.probes) | set(names))
            current.classes = sorted(set(current.classes) | set(labels))
        else:
            current = DisjointRange(float(edges[b]), float(edges[b + 1]),
                                    fp.model_id, names, labels)
            ranges.append(current)
    return DeltaResult(edges, c1, c2, ranges, (f1.model_id, f2.model_id))


# -- correlations, overlap, masks ---------------------------------------------------------

def encoding_correlation(v1: np.ndarray, v2: np.ndarray) -> float:
    """Pearson correlation between two aligned encoding vectors."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if v1.shape != v2.shape or v1.ndim != 1:
        raise ValidationError("encodings must be 1-d vectors of equal length")
    if len(v1) < 2:
        raise ValidationError("need at least 2 components to correlate")
    a = v1 - v1.mean()
    b = v2 - v2.mean()
    denom = math.sqrt(float(a @ a)) * math.sqrt(float(b @ b))
    if denom == 0.0:
        raise ValidationError("encoding correlation undefined: zero variance")
    return float(min(max((a @ b) / denom, -1.0), 1.0))


@dataclass
class OverlapResult:
    only_first: int
    only_second: int
    both: int
    shared_states: list[int]

    @property
    def union(self) -> int:
        return self.only_first + self.only_second + self.both


def class_overlap(h1: StateHistogram, h2: StateHistogram, min_count: int = 0) -> OverlapResult:
    """Venn partition of the two classes' state sets, keeping only states
    observed more than `min_count` times in their own class."""
    if h1.width != h2.width:
        raise ValidationError(f"width mismatch: {h1.width} vs {h2.width}")
    if h1.node_id != h2.node_id:
        raise ValidationError(f"histograms from different nodes: {h1.node_id} vs {h2.node_id}")
    s1 = {s for s, c in h1.counts.items() if c > min_count}
    s2 = {s for s, c in h2.counts.items() if c > min_count}
    both = s1 & s2
    return OverlapResult(len(s1 - s2), len(s2 - s1), len(both), sorted(both))


def overlap_mask(graph: ComputationGraph, weights, image_u8: np.ndarray,
                 node_id: int, states: set[int]):
    """Where on one image a node emits state values from `states`.

    Returns (mask, overlay): a boolean (rows, cols) grid at probe
    resolution and the image with mask-true cells painted red
    (nearest-neighbor upsampled)."""
    from .datagen import Dataset

    node = graph.node(node_id)
    if not node.probe:
        raise ValidationError(f"node {node.name!r} is not probed")
    batch = Dataset.to_input(image_u8[None])
    _, records = engine.forward(graph, weights, batch, probe_ids=[node_id])
    arr = records[0].array
    if arr.ndim != 4:
        raise ValidationError(f"node {node.name!r} has no spatial layout to mask")
    _, _, rows, cols = arr.shape
    values, _ = probe.extract_states(arr)
    mask = np.array([v in states for v in values], dtype=bool).reshape(rows, cols)

    h, w = image_u8.shape[:2]
    rr = (np.arange(h) * rows) // h
    cc = (np.arange(w) * cols) // w
    up = mask[rr][:, cc]
    overlay = image_u8.copy()
    overlay[up] = (255, 0, 0)
    return mask, overlay


# -- subgraph signatures --------------------------------------------------------------

@dataclass
class SignatureGroup:
    level: int
    kinds: tuple[str, ...]
    count: int
    members: list[list[str]]


def subgraph_signatures(encoding: ClassEncoding, graph: ComputationGraph,
                        quantization: float = 2.0) -> list[SignatureGroup]:
    """Group probes into maximal connected runs of equal quantized
    utilization (entropy fraction in percent, floor-quantized by
    `quantization`). Runs sharing (level, kind sequence) are counted
    together, most frequent first — a cheap stand-in for isomorphic
    subgraph search."""
    if quantization <= 0:
        raise ValidationError("quantization step must be > 0")
    level = {
        nid: int(t.eta_entropy * 100.0 // quantization)
        for nid, t in zip(encoding.probe_ids, encoding.triples)
    }
    parent = {nid: nid for nid in level}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for s, d in graph.edges:
        if s in level and d in level and level[s] == level[d]:
            parent[find(s)] = find(d)

    components: dict[int, list[int]] = {}
    for nid in encoding.probe_ids:  # topological order within components
        components.setdefault(find(nid), []).append(nid)

    grouped: dict[tuple[int, tuple[str, ...]], list[list[str]]] = {}
    for nodes in components.values():
        kinds = tuple(graph.node(nid).kind for nid in nodes)
        key = (level[nodes[0]], kinds)
        grouped.setdefault(key, []).append([graph.node(nid).name for nid in nodes])
    groups = [
        SignatureGroup(level=k[0], kinds=k[1], count=len(v), members=v)
        for k, v in grouped.items()
    ]
    groups.sort(key=lambda g: (-g.count, -len(g.kinds), g.level))
    return groups


# -- replicate variability and extrapolation ---------------------------------------------

@dataclass
class VariabilityResult:
    class_labels: list[int]
    probe_names: list[str]
    mean: np.ndarray   # (classes, probes)
    sigma: np.ndarray  # sample standard deviation, ddof=1
    max_sigma: float
    max_probe: str
    max_class: int


def replicate_variability(fingerprints: list[Fingerprint]) -> VariabilityResult:
    if len(fingerprints) < 2:
        raise ValidationError("variability needs at least 2 replicate fingerprints")
    first = fingerprints[0]
    for fp in fingerprints[1:]:
        if fp.matrix.shape != first.matrix.shape:
            raise ValidationError("replicate fingerprints must share shape")
        if fp.probe_names != first.probe_names:
            raise ValidationError("replicate fingerprints must share probe names")
    stack = np.stack([fp.matrix for fp in fingerprints])
    mean = stack.mean(axis=0)
    sigma = stack.std(axis=0, ddof=1)
    ci, pi = np.unravel_index(int(np.argmax(sigma)), sigma.shape)
    return VariabilityResult(
        class_labels=first.class_labels,
        probe_names=first.probe_names,
        mean=mean,
        sigma=sigma,
        max_sigma=float(sigma[ci, pi]),
        max_probe=first.probe_names[pi],
        max_class=first.class_labels[ci],
    )


@dataclass
class FitResult:
    a: float
    b: float
    r_squared: float

    def predict(self, m):
        return self.a * np.log(np.asarray(m, dtype=np.float64)) + self.b


def fit_extrapolation(samples: list[tuple[float, float]]) -> FitResult:
    """Least-squares fit of u = a*ln(M) + b. A constant-u series fits
    exactly (R^2 defined as 1 when total variance is zero)."""
    if len(samples) < 3:
        raise ValidationError("extrapolation fit needs at least 3 samples")
    m = np.array([s[0] for s in samples], dtype=np.float64)
    u = np.array([s[1] for s in samples], dtype=np.float64)
    if np.any(m <= 0):
        raise ValidationError("sample counts must be positive")
    if len(np.unique(m)) < 2:
        raise ValidationError("samples share a single M value; cannot fit a trend")
    x = np.stack([np.log(m), np.ones_like(m)], axis=1)
    coef, *_ = np.linalg.lstsq(x, u, rcond=None)
    pred = x @ coef
    ss_res = float(((u - pred) ** 2).sum())
    ss_tot = float(((u - u.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return FitResult(float(coef[0]), float(coef[1]), r2)


def comparison_budget(num_classes: int) -> int:
    """Distinct nonempty class subsets a full cross-class state comparison
    would have to inspect."""
    if num_classes < 1:
        raise ValidationError("class count must be >= 1")
    return (1 << num_classes) - 1
