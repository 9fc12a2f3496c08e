"""Computation graphs: typed nodes, adjacency, topological order, weight
binding, and utilization-colored DOT export.

The on-disk graph format is a plain JSON document::

    {"nodes": [{"id": 0, "name": "input", "kind": "input",
                "params": {...}, "probe": false}, ...],
     "edges": [[0, 1], [1, 2], ...]}

Weights travel in a separate blob of little-endian float32 values,
concatenated per node in ascending node id with no padding. Per-kind
layouts:

    conv2d        weight, row-major (out_ch, in_ch, kh, kw)
    batchnorm2d   gamma, beta, running_mean, running_var (channels each)
    linear        weight, row-major (out_features, in_features), then bias
    other kinds   no parameters
"""

from __future__ import annotations

import colorsys
import json
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ValidationError

KINDS = (
    "input",
    "conv2d",
    "batchnorm2d",
    "relu",
    "maxpool2d",
    "avgpool-global",
    "linear",
    "add",
    "flatten",
)

_REQUIRED_PARAMS = {
    "input": ("channels", "rows", "cols"),
    "conv2d": ("in_ch", "out_ch", "kh", "kw", "stride", "pad"),
    "batchnorm2d": ("channels",),
    "relu": (),
    "maxpool2d": ("k", "stride"),
    "avgpool-global": (),
    "linear": ("in_features", "out_features"),
    "add": (),
    "flatten": (),
}


@dataclass
class NodeSpec:
    id: int
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    probe: bool = True

    def validate(self):
        if self.kind not in KINDS:
            raise ValidationError(f"node {self.id} ({self.name!r}): unknown kind {self.kind!r}")
        missing = [p for p in _REQUIRED_PARAMS[self.kind] if p not in self.params]
        if missing:
            raise ValidationError(
                f"node {self.id} ({self.name!r}, {self.kind}): missing params {missing}"
            )

    def param_count(self) -> int:
        p = self.params
        if self.kind == "conv2d":
            return p["out_ch"] * p["in_ch"] * p["kh"] * p["kw"]
        if self.kind == "batchnorm2d":
            return 4 * p["channels"]
        if self.kind == "linear":
            return p["out_features"] * p["in_features"] + p["out_features"]
        return 0


class ComputationGraph:
    """Directed acyclic graph of computation units.

    Structure is validated on construction: contiguous ids, exactly one
    input and one terminal, two predecessors for `add` nodes and one for
    every other non-input node, and no cycles.
    """

    def __init__(self, nodes: list[NodeSpec], edges: list[tuple[int, int]]):
        self.nodes = list(nodes)
        self.edges = [(int(s), int(d)) for s, d in edges]
        self._preds: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        self._succs: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        self._validate()

    # -- structure -----------------------------------------------------------

    def _validate(self):
        ids = [n.id for n in self.nodes]
        if not ids:
            raise ValidationError("graph has no nodes")
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate node ids")
        if sorted(ids) != list(range(len(ids))):
            raise ValidationError("node ids must be 0..n-1")
        for n in self.nodes:
            n.validate()
        byid = {n.id: n for n in self.nodes}
        seen = set()
        for s, d in self.edges:
            if s not in byid or d not in byid:
                raise ValidationError(f"dangling edge ({s},{d})")
            if (s, d) in seen:
                raise ValidationError(f"duplicate edge ({s},{d})")
            seen.add((s, d))
            self._preds[d].append(s)  # predecessor order = edge declaration order
            self._succs[s].append(d)

        inputs = [n for n in self.nodes if n.kind == "input"]
        if len(inputs) != 1:
            raise ValidationError(f"graph needs exactly one input node, found {len(inputs)}")
        if self._preds[inputs[0].id]:
            raise ValidationError("input node cannot have predecessors")
        terminals = [n for n in self.nodes if not self._succs[n.id]]
        if len(terminals) != 1:
            raise ValidationError(f"graph needs exactly one terminal node, found {len(terminals)}")
        for n in self.nodes:
            if n.kind == "input":
                continue
            want = 2 if n.kind == "add" else 1
            got = len(self._preds[n.id])
            if got != want:
                raise ValidationError(
                    f"node {n.id} ({n.name!r}, {n.kind}) needs {want} predecessors, has {got}"
                )
        self.topo_order()  # raises on cycles

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> NodeSpec:
        return self.nodes[node_id]

    def node_by_name(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise ValidationError(f"no node named {name!r}")

    def predecessors(self, node_id: int) -> list[int]:
        return list(self._preds[node_id])

    @property
    def input_node(self) -> NodeSpec:
        return next(n for n in self.nodes if n.kind == "input")

    @property
    def terminal_node(self) -> NodeSpec:
        return next(n for n in self.nodes if not self._succs[n.id])

    def adjacency(self) -> np.ndarray:
        a = np.zeros((len(self.nodes), len(self.nodes)), dtype=np.uint8)
        for s, d in self.edges:
            a[s, d] = 1
        return a

    def topo_order(self) -> list[int]:
        """Kahn's algorithm, ties broken by ascending node id."""
        indeg = {n.id: len(self._preds[n.id]) for n in self.nodes}
        ready = sorted(i for i, d in indeg.items() if d == 0)
        order: list[int] = []
        while ready:
            cur = ready.pop(0)
            order.append(cur)
            changed = False
            for nxt in self._succs[cur]:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    ready.append(nxt)
                    changed = True
            if changed:
                ready.sort()
        if len(order) != len(self.nodes):
            raise ValidationError("graph has a cycle")
        return order

    def probe_ids(self, names: list[str] | None = None) -> list[int]:
        """Probed node ids in topological order; optionally restricted to
        an explicit name list."""
        order = self.topo_order()
        if names is None:
            return [i for i in order if self.nodes[i].probe]
        wanted = {self.node_by_name(n).id for n in names}
        return [i for i in order if i in wanted]

    # -- shape inference -----------------------------------------------------

    def output_shapes(self) -> dict[int, tuple[int, ...]]:
        """Per-node output shape for batch size 1, (channels, rows, cols)
        for spatial nodes and (features,) after flatten/linear."""
        shapes: dict[int, tuple[int, ...]] = {}
        for nid in self.topo_order():
            n = self.nodes[nid]
            p = n.params
            if n.kind == "input":
                shapes[nid] = (p["channels"], p["rows"], p["cols"])
                continue
            prev = [shapes[q] for q in self._preds[nid]]
            if n.kind == "conv2d":
                c, h, w = prev[0]
                if c != p["in_ch"]:
                    raise ValidationError(f"node {n.name!r}: expects {p['in_ch']} channels, got {c}")
                ho = (h + 2 * p["pad"] - p["kh"]) // p["stride"] + 1
                wo = (w + 2 * p["pad"] - p["kw"]) // p["stride"] + 1
                if ho < 1 or wo < 1:
                    raise ValidationError(f"node {n.name!r}: kernel does not fit {h}x{w}")
                shapes[nid] = (p["out_ch"], ho, wo)
            elif n.kind == "batchnorm2d":
                c, h, w = prev[0]
                if c != p["channels"]:
                    raise ValidationError(f"node {n.name!r}: channel mismatch {c} vs {p['channels']}")
                shapes[nid] = prev[0]
            elif n.kind == "relu":
                shapes[nid] = prev[0]
            elif n.kind == "maxpool2d":
                c, h, w = prev[0]
                k, s = p["k"], p["stride"]
                if (h - k) % s or (w - k) % s:
                    raise ValidationError(f"node {n.name!r}: {h}x{w} not divisible by pool {k}/{s}")
                shapes[nid] = (c, (h - k) // s + 1, (w - k) // s + 1)
            elif n.kind == "avgpool-global":
                c, h, w = prev[0]
                shapes[nid] = (c, 1, 1)
            elif n.kind == "add":
                if prev[0] != prev[1]:
                    raise ValidationError(f"node {n.name!r}: add operands {prev[0]} vs {prev[1]}")
                shapes[nid] = prev[0]
            elif n.kind == "flatten":
                shapes[nid] = (int(np.prod(prev[0])),)
            elif n.kind == "linear":
                (f,) = prev[0] if len(prev[0]) == 1 else (int(np.prod(prev[0])),)
                if f != p["in_features"]:
                    raise ValidationError(
                        f"node {n.name!r}: expects {p['in_features']} features, got {f}"
                    )
                shapes[nid] = (p["out_features"],)
        return shapes

    def output_width(self, node_id: int) -> int:
        """Bit width of the node's state value: channel count for spatial
        nodes, feature count for flat ones."""
        return int(self.output_shapes()[node_id][0])

    # -- serialization -------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "nodes": [
                {"id": n.id, "name": n.name, "kind": n.kind, "params": n.params, "probe": n.probe}
                for n in sorted(self.nodes, key=lambda n: n.id)
            ],
            "edges": [[s, d] for s, d in self.edges],
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ComputationGraph":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"graph file is not valid JSON: {exc}") from exc
        try:
            nodes = [
                NodeSpec(
                    id=int(n["id"]),
                    name=str(n["name"]),
                    kind=str(n["kind"]),
                    params={k: int(v) for k, v in n.get("params", {}).items()},
                    probe=bool(n.get("probe", True)),
                )
                for n in doc["nodes"]
            ]
            edges = [(int(s), int(d)) for s, d in doc["edges"]]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"graph file missing field: {exc}") from exc
        return cls(nodes, edges)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ComputationGraph":
        return cls.from_json(Path(path).read_text())


def node_type_histogram(graph: ComputationGraph) -> dict[str, int]:
    return dict(Counter(n.kind for n in graph.nodes))


# -- weights ------------------------------------------------------------------

def _split_weights(node: NodeSpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    p = node.params
    if node.kind == "conv2d":
        return {"weight": flat.reshape(p["out_ch"], p["in_ch"], p["kh"], p["kw"])}
    if node.kind == "batchnorm2d":
        c = p["channels"]
        return {
            "gamma": flat[0:c],
            "beta": flat[c : 2 * c],
            "mean": flat[2 * c : 3 * c],
            "var": flat[3 * c : 4 * c],
        }
    if node.kind == "linear":
        o, i = p["out_features"], p["in_features"]
        return {"weight": flat[: o * i].reshape(o, i), "bias": flat[o * i :]}
    return {}


def load_weights(graph: ComputationGraph, path) -> dict[int, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    total = sum(n.param_count() for n in graph.nodes)
    if len(blob) != 4 * total:
        raise ValidationError(
            f"weight blob {path}: expected {4 * total} bytes for {total} params, got {len(blob)}"
        )
    flat = np.frombuffer(blob, dtype="<f4")
    weights: dict[int, dict[str, np.ndarray]] = {}
    offset = 0
    for n in sorted(graph.nodes, key=lambda n: n.id):
        count = n.param_count()
        if count:
            weights[n.id] = _split_weights(n, flat[offset : offset + count].copy())
            offset += count
    return weights


def save_weights(graph: ComputationGraph, weights: dict[int, dict[str, np.ndarray]], path) -> None:
    parts = []
    for n in sorted(graph.nodes, key=lambda n: n.id):
        if not n.param_count():
            continue
        w = weights[n.id]
        if n.kind == "conv2d":
            parts.append(w["weight"])
        elif n.kind == "batchnorm2d":
            parts.extend([w["gamma"], w["beta"], w["mean"], w["var"]])
        elif n.kind == "linear":
            parts.extend([w["weight"], w["bias"]])
    flat = np.concatenate([np.asarray(p, dtype="<f4").reshape(-1) for p in parts])
    Path(path).write_bytes(flat.tobytes())


def load_graph(graph_path, weights_path):
    """Load and validate a graph file plus its weight blob."""
    graph = ComputationGraph.load(graph_path)
    graph.output_shapes()  # full static shape check
    return graph, load_weights(graph, weights_path)


# -- DOT export ---------------------------------------------------------------

# 10-step blue-to-red ramp spanning utilization percents 1..31; values
# outside clamp to the ramp ends, uncolored nodes render gray.
RAMP_LOW_PCT = 1.0
RAMP_HIGH_PCT = 31.0
COLOR_RAMP = tuple(
    "#%02x%02x%02x"
    % tuple(int(round(255 * v)) for v in colorsys.hsv_to_rgb(2.0 / 3.0 * (1 - i / 9.0), 1.0, 0.8))
    for i in range(10)
)
_GRAY = "#c8c8c8"


def ramp_color(percent: float) -> str:
    span = (RAMP_HIGH_PCT - RAMP_LOW_PCT) / len(COLOR_RAMP)
    clamped = min(max(percent, RAMP_LOW_PCT), RAMP_HIGH_PCT)
    idx = min(int((clamped - RAMP_LOW_PCT) / span), len(COLOR_RAMP) - 1)
    return COLOR_RAMP[idx]


def export_dot(graph: ComputationGraph, coloring: dict[int, float] | None = None) -> str:
    coloring = coloring or {}
    known = {n.id for n in graph.nodes}
    for nid in coloring:
        if nid not in known:
            raise ValidationError(f"coloring references unknown node id {nid}")
    lines = ["digraph computation {", "  rankdir=TB;", '  node [shape=box, style="filled"];']
    for n in sorted(graph.nodes, key=lambda n: n.id):
        if n.id in coloring:
            pct = float(coloring[n.id])
            fill = ramp_color(pct)
            label = f"{n.name}\\n{round(pct)}%"
        else:
            fill = _GRAY
            label = n.name
        lines.append(f'  n{n.id} [label="{label}", fillcolor="{fill}"];')
    for s, d in graph.edges:
        lines.append(f"  n{s} -> n{d};")
    lines.append("}")
    return "\n".join(lines) + "\n"


# -- reference architecture ----------------------------------------------------

def mini_resnet(num_classes: int, in_rows: int = 32, in_cols: int = 32) -> ComputationGraph:
    """Small residual network: conv stem, two 16-channel identity blocks,
    one stride-2 32-channel block with a projection shortcut, global
    average pooling, and a linear head.

    Channel widths 16/32 keep per-node state spaces (2^16, 2^32) small
    enough that occupancy fractions stay measurably nonzero at desk scale.
    """
    if num_classes < 2:
        raise ValidationError("mini_resnet needs at least 2 classes")
    nodes: list[NodeSpec] = []
    edges: list[tuple[int, int]] = []

    def add_node(name, kind, params=None, probe=True):
        nid = len(nodes)
        nodes.append(NodeSpec(nid, name, kind, params or {}, probe))
        return nid

    def chain(src, dst):
        edges.append((src, dst))
        return dst

    inp = add_node("input", "input", {"channels": 3, "rows": in_rows, "cols": in_cols}, probe=False)
    cur = chain(inp, add_node("stem.conv", "conv2d",
                              {"in_ch": 3, "out_ch": 16, "kh": 3, "kw": 3, "stride": 1, "pad": 1}))
    cur = chain(cur, add_node("stem.bn", "batchnorm2d", {"channels": 16}))
    cur = chain(cur, add_node("stem.relu", "relu"))
    cur = chain(cur, add_node("stem.maxpool", "maxpool2d", {"k": 2, "stride": 2}))

    for b in (1, 2):
        skip = cur
        cur = chain(cur, add_node(f"block{b}.conv1", "conv2d",
                                  {"in_ch": 16, "out_ch": 16, "kh": 3, "kw": 3, "stride": 1, "pad": 1}))
        cur = chain(cur, add_node(f"block{b}.bn1", "batchnorm2d", {"channels": 16}))
        cur = chain(cur, add_node(f"block{b}.relu1", "relu"))
        cur = chain(cur, add_node(f"block{b}.conv2", "conv2d",
                                  {"in_ch": 16, "out_ch": 16, "kh": 3, "kw": 3, "stride": 1, "pad": 1}))
        cur = chain(cur, add_node(f"block{b}.bn2", "batchnorm2d", {"channels": 16}))
        addn = add_node(f"block{b}.add", "add")
        edges.append((skip, addn))
        edges.append((cur, addn))
        cur = chain(addn, add_node(f"block{b}.relu2", "relu"))

    skip = cur
    cur = chain(cur, add_node("block3.conv1", "conv2d",
                              {"in_ch": 16, "out_ch": 32, "kh": 3, "kw": 3, "stride": 2, "pad": 1}))
    cur = chain(cur, add_node("block3.bn1", "batchnorm2d", {"channels": 32}))
    cur = chain(cur, add_node("block3.relu1", "relu"))
    cur = chain(cur, add_node("block3.conv2", "conv2d",
                              {"in_ch": 32, "out_ch": 32, "kh": 3, "kw": 3, "stride": 1, "pad": 1}))
    cur = chain(cur, add_node("block3.bn2", "batchnorm2d", {"channels": 32}))
    proj = chain(skip, add_node("block3.proj.conv", "conv2d",
                                {"in_ch": 16, "out_ch": 32, "kh": 1, "kw": 1, "stride": 2, "pad": 0}))
    proj = chain(proj, add_node("block3.proj.bn", "batchnorm2d", {"channels": 32}))
    addn = add_node("block3.add", "add")
    edges.append((proj, addn))
    edges.append((cur, addn))
    cur = chain(addn, add_node("block3.relu2", "relu"))

    cur = chain(cur, add_node("head.gap", "avgpool-global"))
    cur = chain(cur, add_node("head.flatten", "flatten"))
    chain(cur, add_node("head.linear", "linear", {"in_features": 32, "out_features": num_classes}))
    return ComputationGraph(nodes, edges)


def reference_graph_path() -> Path:
    """Shipped 5-class reference graph (data file)."""
    return Path(str(resources.files("statelens").joinpath("data/mini_resnet_c5.json")))
