"""Deterministic forward evaluation of a computation graph.

Evaluation is inference-mode only (batchnorm uses stored statistics), so
results are exactly batch-equivariant and bit-identical across repeated
runs. Convolution lowers to an im2col matrix product whose per-output
reduction order is fixed, which keeps probe tensors stable regardless of
how callers parallelize over images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError
from .graph import ComputationGraph
from .tensor import Tensor

BN_EPS = 1e-5


@dataclass
class ActivationRecord:
    node_id: int
    array: np.ndarray  # (batch, channels, rows, cols) or (batch, features)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold (B,C,H,W) into columns of shape (C*kh*kw, B*Ho*Wo)."""
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B,C,Ho,Wo,kh,kw)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def col2im(cols: np.ndarray, x_shape, kh, kw, stride, pad):
    """Scatter-add columns back to the padded input layout (adjoint of im2col)."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(c, kh, kw, b, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                cols6[:, i, j].transpose(1, 0, 2, 3)
            )
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


def conv2d(x: np.ndarray, weight: np.ndarray, stride: int, pad: int) -> np.ndarray:
    o, i, kh, kw = weight.shape
    cols, ho, wo = im2col(x, kh, kw, stride, pad)
    out = weight.reshape(o, i * kh * kw) @ cols
    return out.reshape(o, x.shape[0], ho, wo).transpose(1, 0, 2, 3)


def batchnorm2d(x, gamma, beta, mean, var, eps=BN_EPS):
    scale = (gamma / np.sqrt(var + np.asarray(eps, dtype=var.dtype)))[None, :, None, None]
    return (x - mean[None, :, None, None]) * scale + beta[None, :, None, None]


def relu(x):
    return np.maximum(x, np.asarray(0, dtype=x.dtype))


def maxpool2d(x, k: int, stride: int):
    b, c, h, w = x.shape
    if k != stride:
        raise ValidationError("only non-overlapping pooling windows are supported")
    if h % k or w % k:
        raise ValidationError(f"pool {k} does not divide {h}x{w}")
    return x.reshape(b, c, h // k, k, w // k, k).max(axis=(3, 5))


def global_avgpool(x):
    return x.mean(axis=(2, 3), keepdims=True)


def linear(x, weight, bias):
    return x @ weight.T + bias


def flatten(x):
    return x.reshape(x.shape[0], -1)


def forward(
    graph: ComputationGraph,
    weights: dict[int, dict[str, np.ndarray]],
    batch: Tensor | np.ndarray,
    probe_ids: list[int] | None = None,
    check_finite: bool = True,
):
    """Evaluate the graph on an image batch.

    Returns (logits, records) where records holds one ActivationRecord per
    probed node in topological order. `probe_ids` restricts which probes
    are recorded; None means every node flagged probe=True.

    Images are evaluated one at a time and concatenated: every image takes
    the identical code path, so an N-image batch equals the concatenation
    of N single-image runs bit for bit.
    """
    x = batch.array if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float32)
    inp = graph.input_node.params
    expected = (inp["channels"], inp["rows"], inp["cols"])
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValidationError(f"batch shape {x.shape} does not match input {('N',) + expected}")
    if probe_ids is None:
        probe_ids = [n.id for n in graph.nodes if n.probe]

    if x.shape[0] == 1:
        return _forward_single(graph, weights, x, probe_ids, check_finite)
    per_image = [
        _forward_single(graph, weights, x[i : i + 1], probe_ids, check_finite)
        for i in range(x.shape[0])
    ]
    logits = np.concatenate([logit for logit, _ in per_image])
    records = [
        ActivationRecord(nid, np.concatenate([recs[k].array for _, recs in per_image]))
        for k, nid in enumerate(pid for pid in graph.topo_order() if pid in set(probe_ids))
    ]
    return logits, records


def _forward_single(graph, weights, x, probe_ids, check_finite):
    wanted = set(probe_ids)
    order = graph.topo_order()
    acts: dict[int, np.ndarray] = {}
    records: list[ActivationRecord] = []
    refcount = {nid: 0 for nid in order}
    for s, d in graph.edges:
        refcount[s] += 1
    terminal_id = graph.terminal_node.id

    for nid in order:
        node = graph.nodes[nid]
        preds = graph.predecessors(nid)
        p = node.params
        if node.kind == "input":
            out = x
        elif node.kind == "conv2d":
            out = conv2d(acts[preds[0]], weights[nid]["weight"], p["stride"], p["pad"])
        elif node.kind == "batchnorm2d":
            w = weights[nid]
            out = batchnorm2d(acts[preds[0]], w["gamma"], w["beta"], w["mean"], w["var"])
        elif node.kind == "relu":
            out = relu(acts[preds[0]])
        elif node.kind == "maxpool2d":
            out = maxpool2d(acts[preds[0]], p["k"], p["stride"])
        elif node.kind == "avgpool-global":
            out = global_avgpool(acts[preds[0]])
        elif node.kind == "add":
            out = acts[preds[0]] + acts[preds[1]]
        elif node.kind == "flatten":
            out = flatten(acts[preds[0]])
        elif node.kind == "linear":
            out = linear(acts[preds[0]], weights[nid]["weight"], weights[nid]["bias"])
        else:  # pragma: no cover - kinds validated at load
            raise ValidationError(f"unknown kind {node.kind!r}")

        if check_finite and not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite values produced at node {node.name!r}")
        acts[nid] = out
        if nid in wanted:
            records.append(ActivationRecord(nid, out))
        for q in preds:  # drop tensors nothing downstream will read again
            refcount[q] -= 1
            if refcount[q] == 0 and q != terminal_id:
                acts.pop(q, None)

    return acts[terminal_id], records


def predict(graph, weights, batch) -> np.ndarray:
    logits, _ = forward(graph, weights, batch, probe_ids=[])
    return np.argmax(logits, axis=1)
