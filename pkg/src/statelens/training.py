"""From-scratch training of computation graphs with SGD + momentum.

Each kernel comes as a forward/backward pair built around an explicit
cache, so analytic gradients can be checked against finite differences
kernel by kernel. Kernels are dtype-generic (tests run them in float64);
the trainer itself runs in float32.

Maxpool gradient routes to the first maximal element in row-major window
scan order, and gradient accumulation follows topological order, so a
fixed seed reproduces bit-identical final weights on one platform.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .errors import NumericError, ValidationError
from .graph import ComputationGraph, load_graph, save_weights

BN_EPS = engine.BN_EPS
BN_MOMENTUM = 0.1


# -- kernel forward/backward pairs ---------------------------------------------

def conv2d_forward(x, weight, stride, pad):
    o, i, kh, kw = weight.shape
    cols, ho, wo = engine.im2col(x, kh, kw, stride, pad)
    out = (weight.reshape(o, -1) @ cols).reshape(o, x.shape[0], ho, wo).transpose(1, 0, 2, 3)
    return out, (cols, x.shape, weight, stride, pad)


def conv2d_backward(dy, cache):
    cols, x_shape, weight, stride, pad = cache
    o, i, kh, kw = weight.shape
    dy_flat = dy.transpose(1, 0, 2, 3).reshape(o, -1)
    dweight = (dy_flat @ cols.T).reshape(weight.shape)
    dcols = weight.reshape(o, -1).T @ dy_flat
    dx = engine.col2im(dcols, x_shape, kh, kw, stride, pad)
    return dx, dweight


def batchnorm2d_train_forward(x, gamma, beta, running_mean, running_var,
                              momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch statistics over (batch, rows, cols); running stats updated with
    an exponential moving average (unbiased variance, matching inference)."""
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))  # biased, used for normalization
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    unbiased = var * (n / max(n - 1, 1))
    new_rm = (1 - momentum) * running_mean + momentum * mean
    new_rv = (1 - momentum) * running_var + momentum * unbiased
    return out, (xhat, inv_std, gamma, n), new_rm.astype(x.dtype), new_rv.astype(x.dtype)


def batchnorm2d_backward(dy, cache):
    xhat, inv_std, gamma, n = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    dx = (inv_std[None, :, None, None] / n) * (
        n * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, np.asarray(0, dtype=x.dtype)), (x > 0)


def relu_backward(dy, cache):
    return dy * cache


def maxpool2d_forward(x, k, stride):
    b, c, h, w = x.shape
    if k != stride or h % k or w % k:
        raise ValidationError(f"pool {k}/{stride} does not tile {h}x{w}")
    win = x.reshape(b, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // k, w // k, k * k)
    arg = win.argmax(axis=-1)  # first maximal index in window scan order
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape, k)


def maxpool2d_backward(dy, cache):
    arg, x_shape, k = cache
    b, c, h, w = x_shape
    dwin = np.zeros((b, c, h // k, w // k, k * k), dtype=dy.dtype)
    np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
    dwin = dwin.reshape(b, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
    return dwin.reshape(b, c, h, w)


def global_avgpool_forward(x):
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def global_avgpool_backward(dy, cache):
    b, c, h, w = cache
    return np.broadcast_to(dy / (h * w), (b, c, h, w)).copy()


def linear_forward(x, weight, bias):
    return x @ weight.T + bias, (x, weight)


def linear_backward(dy, cache):
    x, weight = cache
    return dy @ weight, dy.T @ x, dy.sum(axis=0)


def flatten_forward(x):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(dy, cache):
    return dy.reshape(cache)


def cross_entropy(logits, labels, smoothing=0.0):
    """Mean softmax cross-entropy with optional label smoothing.
    Returns (loss, dlogits)."""
    n, c = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    targets = np.full((n, c), smoothing / c, dtype=logits.dtype)
    targets[np.arange(n), labels] += 1.0 - smoothing
    logp = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = float(-(targets * logp).sum() / n)
    dlogits = (probs - targets) / n
    return loss, dlogits


# -- graph-level training --------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 1
    label_smoothing: float = 0.0

    def validate(self):
        if self.lr <= 0:
            raise ValidationError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValidationError("label smoothing must be in [0,1)")


@dataclass
class TrainedModel:
    graph: ComputationGraph
    weights: dict[int, dict[str, np.ndarray]]
    clean_accuracy: float
    attack_success: float | None
    provenance: dict = field(default_factory=dict)


def init_weights(graph: ComputationGraph, seed: int) -> dict[int, dict[str, np.ndarray]]:
    """He-normal conv/linear init; identity batchnorm."""
    rng = np.random.default_rng(seed)
    weights: dict[int, dict[str, np.ndarray]] = {}
    for n in sorted(graph.nodes, key=lambda n: n.id):
        p = n.params
        if n.kind == "conv2d":
            fan_in = p["in_ch"] * p["kh"] * p["kw"]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (p["out_ch"], p["in_ch"], p["kh"], p["kw"]))
            weights[n.id] = {"weight": w.astype(np.float32)}
        elif n.kind == "batchnorm2d":
            c = p["channels"]
            weights[n.id] = {
                "gamma": np.ones(c, dtype=np.float32),
                "beta": np.zeros(c, dtype=np.float32),
                "mean": np.zeros(c, dtype=np.float32),
                "var": np.ones(c, dtype=np.float32),
            }
        elif n.kind == "linear":
            o, i = p["out_features"], p["in_features"]
            w = rng.normal(0.0, np.sqrt(2.0 / i), (o, i))
            weights[n.id] = {"weight": w.astype(np.float32), "bias": np.zeros(o, dtype=np.float32)}
    return weights


_TRAINABLE = {"conv2d": ("weight",), "batchnorm2d": ("gamma", "beta"), "linear": ("weight", "bias")}


def _train_forward(graph, weights, x):
    """Training-mode forward pass; returns (logits, caches) and updates
    batchnorm running statistics in place."""
    order = graph.topo_order()
    acts: dict[int, np.ndarray] = {}
    caches: dict[int, object] = {}
    for nid in order:
        node = graph.nodes[nid]
        preds = graph.predecessors(nid)
        p = node.params
        if node.kind == "input":
            acts[nid] = x
        elif node.kind == "conv2d":
            acts[nid], caches[nid] = conv2d_forward(acts[preds[0]], weights[nid]["weight"],
                                                    p["stride"], p["pad"])
        elif node.kind == "batchnorm2d":
            w = weights[nid]
            out, cache, rm, rv = batchnorm2d_train_forward(
                acts[preds[0]], w["gamma"], w["beta"], w["mean"], w["var"])
            acts[nid], caches[nid] = out, cache
            w["mean"], w["var"] = rm, rv
        elif node.kind == "relu":
            acts[nid], caches[nid] = relu_forward(acts[preds[0]])
        elif node.kind == "maxpool2d":
            acts[nid], caches[nid] = maxpool2d_forward(acts[preds[0]], p["k"], p["stride"])
        elif node.kind == "avgpool-global":
            acts[nid], caches[nid] = global_avgpool_forward(acts[preds[0]])
        elif node.kind == "add":
            acts[nid] = acts[preds[0]] + acts[preds[1]]
        elif node.kind == "flatten":
            acts[nid], caches[nid] = flatten_forward(acts[preds[0]])
        elif node.kind == "linear":
            w = weights[nid]
            acts[nid], caches[nid] = linear_forward(acts[preds[0]], w["weight"], w["bias"])
    return acts[graph.terminal_node.id], acts, caches


def _train_backward(graph, weights, acts, caches, dlogits):
    """Reverse-topological backprop; returns parameter gradients keyed like
    the weight map."""
    grads: dict[int, dict[str, np.ndarray]] = {}
    dacts: dict[int, np.ndarray] = {graph.terminal_node.id: dlogits}
    for nid in reversed(graph.topo_order()):
        node = graph.nodes[nid]
        dy = dacts.pop(nid, None)
        if dy is None or node.kind == "input":
            continue
        preds = graph.predecessors(nid)

        def send(pid, grad):
            if pid in dacts:
                dacts[pid] = dacts[pid] + grad
            else:
                dacts[pid] = grad

        if node.kind == "conv2d":
            dx, dw = conv2d_backward(dy, caches[nid])
            grads[nid] = {"weight": dw}
            send(preds[0], dx)
        elif node.kind == "batchnorm2d":
            dx, dgamma, dbeta = batchnorm2d_backward(dy, caches[nid])
            grads[nid] = {"gamma": dgamma, "beta": dbeta}
            send(preds[0], dx)
        elif node.kind == "relu":
            send(preds[0], relu_backward(dy, caches[nid]))
        elif node.kind == "maxpool2d":
            send(preds[0], maxpool2d_backward(dy, caches[nid]))
        elif node.kind == "avgpool-global":
            send(preds[0], global_avgpool_backward(dy, caches[nid]))
        elif node.kind == "add":
            send(preds[0], dy)
            send(preds[1], dy)
        elif node.kind == "flatten":
            send(preds[0], flatten_backward(dy, caches[nid]))
        elif node.kind == "linear":
            dx, dw, db = linear_backward(dy, caches[nid])
            grads[nid] = {"weight": dw, "bias": db}
            send(preds[0], dx)
    return grads


class SGD:
    def __init__(self, graph, weights, lr, momentum):
        self.graph = graph
        self.weights = weights
        self.lr = lr
        self.momentum = momentum
        self.velocity = {
            n.id: {k: np.zeros_like(weights[n.id][k]) for k in _TRAINABLE[n.kind]}
            for n in graph.nodes
            if n.kind in _TRAINABLE
        }

    def step(self, grads):
        for nid in sorted(grads):
            for key, g in grads[nid].items():
                v = self.velocity[nid][key]
                v *= self.momentum
                v -= self.lr * g.astype(v.dtype)
                self.weights[nid][key] = self.weights[nid][key] + v


def accuracy(graph, weights, images, labels, batch_size=64) -> float:
    hits = 0
    for start in range(0, len(images), batch_size):
        batch = images[start : start + batch_size]
        pred = engine.predict(graph, weights, batch)
        hits += int((pred == labels[start : start + batch_size]).sum())
    return hits / len(images)


def train(graph: ComputationGraph, dataset, cfg: TrainConfig, log=None) -> TrainedModel:
    """Train the graph on a generated dataset directory handle
    (see datagen.Dataset). Held-out clean accuracy is always recorded;
    attack success is recorded when the dataset carries a trigger."""
    from . import datagen  # local import to keep module load graphs acyclic

    cfg.validate()
    num_classes = graph.terminal_node.params["out_features"]
    if dataset.manifest.classes != num_classes:
        raise ValidationError(
            f"dataset has {dataset.manifest.classes} classes, head expects {num_classes}"
        )

    train_x, train_y, test_x, test_y = dataset.training_arrays()
    weights = init_weights(graph, cfg.seed)
    opt = SGD(graph, weights, cfg.lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed ^ 0x5EED)

    n = len(train_x)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            logits, acts, caches = _train_forward(graph, weights, train_x[idx])
            loss, dlogits = cross_entropy(logits, train_y[idx], cfg.label_smoothing)
            if not np.isfinite(loss):
                raise NumericError(f"training diverged (loss not finite, epoch {epoch})")
            total_loss += loss * len(idx)
            grads = _train_backward(graph, weights, acts, caches, dlogits)
            opt.step(grads)
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs}: loss {total_loss / n:.4f}")

    clean_acc = accuracy(graph, weights, test_x, test_y)
    attack = None
    trig = dataset.manifest.trigger
    if trig.kind != "none":
        tx, _ = dataset.triggered_eval_arrays()
        if len(tx):
            pred = engine.predict(graph, weights, tx)
            attack = float((pred == trig.target_class).mean())
    return TrainedModel(
        graph=graph,
        weights=weights,
        clean_accuracy=float(clean_acc),
        attack_success=attack,
        provenance={
            "dataset_hash": dataset.manifest.dataset_hash,
            "seed": cfg.seed,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "lr": cfg.lr,
            "momentum": cfg.momentum,
            "label_smoothing": cfg.label_smoothing,
        },
    )


def config_digest(cfg: TrainConfig, dataset_hash: str) -> str:
    text = f"{cfg}|{dataset_hash}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- persistence: graph file + weight blob + sidecar metadata text ----------------

def save_model(model: TrainedModel, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.graph.save(out / "graph.json")
    save_weights(model.graph, model.weights, out / "weights.bin")
    lines = [f"clean_accuracy={model.clean_accuracy!r}"]
    if model.attack_success is not None:
        lines.append(f"attack_success={model.attack_success!r}")
    for key, value in model.provenance.items():
        lines.append(f"{key}={value}")
    (out / "metadata.txt").write_text("\n".join(lines) + "\n")


def load_model(model_dir) -> TrainedModel:
    root = Path(model_dir)
    graph, weights = load_graph(root / "graph.json", root / "weights.bin")
    meta: dict[str, str] = {}
    meta_path = root / "metadata.txt"
    if meta_path.exists():
        for line in meta_path.read_text().splitlines():
            if "=" in line:
                key, value = line.split("=", 1)
                meta[key.strip()] = value.strip()
    attack = meta.get("attack_success")
    return TrainedModel(
        graph=graph,
        weights=weights,
        clean_accuracy=float(meta.get("clean_accuracy", "nan")),
        attack_success=None if attack is None else float(attack),
        provenance={k: v for k, v in meta.items()
                    if k not in ("clean_accuracy", "attack_success")},
    )
