"""Reference CNN: architecture, Adadelta training with early stopping, checkpoints."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Dataset, VersionError, MagicError
from .tensor import (
    Conv2D, Dense, Dropout, Flatten, Graph, MaxPool2D, NumericOverflowError, ReLU, SoftPlus,
    backprop, softmax,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "xagg-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Architecture:
    layers: tuple
    input_shape: tuple = (1, 28, 28)

    def to_json(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [dict(l) for l in self.layers]}

    @classmethod
    def from_json(cls, obj: dict) -> "Architecture":
        return cls(tuple(obj["layers"]), tuple(obj["input_shape"]))


def build_reference_cnn(n_classes: int = 10) -> Architecture:
    """conv32 -> conv64 -> maxpool -> dropout .25 -> dense128 -> dropout .5 -> logits."""
    return Architecture((
        {"type": "conv2d", "filters": 32, "kernel": [3, 3]},
        {"type": "relu"},
        {"type": "conv2d", "filters": 64, "kernel": [3, 3]},
        {"type": "relu"},
        {"type": "maxpool2d", "pool": 2},
        {"type": "dropout", "rate": 0.25},
        {"type": "flatten"},
        {"type": "dense", "units": 128},
        {"type": "relu"},
        {"type": "dropout", "rate": 0.5},
        {"type": "dense", "units": n_classes},
    ))


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def compile_graph(arch: Architecture, seed: int = 0, weights: list | None = None) -> Graph:
    """Instantiate a graph; fresh Glorot-uniform weights unless ``weights`` is given.

    ``weights`` is a list with one ``{name: array}`` dict per layer.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(arch.input_shape)
    layers = []
    for i, spec in enumerate(arch.layers):
        kind = spec["type"]
        given = weights[i] if weights is not None else None
        if kind == "conv2d":
            kh, kw = spec["kernel"]
            f, c = spec["filters"], shape[0]
            if given is None:
                given = {"weight": _glorot(rng, (f, c, kh, kw), c * kh * kw, f * kh * kw), "bias": np.zeros(f)}
            layer = Conv2D(given["weight"], given["bias"])
        elif kind == "dense":
            n_in = int(np.prod(shape))
            if given is None:
                given = {"weight": _glorot(rng, (n_in, spec["units"]), n_in, spec["units"]),
                         "bias": np.zeros(spec["units"])}
            layer = Dense(given["weight"], given["bias"])
        elif kind == "relu":
            layer = ReLU()
        elif kind == "softplus":
            layer = SoftPlus(spec.get("beta", 1.0))
        elif kind == "maxpool2d":
            layer = MaxPool2D(spec.get("pool", 2))
        elif kind == "dropout":
            layer = Dropout(spec["rate"])
        elif kind == "flatten":
            layer = Flatten()
        else:
            raise ValueError(f"unknown layer type {kind!r}")
        shape = layer.output_shape(shape)
        layers.append(layer)
    return Graph(layers, arch.input_shape)


@dataclass
class Checkpoint:
    architecture: Architecture
    graph: Graph
    metadata: dict = field(default_factory=dict)

    def weights(self) -> list[dict]:
        return [dict(layer.params) for layer in self.graph.layers]


def new_checkpoint(arch: Architecture, seed: int = 0, **metadata) -> Checkpoint:
    return Checkpoint(arch, compile_graph(arch, seed), {"seed": seed, **metadata})


@dataclass(frozen=True)
class TrainConfig:
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0
    batch_size: int = 128
    max_epochs: int = 30
    patience: int = 3
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


class Adadelta:
    """Zeiler's Adadelta, scaled by a learning rate as in common frameworks."""

    def __init__(self, rho=0.95, eps=1e-6, lr=1.0):
        self.rho, self.eps, self.lr = rho, eps, lr
        self.sq_grad: dict = {}
        self.sq_step: dict = {}

    def step(self, key, param: np.ndarray, grad: np.ndarray) -> None:
        rho, eps = self.rho, self.eps
        acc = self.sq_grad.setdefault(key, np.zeros_like(param))
        acc_step = self.sq_step.setdefault(key, np.zeros_like(param))
        acc *= rho
        acc += (1.0 - rho) * grad * grad
        delta = np.sqrt(acc_step + eps) / np.sqrt(acc + eps) * grad
        acc_step *= rho
        acc_step += (1.0 - rho) * delta * delta
        param -= self.lr * delta


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def evaluate(graph: Graph, images: np.ndarray, labels: np.ndarray, batch_size: int = 500) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in inference mode."""
    total, correct = 0.0, 0
    for start in range(0, len(labels), batch_size):
        logits = graph.run(images[start:start + batch_size]).logits
        y = labels[start:start + batch_size]
        loss, _ = cross_entropy(logits, y)
        total += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return total / len(labels), correct / len(labels)


def split_train_val(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 1]).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(arch: Architecture, dataset: Dataset, cfg: TrainConfig = TrainConfig()) -> Checkpoint:
    """Train with Adadelta; keep the weights of the best validation-loss epoch."""
    graph = compile_graph(arch, cfg.seed)
    train_idx, val_idx = split_train_val(len(dataset), cfg.val_fraction, cfg.seed)
    x_val, y_val = dataset.images[val_idx], dataset.labels[val_idx]
    rng = np.random.default_rng([cfg.seed, 2])
    opt = Adadelta(cfg.rho, cfg.eps, cfg.lr)
    trace = []
    best = (np.inf, -1, None)
    started = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            try:
                tape = graph.run(dataset.images[batch], train=True, rng=rng)
            except NumericOverflowError as exc:
                raise TrainingDivergedError(f"non-finite activations at epoch {epoch}, batch offset {start}: {exc}") from exc
            loss, seed = cross_entropy(tape.logits, dataset.labels[batch])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch offset {start}")
            deltas = backprop(tape, seed)
            for k, layer in enumerate(graph.layers):
                if layer.params:
                    for name, g in layer.param_grads(tape.caches[k], deltas[k + 1]).items():
                        opt.step((k, name), layer.params[name], g)
            losses.append(loss)
        val_loss, val_acc = evaluate(graph, x_val, y_val)
        trace.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss, "val_acc": val_acc})
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f", epoch, trace[-1]["train_loss"], val_loss, val_acc)
        if val_loss < best[0]:
            best = (val_loss, epoch, [copy.deepcopy(layer.params) for layer in graph.layers])
        elif epoch - best[1] >= cfg.patience:
            break
    best_graph = compile_graph(arch, weights=best[2])
    metadata = {
        "dataset": dataset.name,
        "seed": cfg.seed,
        "epochs": len(trace),
        "best_epoch": best[1],
        "val_loss": best[0],
        "val_acc": trace[best[1]]["val_acc"],
        "trace": trace,
        "channel_mean": list(dataset.channel_mean),
        "train_config": asdict(cfg),
        "train_seconds": time.perf_counter() - started,
    }
    return Checkpoint(arch, best_graph, metadata)


def predict(model, x) -> tuple:
    """Predicted class (lowest index on ties) and probability vector(s)."""
    graph = as_graph(model)
    xb, single = graph.batch(x)
    probs = softmax(graph.run(xb).logits)
    cls = probs.argmax(axis=1)
    if single:
        return int(cls[0]), probs[0]
    return cls, probs


def as_graph(model) -> Graph:
    return model.graph if isinstance(model, Checkpoint) else model


def accuracy(model, images, labels) -> float:
    return evaluate(as_graph(model), images, labels)[1]


# -- checkpoint file ---------------------------------------------------------

def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """JSON header line followed by little-endian float64 blobs in layer order."""
    blobs, entries, offset = [], [], 0
    for i, layer in enumerate(ckpt.graph.layers):
        for name in sorted(layer.params):
            data = np.ascontiguousarray(layer.params[name], dtype="<f8").tobytes()
            entries.append({"layer": i, "name": name, "shape": list(layer.params[name].shape),
                            "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": ckpt.architecture.to_json(),
        "metadata": ckpt.metadata,
        "blobs": entries,
    }
    return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + b"".join(blobs)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    line_end = raw.find(b"\n")
    if line_end < 0:
        raise MagicError("checkpoint header not terminated")
    try:
        header = json.loads(raw[:line_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MagicError(f"checkpoint header is not JSON: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise MagicError(f"not a checkpoint: format {header.get('format')!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {header.get('version')}, expected {CHECKPOINT_VERSION}")
    arch = Architecture.from_json(header["architecture"])
    body = raw[line_end + 1:]
    weights = [dict() for _ in arch.layers]
    for entry in header["blobs"]:
        chunk = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise MagicError("checkpoint blob truncated")
        weights[entry["layer"]][entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    for spec, w in zip(arch.layers, weights):
        if spec["type"] in ("conv2d", "dense") and set(w) != {"weight", "bias"}:
            raise MagicError(f"checkpoint lacks parameters for a {spec['type']} layer")
    return Checkpoint(arch, compile_graph(arch, weights=weights), header["metadata"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
