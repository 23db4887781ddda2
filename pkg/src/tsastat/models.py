"""1D-CNN classifiers, SGD training and checkpoint files.

Three reference architectures are provided (``A0``, ``A1``, ``A2``).  Convolutions
are valid-mode with stride 1 and pooling is non-overlapping.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

__all__ = [
    "Conv1D",
    "MaxPool",
    "Dense",
    "ReLU",
    "Flatten",
    "OutputDense",
    "ArchSpec",
    "ARCHITECTURES",
    "Network",
    "CheckpointError",
    "TrainingDivergedError",
    "init_network",
    "train",
    "accuracy",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tsastat-net-v1"


@dataclass(frozen=True)
class Conv1D:
    filters: int
    kernel: int


@dataclass(frozen=True)
class MaxPool:
    width: int


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class OutputDense:
    """Final affine layer producing one logit per class."""


_LAYER_TYPES = {c.__name__: c for c in (Conv1D, MaxPool, Dense, ReLU, Flatten, OutputDense)}


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple

    def __post_init__(self):
        if not self.layers or not isinstance(self.layers[-1], OutputDense):
            raise ValueError("an architecture must end with OutputDense")

    def to_list(self) -> list:
        return [[type(l).__name__, *vars(l).values()] for l in self.layers]

    @classmethod
    def from_list(cls, name: str, items) -> "ArchSpec":
        return cls(name, tuple(_LAYER_TYPES[t](*args) for t, *args in items))


ARCHITECTURES = {
    "A0": ArchSpec("A0", (Conv1D(66, 12), ReLU(), MaxPool(12), Flatten(),
                          Dense(1024), ReLU(), OutputDense())),
    "A1": ArchSpec("A1", (Conv1D(20, 12), ReLU(), MaxPool(2), Flatten(),
                          Dense(512), ReLU(), OutputDense())),
    "A2": ArchSpec("A2", (Conv1D(100, 5), ReLU(), Conv1D(50, 5), ReLU(), MaxPool(4), Flatten(),
                          Dense(200), ReLU(), Dense(100), ReLU(), OutputDense())),
}


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(ad.NumericalError):
    pass


def _param_shapes(arch: ArchSpec, input_shape, label_count) -> list[tuple[str, tuple]]:
    channels, length = input_shape
    flat = None
    shapes = []
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Conv1D):
            if flat is not None:
                raise ValueError("Conv1D after Flatten")
            if layer.kernel > length:
                raise ValueError(f"layer {i}: kernel {layer.kernel} longer than input length {length}")
            shapes += [(f"l{i}.w", (layer.filters, channels, layer.kernel)), (f"l{i}.b", (layer.filters, 1))]
            channels, length = layer.filters, length - layer.kernel + 1
        elif isinstance(layer, MaxPool):
            length //= layer.width
            if length < 1:
                raise ValueError(f"layer {i}: pooling width {layer.width} leaves no output")
        elif isinstance(layer, Flatten):
            flat = channels * length
        elif isinstance(layer, (Dense, OutputDense)):
            if flat is None:
                flat = channels * length
            units = label_count if isinstance(layer, OutputDense) else layer.units
            shapes += [(f"l{i}.w", (flat, units)), (f"l{i}.b", (units,))]
            flat = units
    return shapes


@dataclass
class Network:
    """A classifier ``R^{n x T} -> {0..label_count-1}`` with named parameters."""

    arch: ArchSpec
    params: dict[str, np.ndarray]
    label_count: int
    input_shape: tuple[int, int]
    seed: int | None = None
    label_map: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = dict(_param_shapes(self.arch, self.input_shape, self.label_count))
        if set(expected) != set(self.params):
            raise ValueError("parameter names do not match the architecture")
        for k, shape in expected.items():
            if tuple(np.shape(self.params[k])) != shape:
                raise ValueError(f"parameter {k} has shape {np.shape(self.params[k])}, expected {shape}")
        self.input_shape = tuple(self.input_shape)

    @property
    def param_names(self) -> list[str]:
        return [k for k, _ in _param_shapes(self.arch, self.input_shape, self.label_count)]

    def build(self, graph: ad.Graph, x: ad.Node, trainable: bool = False) -> ad.Node:
        """Append this network to ``graph`` and return the logits node.

        ``x`` must evaluate to a ``(B, n, T)`` batch.  With ``trainable`` the
        parameters become differentiable leaves named after the parameters;
        otherwise they are embedded as constants.
        """
        if trainable:
            p = {k: graph.leaf(k) for k in self.param_names}
        else:
            p = {k: graph.constant(v, name=k) for k, v in self.params.items()}
        h = x
        flat = False
        for i, layer in enumerate(self.arch.layers):
            if isinstance(layer, Conv1D):
                h = ad.conv1d(h, p[f"l{i}.w"]) + p[f"l{i}.b"]
            elif isinstance(layer, ReLU):
                h = ad.relu(h)
            elif isinstance(layer, MaxPool):
                h = ad.maxpool1d(h, layer.width)
            else:
                if not flat:
                    h = ad.flatten(h)
                    flat = True
                if not isinstance(layer, Flatten):
                    h = ad.matmul(h, p[f"l{i}.w"]) + p[f"l{i}.b"]
        return h

    def _check_input(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != self.input_shape:
            raise ValueError(f"expected input shape (..., {self.input_shape[0]}, {self.input_shape[1]}),"
                             f" got {x.shape if not single else x.shape[1:]}")
        return x, single

    def logits(self, x, chunk: int = 1024) -> np.ndarray:
        """Pre-softmax scores for one ``(n, T)`` series or a ``(B, n, T)`` batch."""
        x, single = self._check_input(x)
        g = ad.Graph()
        xn = g.leaf("x", differentiable=False)
        g.output("z", self.build(g, xn))
        parts = [g.forward({"x": x[i:i + chunk]})["z"] for i in range(0, len(x), chunk)]
        z = np.concatenate(parts) if parts else np.zeros((0, self.label_count))
        return z[0] if single else z

    def predict(self, x):
        """Class ids; ties go to the lowest id."""
        z = self.logits(x)
        return int(np.argmax(z)) if z.ndim == 1 else np.argmax(z, axis=-1)

    __call__ = predict

    def copy(self) -> "Network":
        return Network(self.arch, {k: v.copy() for k, v in self.params.items()}, self.label_count,
                       self.input_shape, self.seed, dict(self.label_map))


def init_network(arch, input_shape, label_count: int, seed: int = 0) -> Network:
    """He-uniform weights (limit ``sqrt(6 / fan_in)``), zero biases."""
    if isinstance(arch, str):
        try:
            arch = ARCHITECTURES[arch]
        except KeyError:
            raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}") from None
    if label_count < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(arch, input_shape, label_count):
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 3 else shape[0]
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape)
    return Network(arch, params, label_count, tuple(input_shape), seed)


def accuracy(net: Network, X, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(net.predict(np.asarray(X)) == np.asarray(y)))


def train(net: Network, X, y, epochs: int = 30, batch_size: int = 32, lr: float = 0.01,
          seed: int = 0, momentum: float = 0.9, X_val=None, y_val=None):
    """Mini-batch SGD with momentum on mean softmax cross-entropy.

    Returns ``(trained_network, history)`` where ``history`` holds one dict per
    epoch with ``epoch``, ``loss``, ``train_acc`` and ``val_acc``.  The input
    network is not modified.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if len(X) == 0:
        raise ValueError("empty training set")
    if len(X) != len(y):
        raise ValueError("X and y lengths differ")
    if y.min() < 0 or y.max() >= net.label_count:
        raise ValueError("labels out of range")
    net = net.copy()
    rng = np.random.default_rng(seed)
    g = ad.Graph()
    xn = g.leaf("x", differentiable=False)
    yn = g.leaf("y", differentiable=False)
    logits = net.build(g, xn, trainable=True)
    g.output("loss", ad.mean(ad.softmax_cross_entropy(logits, yn)))
    names = net.param_names
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            try:
                loss = float(g.forward({"x": X[idx], "y": y[idx], **net.params})["loss"])
            except ad.NumericalError as exc:
                raise TrainingDivergedError(f"epoch {epoch}: {exc}") from None
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"epoch {epoch}: loss is {loss}")
            grads = g.gradient("loss", names)
            for k in names:
                velocity[k] = momentum * velocity[k] - lr * grads[k]
                net.params[k] = net.params[k] + velocity[k]
                if not np.all(np.isfinite(net.params[k])):
                    raise TrainingDivergedError(f"epoch {epoch}: parameter {k} is not finite")
            total += loss * len(idx)
        try:
            row = {"epoch": epoch, "loss": total / len(X), "train_acc": accuracy(net, X, y),
                   "val_acc": accuracy(net, X_val, y_val) if X_val is not None else float("nan")}
        except ad.NumericalError as exc:
            raise TrainingDivergedError(f"epoch {epoch}: {exc}") from None
        log.debug("epoch %d loss %.4f train %.3f val %.3f", epoch, row["loss"], row["train_acc"], row["val_acc"])
        history.append(row)
    return net, history


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(net: Network, path) -> Path:
    """Write a JSON header line followed by little-endian float64 parameters."""
    path = Path(path)
    names = net.param_names
    block = b"".join(np.ascontiguousarray(net.params[k], dtype="<f8").tobytes() for k in names)
    header = {
        "format": CHECKPOINT_FORMAT,
        "arch": {"name": net.arch.name, "layers": net.arch.to_list()},
        "input_shape": list(net.input_shape),
        "label_count": net.label_count,
        "shapes": [[k, list(net.params[k].shape)] for k in names],
        "seed": net.seed,
        "label_map": {str(k): v for k, v in net.label_map.items()},
        "nbytes": len(block),
        "sha256": hashlib.sha256(block).hexdigest(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(block)
    return path


def load_checkpoint(path, expect_arch: str | None = None) -> Network:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    head, sep, block = raw.partition(b"\n")
    try:
        header = json.loads(head)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: unreadable header") from None
    if not sep or not isinstance(header, dict):
        raise CheckpointError(f"{path}: unreadable header")
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: format {header.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")
    if len(block) != header["nbytes"] or hashlib.sha256(block).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: parameter block is corrupt or truncated")
    arch = ArchSpec.from_list(header["arch"]["name"], header["arch"]["layers"])
    if expect_arch is not None and arch.name != expect_arch:
        raise CheckpointError(f"{path}: holds architecture {arch.name}, expected {expect_arch}")
    params = {}
    offset = 0
    for name, shape in header["shapes"]:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(block, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    label_map = {k: v for k, v in header.get("label_map", {}).items()}
    return Network(arch, params, header["label_count"], tuple(header["input_shape"]), header.get("seed"),
                   label_map)
