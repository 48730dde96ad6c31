"""Network definition, traced forward pass, backward engine, Adam training and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    padding: str = "same"


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class Dense:
    width: int


@dataclass(frozen=True)
class ReLU:
    pass


Layer = Conv | MaxPool | Dense | ReLU
_LAYER_TYPES = {"conv": Conv, "maxpool": MaxPool, "dense": Dense, "relu": ReLU}


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list applied to inputs of ``input_shape`` (without batch axis)."""

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()  # validates the chain

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer (batch axis excluded)."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise T.ShapeError(f"layer {i}: Conv needs a CHW input, got shape {shape}")
                pad = T._pad_amount(layer.kernel, layer.padding)
                h, w = shape[1] + 2 * pad - layer.kernel + 1, shape[2] + 2 * pad - layer.kernel + 1
                if h < 1 or w < 1:
                    raise T.ShapeError(f"layer {i}: kernel {layer.kernel} does not fit {shape}")
                shape = (layer.out_channels, h, w)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise T.ShapeError(f"layer {i}: MaxPool needs CHW with even H, W, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif isinstance(layer, Dense):
                shape = (layer.width,)
            elif isinstance(layer, ReLU):
                pass
            else:
                raise TypeError(f"layer {i}: unknown layer descriptor {layer!r}")
            out.append(shape)
        return out

    @property
    def num_classes(self) -> int:
        return self.shapes()[-1][0]

    def relu_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, ReLU)]

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            name = next(k for k, v in _LAYER_TYPES.items() if isinstance(layer, v))
            layers.append({"type": name, **layer.__dict__})
        return {"input_shape": list(self.input_shape), "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            layers.append(_LAYER_TYPES[entry.pop("type")](**entry))
        return cls(tuple(d["input_shape"]), tuple(layers))


CIFAR_LAYERS: tuple[Layer, ...] = (
    Conv(32), ReLU(),
    Conv(32), ReLU(),
    MaxPool(),
    Conv(64), ReLU(),
    Conv(64), ReLU(),
    MaxPool(),
    Dense(256), ReLU(),
    Dense(10),
)


@dataclass
class Checkpoint:
    """Learned parameters keyed by layer index, plus free-form training metadata."""

    params: dict[int, tuple[np.ndarray, np.ndarray]]
    meta: dict = field(default_factory=dict)

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: (w.copy(), b.copy()) for k, (w, b) in self.params.items()}, json.loads(json.dumps(self.meta)))

    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in self.params.values())


def init_params(spec: NetworkSpec, seed: int) -> Checkpoint:
    """He-normal weights (std = sqrt(2 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    shape = spec.input_shape
    for i, (layer, out_shape) in enumerate(zip(spec.layers, spec.shapes())):
        if isinstance(layer, Conv):
            fan_in = shape[0] * layer.kernel * layer.kernel
            w = rng.standard_normal((layer.out_channels, shape[0], layer.kernel, layer.kernel))
        elif isinstance(layer, Dense):
            fan_in = int(np.prod(shape))
            w = rng.standard_normal((layer.width, fan_in))
        else:
            shape = out_shape
            continue
        w = (w * math.sqrt(2.0 / fan_in)).astype(T.DTYPE)
        params[i] = (w, np.zeros(w.shape[0], dtype=T.DTYPE))
        shape = out_shape
    return Checkpoint(params, {"epoch": 0, "spec": spec.to_dict()})


def build_cifar_cnn(seed: int = 0) -> tuple[NetworkSpec, Checkpoint]:
    spec = NetworkSpec((3, 32, 32), CIFAR_LAYERS)
    return spec, init_params(spec, seed)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


@dataclass
class ActivationTrace:
    """Everything recorded during a forward pass.

    ``inputs[i]`` / ``outputs[i]`` are the input and output of layer ``i``.
    For a ReLU layer these are the pre-activation z and activation a.
    """

    x: np.ndarray
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    argmax: dict[int, np.ndarray]

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]

    def __len__(self) -> int:
        return len(self.outputs)

    def z(self, i: int) -> np.ndarray:
        return self.inputs[i]

    def a(self, i: int) -> np.ndarray:
        return self.outputs[i]


def _check_batch(spec: NetworkSpec, x: np.ndarray, check_range: bool) -> np.ndarray:
    x = T.as_tensor(x)
    if x.shape[1:] != spec.input_shape:
        raise T.ShapeError(f"batch must be N x {spec.input_shape}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input batch contains non-finite values")
    if check_range and x.size and (x.min() < -1 or x.max() > 1):
        raise ValueError(f"input values must lie in [-1, 1], got [{x.min()}, {x.max()}]")
    return x


def _apply(layer: Layer, params, h: np.ndarray):
    if isinstance(layer, Conv):
        return T.conv2d_forward(h, params[0], params[1], layer.padding), None
    if isinstance(layer, MaxPool):
        return T.maxpool2x2_forward(h)
    if isinstance(layer, Dense):
        return T.dense_forward(h, params[0], params[1]), None
    return T.relu_forward(h), None


def forward(spec: NetworkSpec, ckpt: Checkpoint, batch, check_range: bool = True):
    """Run the network on an N x input_shape batch; returns ``(logits, trace)``."""
    x = _check_batch(spec, batch, check_range)
    h = x
    inputs, outputs, argmax = [], [], {}
    for i, layer in enumerate(spec.layers):
        inputs.append(h)
        h, amax = _apply(layer, ckpt.params.get(i), h)
        if amax is not None:
            argmax[i] = amax
        outputs.append(h)
    return h, ActivationTrace(x, inputs, outputs, argmax)


def forward_from(spec: NetworkSpec, ckpt: Checkpoint, h, start: int) -> np.ndarray:
    """Resume the forward pass with ``h`` as the *input* of layer ``start``; returns logits."""
    h = T.as_tensor(h)
    for i in range(start, len(spec.layers)):
        h, _ = _apply(spec.layers[i], ckpt.params.get(i), h)
    return h


def predict(spec: NetworkSpec, ckpt: Checkpoint, images, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images)
    preds = []
    for start in range(0, len(images), batch_size):
        logits = forward_from(spec, ckpt, images[start:start + batch_size], 0)
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(spec: NetworkSpec, ckpt: Checkpoint, images, labels, batch_size: int = 256) -> float:
    if len(images) == 0:
        raise ValueError("accuracy of an empty dataset")
    return float(np.mean(predict(spec, ckpt, images, batch_size) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

# relu_gate(layer_index, z, a, grad_wrt_a) -> grad_wrt_z
ReluGate = Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
# pool_backward(layer_index, pool_input, argmax, grad_out) -> grad_in
PoolBackward = Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
# conv_input_hook(layer_index, layer, grad_wrt_conv_input) -> masked gradient
ConvInputHook = Callable[[int, Conv, np.ndarray], np.ndarray]


def vanilla_relu_gate(i, z, a, grad):
    return T.relu_backward(grad, z)


def max_pool_backward(i, pool_input, argmax, grad):
    return T.maxpool2x2_backward(grad, argmax)


@dataclass
class BackwardResult:
    grad_input: np.ndarray | None
    param_grads: dict[int, tuple[np.ndarray, np.ndarray]]
    layer_grads: dict[int, np.ndarray]


def backward(
    spec: NetworkSpec,
    ckpt: Checkpoint,
    trace: ActivationTrace,
    grad_logits,
    relu_gate: ReluGate = vanilla_relu_gate,
    pool_backward: PoolBackward = max_pool_backward,
    conv_input_hook: ConvInputHook | None = None,
    need_param_grads: bool = False,
    need_input_grad: bool = True,
    keep_layer_grads: bool = False,
) -> BackwardResult:
    """Propagate ``grad_logits`` from the last layer down to the input.

    The ReLU, max-pool and conv-input steps are pluggable so that attribution
    rules can replace them.  ``layer_grads[i]`` (if kept) is the gradient with
    respect to the output of layer ``i``.
    """
    grad = T.as_tensor(grad_logits)
    if grad.shape != trace.logits.shape:
        raise T.ShapeError(f"grad_logits shape {grad.shape} does not match logits {trace.logits.shape}")
    param_grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    layer_grads: dict[int, np.ndarray] = {}
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        if keep_layer_grads:
            layer_grads[i] = grad
        want_input = need_input_grad or i > 0
        if isinstance(layer, ReLU):
            grad = relu_gate(i, trace.inputs[i], trace.outputs[i], grad)
        elif isinstance(layer, MaxPool):
            grad = pool_backward(i, trace.inputs[i], trace.argmax[i], grad)
        elif isinstance(layer, Conv):
            w, _ = ckpt.params[i]
            gx, gw, gb = T.conv2d_backward(grad, trace.inputs[i], w, layer.padding, need_input_grad=want_input)
            if need_param_grads:
                param_grads[i] = (gw, gb)
            if gx is not None and conv_input_hook is not None:
                gx = conv_input_hook(i, layer, gx)
            grad = gx
        elif isinstance(layer, Dense):
            w, _ = ckpt.params[i]
            gx, gw, gb = T.dense_backward(grad, trace.inputs[i], w, need_input_grad=want_input)
            if need_param_grads:
                param_grads[i] = (gw, gb)
            grad = gx
        if grad is None:
            break
    return BackwardResult(grad if need_input_grad else None, param_grads, layer_grads)


def logit_gradient(spec: NetworkSpec, ckpt: Checkpoint, images, classes, **kwargs) -> np.ndarray:
    """Gradient of the selected class logit with respect to each input image."""
    logits, trace = forward(spec, ckpt, images)
    seed = one_hot_seed(logits.shape, classes)
    return backward(spec, ckpt, trace, seed, **kwargs).grad_input


def one_hot_seed(shape: tuple[int, int], classes) -> np.ndarray:
    classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (shape[0],))
    if classes.size and (classes.min() < 0 or classes.max() >= shape[1]):
        raise ValueError(f"class index out of range [0, {shape[1]})")
    seed = np.zeros(shape, dtype=T.DTYPE)
    seed[np.arange(shape[0]), classes] = 1
    return seed


def loss_and_grads(spec: NetworkSpec, ckpt: Checkpoint, images, labels):
    logits, trace = forward(spec, ckpt, images, check_range=False)
    loss, grad_logits = T.softmax_cross_entropy(logits, labels)
    res = backward(spec, ckpt, trace, grad_logits, need_param_grads=True, need_input_grad=False)
    return loss, logits, res.param_grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ValueError("invalid Adam hyperparameters")


class Adam:
    def __init__(self, params: dict[int, tuple[np.ndarray, np.ndarray]], cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: (np.zeros_like(w), np.zeros_like(b)) for k, (w, b) in params.items()}
        self.v = {k: (np.zeros_like(w), np.zeros_like(b)) for k, (w, b) in params.items()}

    def step(self, params, grads) -> None:
        """In-place parameter update."""
        c = self.cfg
        self.t += 1
        corr1 = 1 - c.beta1 ** self.t
        corr2 = 1 - c.beta2 ** self.t
        step = c.lr * math.sqrt(corr2) / corr1
        for k, g_pair in grads.items():
            for j, g in enumerate(g_pair):
                p, m, v = params[k][j], self.m[k][j], self.v[k][j]
                m *= c.beta1
                m += (1 - c.beta1) * g
                v *= c.beta2
                v += (1 - c.beta2) * g * g
                p -= (step * m / (np.sqrt(v) + c.eps)).astype(T.DTYPE)


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(
    spec: NetworkSpec,
    train_images,
    train_labels,
    config: TrainConfig | None = None,
    test_images=None,
    test_labels=None,
    init: Checkpoint | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Minibatch Adam on mean cross-entropy.

    Initialization (unless ``init`` is given) and shuffling are both derived
    from ``config.seed``.  Returns the final checkpoint and one log record per
    epoch with train loss, train accuracy and (if a test set is given) test
    accuracy.
    """
    config = config or TrainConfig()
    train_images = np.asarray(train_images)
    train_labels = np.asarray(train_labels)
    if len(train_images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(train_images) != len(train_labels):
        raise ValueError(f"{len(train_images)} images but {len(train_labels)} labels")
    _check_batch(spec, train_images[:1], check_range=True)

    ckpt = init.copy() if init is not None else init_params(spec, config.seed)
    ckpt.meta.setdefault("spec", spec.to_dict())
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(ckpt.params, config)
    log = []
    for epoch in range(1, config.epochs + 1):
        total_loss, correct = 0.0, 0
        for idx in iterate_minibatches(len(train_images), config.batch_size, rng):
            loss, logits, grads = loss_and_grads(spec, ckpt, train_images[idx], train_labels[idx])
            opt.step(ckpt.params, grads)
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == train_labels[idx]).sum())
        record = {
            "epoch": epoch,
            "loss": total_loss / len(train_images),
            "train_accuracy": correct / len(train_images),
        }
        if test_images is not None:
            record["test_accuracy"] = accuracy(spec, ckpt, test_images, test_labels)
        logger.info("epoch %d: %s", epoch, record)
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    ckpt.meta["epoch"] = ckpt.meta.get("epoch", 0) + config.epochs
    if log and "test_accuracy" in log[-1]:
        ckpt.meta["test_accuracy"] = log[-1]["test_accuracy"]
    return ckpt, log


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------

MAGIC = b"RGLB"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Malformed checkpoint file (bad magic, unsupported version, bad structure)."""


class CheckpointTruncatedError(CheckpointFormatError):
    def __init__(self, offset: int, needed: int, available: int):
        super().__init__(f"checkpoint truncated at offset {offset}: needed {needed} bytes, {available} available")
        self.offset = offset


def _encode_checkpoint(ckpt: Checkpoint) -> bytes:
    # Layout (little-endian): magic, u32 version, u32 entry count, then per
    # entry u32 layer index, u32 slot (0 weight, 1 bias), u32 rank, rank x u32
    # dims, float32 payload; finally u32 length + UTF-8 JSON metadata.
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, 2 * len(ckpt.params))]
    for idx in sorted(ckpt.params):
        for slot, arr in enumerate(ckpt.params[idx]):
            arr = np.ascontiguousarray(arr, dtype="<f4")
            parts.append(struct.pack(f"<III{arr.ndim}I", idx, slot, arr.ndim, *arr.shape))
            parts.append(arr.tobytes())
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(self.pos, n, len(self.buf) - self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def _decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} at offset 4")
    entries = r.u32()
    tensors: dict[int, list] = {}
    for _ in range(entries):
        idx, slot, rank = r.u32(3)
        dims = r.u32(rank) if rank else ()
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(T.DTYPE)
        if slot not in (0, 1):
            raise CheckpointFormatError(f"bad tensor slot {slot} near offset {r.pos}")
        tensors.setdefault(idx, [None, None])[slot] = arr
    meta_len = r.u32()
    meta = json.loads(r.take(meta_len).decode()) if meta_len else {}
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes at offset {r.pos}")
    params = {}
    for idx, (w, b) in tensors.items():
        if w is None or b is None:
            raise CheckpointFormatError(f"layer {idx} is missing its weight or bias tensor")
        params[idx] = (w, b)
    return Checkpoint(params, meta)


def save_weights(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_encode_checkpoint(ckpt))
    tmp.replace(path)


def load_weights(path) -> Checkpoint:
    return _decode_checkpoint(Path(path).read_bytes())


def spec_from_checkpoint(ckpt: Checkpoint) -> NetworkSpec:
    if "spec" not in ckpt.meta:
        raise CheckpointFormatError("checkpoint metadata carries no network spec")
    return NetworkSpec.from_dict(ckpt.meta["spec"])


def mlp(input_dim: int, widths: Sequence[int], num_classes: int) -> NetworkSpec:
    """Fully connected ReLU network, mostly for tests and toy experiments."""
    layers: list[Layer] = []
    for w in widths:
        layers += [Dense(w), ReLU()]
    layers.append(Dense(num_classes))
    return NetworkSpec((input_dim,), tuple(layers))
