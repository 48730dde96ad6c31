import numpy as np
import pytest

from rglab import nn
from rglab.data import synthetic_dataset

ACCEPTANCE_LINES: list[str] = []


def small_cnn(width: int = 4) -> nn.NetworkSpec:
    """Conv-pool-conv-pool-dense net on 3x32x32 inputs, cheap enough for unit tests."""
    return nn.NetworkSpec(
        (3, 32, 32),
        (
            nn.Conv(width), nn.ReLU(), nn.MaxPool(),
            nn.Conv(2 * width), nn.ReLU(), nn.MaxPool(),
            nn.Dense(16), nn.ReLU(),
            nn.Dense(10),
        ),
    )


def random_mlp(seed: int, in_dim: int = 8, num_classes: int = 5):
    """ReLU MLP with 2-4 dense layers of width at most 16."""
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(2, 5))
    widths = [int(rng.integers(4, 17)) for _ in range(depth - 1)]
    spec = nn.mlp(in_dim, widths, num_classes)
    return spec, nn.init_params(spec, seed)


def forward64(spec: nn.NetworkSpec, ckpt: nn.Checkpoint, x) -> np.ndarray:
    """Independent float64 forward pass (shifted-slice im2col conv, reshape pool) used as a gradient oracle."""
    h = np.asarray(x, np.float64)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, nn.Conv):
            w, b = (p.astype(np.float64) for p in ckpt.params[i])
            k = layer.kernel
            pad = k // 2 if layer.padding == "same" else 0
            hp = np.pad(h, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            n, c, hh, ww = hp.shape
            oh, ow = hh - k + 1, ww - k + 1
            # columns ordered (c, i, j) to match the OIHW weight layout
            cols = np.stack([hp[:, :, i:i + oh, j:j + ow] for i in range(k) for j in range(k)], axis=2)
            cols = cols.reshape(n, c * k * k, oh * ow)
            h = (np.matmul(w.reshape(len(w), -1), cols) + b[:, None]).reshape(n, len(w), oh, ow)
        elif isinstance(layer, nn.MaxPool):
            n, c, hh, ww = h.shape
            h = h.reshape(n, c, hh // 2, 2, ww // 2, 2).max(axis=(3, 5))
        elif isinstance(layer, nn.Dense):
            w, b = (p.astype(np.float64) for p in ckpt.params[i])
            h = h.reshape(len(h), -1) @ w.T + b
        else:
            h = np.maximum(h, 0)
    return h


def dead_relu_net(seed: int, alive: float = 0.2):
    """Small CNN with nonnegative weights where only a fraction of the units in each ReLU layer can fire.

    For inputs in [0, 1] every live unit is strictly positive and every
    backpropagated gradient is nonnegative, so all importance scores are
    either zero or positive.
    """
    spec = small_cnn(8)
    ckpt = nn.init_params(spec, seed)
    rng = np.random.default_rng([seed, 3])
    last = max(ckpt.params)
    for k, (w, b) in ckpt.params.items():
        w[:] = np.abs(w) + 1e-3
        if k == last:
            continue
        n_out = w.shape[0]
        live = rng.choice(n_out, max(1, int(alive * n_out)), replace=False)
        b[:] = -1e6
        b[live] = 0
    return spec, ckpt


@pytest.fixture(scope="session")
def synth_train():
    return synthetic_dataset(400, seed=0)


@pytest.fixture(scope="session")
def synth_test():
    return synthetic_dataset(100, seed=1, split="test")


@pytest.fixture(scope="session")
def trained_small(synth_train):
    spec = small_cnn()
    ckpt, log = nn.train(spec, synth_train.images, synth_train.labels, nn.TrainConfig(epochs=3, batch_size=32, seed=0))
    return spec, ckpt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance():
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
