"""Quantitative attribution experiments.

Dataset occlusion with a fixed random patch, feature-map occlusion curves,
noise metrics (background attribution and total variation), ROAR/KAR with
retraining, and FGSM class-sensitivity probes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attribution as A
from . import nn
from . import tensor as T
from .data import Dataset, atomic_write_bytes, unit_to_normalized

logger = logging.getLogger(__name__)

PATCH_SIZE = 10


# ---------------------------------------------------------------------------
# Training-dataset occlusion
# ---------------------------------------------------------------------------


@dataclass
class PatchRecord:
    """One random patch, in [0, 1] pixel space, pasted at (row, col)."""

    values: np.ndarray  # 3 x size x size
    seed: int
    row: int = 0
    col: int = 0

    @property
    def size(self) -> int:
        return self.values.shape[-1]

    @property
    def region(self) -> tuple[slice, slice]:
        return slice(self.row, self.row + self.size), slice(self.col, self.col + self.size)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "row": self.row,
            "col": self.col,
            "size": self.size,
            "values": [float(v) for v in self.values.reshape(-1)],
        }

    @classmethod
    def from_json(cls, d: dict) -> "PatchRecord":
        vals = np.asarray(d["values"], dtype=T.DTYPE).reshape(3, d["size"], d["size"])
        return cls(vals, int(d["seed"]), int(d["row"]), int(d["col"]))


def sample_patch(seed: int, size: int = PATCH_SIZE) -> PatchRecord:
    rng = np.random.default_rng([seed, 11])
    return PatchRecord(rng.uniform(0.0, 1.0, size=(3, size, size)).astype(T.DTYPE), seed)


def inject_patch(images, seed: int = 0, patch: PatchRecord | None = None, normalized: bool = True):
    """Paste one patch into the upper-left corner of every image.

    ``images`` are in [0, 1] when ``normalized`` is false, otherwise in the
    [-1, 1] training space (the patch is mapped there with 2v - 1).  Returns
    a copy of the images and the patch record.
    """
    patch = patch or sample_patch(seed)
    out = T.as_tensor(images).copy()
    vals = unit_to_normalized(patch.values) if normalized else patch.values
    rows, cols = patch.region
    out[:, :, rows, cols] = vals
    return out, patch


def inject_patch_dataset(ds: Dataset, seed: int = 0, patch: PatchRecord | None = None) -> tuple[Dataset, PatchRecord]:
    images, patch = inject_patch(ds.images, seed, patch)
    return Dataset(images, ds.labels.copy(), ds.split, ds.masks), patch


def _reduce(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values.sum(axis=-3) if values.ndim >= 3 else values


def patch_attribution_sum(values, region: tuple[slice, slice] = (slice(0, PATCH_SIZE), slice(0, PATCH_SIZE))):
    """Sum of |attribution| inside the patch and its share of the whole map's total."""
    m = np.abs(_reduce(values))
    inside = float(m[..., region[0], region[1]].sum())
    total = float(m.sum())
    return inside, (inside / total if total > 0 else 0.0)


# ---------------------------------------------------------------------------
# Noise metrics
# ---------------------------------------------------------------------------


def background_attribution(values, mask) -> float:
    m = np.abs(_reduce(values))
    mask = np.asarray(mask)
    if mask.shape != m.shape[-2:]:
        raise T.ShapeError(f"mask shape {mask.shape} does not match map {m.shape}")
    return float(m[mask == 0].sum())


def total_variation(values) -> float:
    """Anisotropic total variation of a channel-reduced map."""
    m = _reduce(values)
    return float(np.abs(np.diff(m, axis=0)).sum() + np.abs(np.diff(m, axis=1)).sum())


# ---------------------------------------------------------------------------
# Feature map occlusion
# ---------------------------------------------------------------------------


def margin(logits, class_index) -> np.ndarray:
    """(class logit) - (largest other logit), per row."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    cls = np.broadcast_to(np.asarray(class_index), (len(logits),))
    rows = np.arange(len(logits))
    own = logits[rows, cls]
    other = logits.copy()
    other[rows, cls] = -np.inf
    return own - other.max(axis=1)


@dataclass
class OcclusionCurve:
    x: np.ndarray
    y: np.ndarray
    which: str
    layer_index: int
    trials: int

    def to_json(self) -> dict:
        return {
            "which": self.which,
            "layer_index": self.layer_index,
            "trials": self.trials,
            "points": [[int(a), float(b)] for a, b in zip(self.x, self.y)],
        }


def downsample_mask(mask, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resampling onto an h x w grid (cell centres)."""
    mask = np.asarray(mask)
    rows = np.minimum(((np.arange(h) + 0.5) * mask.shape[0] / h).astype(int), mask.shape[0] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * mask.shape[1] / w).astype(int), mask.shape[1] - 1)
    return mask[np.ix_(rows, cols)]


def feature_map_occlusion_curve(
    spec: nn.NetworkSpec,
    ckpt: nn.Checkpoint,
    image,
    mask,
    layer_index: int,
    which: str = "bg",
    trials: int = 50,
    seed: int = 0,
    class_index: int | None = None,
    chunk: int = 256,
) -> OcclusionCurve:
    """Margin as spatial sites of the layer's output are zeroed one by one.

    ``which`` selects background ("bg"), object ("fg") or all ("all") sites.
    Sites are visited in a fresh random order per trial; after each step the
    forward pass resumes from the occluded feature map.
    """
    if which not in ("fg", "bg", "all"):
        raise ValueError(f"which must be 'fg', 'bg' or 'all', got {which!r}")
    shapes = spec.shapes()
    if not 0 <= layer_index < len(shapes) or len(shapes[layer_index]) != 3:
        raise ValueError(f"layer {layer_index} has no spatial grid")
    logits, trace = nn.forward(spec, ckpt, T.as_tensor(image)[None])
    c = int(logits[0].argmax()) if class_index is None else int(class_index)
    base = margin(logits, c)
    fmap = trace.outputs[layer_index][0]
    _, h, w = fmap.shape
    grid = downsample_mask(mask, h, w)
    keep = {"fg": grid == 1, "bg": grid == 0, "all": np.ones_like(grid, dtype=bool)}[which]
    sites = np.flatnonzero(keep.reshape(-1))
    rng = np.random.default_rng([seed, 13])
    ys = np.zeros(len(sites) + 1)
    for _ in range(trials):
        order = rng.permutation(sites)
        steps = np.empty((len(sites) + 1,) + fmap.shape, dtype=T.DTYPE)
        cur = fmap.reshape(fmap.shape[0], -1).copy()
        steps[0] = fmap
        for k, site in enumerate(order, start=1):
            cur[:, site] = 0
            steps[k] = cur.reshape(fmap.shape)
        # step 0 is the unoccluded forward margin itself, not a batched recomputation
        trial = np.concatenate([base] + [
            margin(nn.forward_from(spec, ckpt, steps[s:s + chunk], layer_index + 1), c)
            for s in range(1, len(steps), chunk)
        ])
        ys += trial
    return OcclusionCurve(np.arange(len(sites) + 1), ys / max(trials, 1), which, layer_index, trials)


def average_curves(curves: Sequence[OcclusionCurve]) -> OcclusionCurve:
    """Mean over images, truncated to the shortest curve."""
    n = min(len(c.x) for c in curves)
    y = np.mean([c.y[:n] for c in curves], axis=0)
    first = curves[0]
    return OcclusionCurve(np.arange(n), y, first.which, first.layer_index, first.trials)


# ---------------------------------------------------------------------------
# Batched attributions
# ---------------------------------------------------------------------------


def compute_maps(spec, ckpt, images, classes, config: A.AttributionConfig, batch_size: int = 64) -> np.ndarray:
    images = T.as_tensor(images)
    classes = np.broadcast_to(np.asarray(classes), (len(images),))
    out = np.empty_like(images)
    for s in range(0, len(images), batch_size):
        out[s:s + batch_size] = A.attribute_batch(spec, ckpt, images[s:s + batch_size], classes[s:s + batch_size], config)
    return out


# ---------------------------------------------------------------------------
# ROAR / KAR
# ---------------------------------------------------------------------------


def pixel_importance(maps) -> np.ndarray:
    """|channel-summed attribution| per pixel (N x H x W)."""
    return np.abs(np.asarray(maps, dtype=np.float64).sum(axis=1))


def random_importance(n: int, h: int = 32, w: int = 32, seed: int = 0) -> np.ndarray:
    return np.random.default_rng([seed, 17]).random((n, h, w))


def importance_order(importance) -> np.ndarray:
    """Pixel indices per image, most important first (stable on ties)."""
    imp = np.asarray(importance).reshape(len(importance), -1)
    return np.argsort(-imp, axis=1, kind="stable")


def removed_pixels(order, fraction: float, mode: str) -> np.ndarray:
    """Flat pixel indices to replace: the most important (roar) or least important (kar)."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    n = order.shape[1]
    if mode == "roar":
        return order[:, : int(np.rint(fraction * n))]
    if mode == "kar":
        kept = int(np.rint((1 - fraction) * n))
        return order[:, kept:]
    raise ValueError(f"mode must be 'roar' or 'kar', got {mode!r}")


def apply_removal(images, order, fraction: float, mode: str, fill) -> np.ndarray:
    images = T.as_tensor(images)
    n, c, h, w = images.shape
    idx = removed_pixels(order, fraction, mode)
    flat = images.reshape(n, c, h * w).copy()
    rows = np.arange(n)[:, None]
    for ch in range(c):
        plane = flat[:, ch]
        plane[rows, idx] = fill[ch]
    return flat.reshape(n, c, h, w)


def channel_means(images) -> np.ndarray:
    return np.asarray(images, dtype=np.float64).mean(axis=(0, 2, 3)).astype(T.DTYPE)


def area_under_curve(fractions, accuracies) -> float:
    """Trapezoid area over (fraction, accuracy) divided by the fraction span.

    Duplicate fractions are merged by averaging their accuracies.  A single
    fraction returns its accuracy.
    """
    f = np.asarray(fractions, dtype=np.float64)
    a = np.asarray(accuracies, dtype=np.float64)
    uf, inv = np.unique(f, return_inverse=True)
    ua = np.bincount(inv, weights=a) / np.bincount(inv)
    if len(uf) == 1:
        return float(ua[0])
    area = float(np.sum((uf[1:] - uf[:-1]) * (ua[1:] + ua[:-1]) / 2))
    return area / float(uf[-1] - uf[0])


@dataclass
class RoarKarResult:
    estimator: str
    mode: str
    fractions: list[float]
    accuracies: list[float]
    per_retrain: list[list[float]]
    retrains: int
    auc: float
    score: float  # ROAR AUC, or KAR AOC = 1 - AUC

    def to_json(self) -> dict:
        return asdict(self)


def retrain_curve(
    spec: nn.NetworkSpec,
    train: Dataset,
    test: Dataset,
    train_importance,
    test_importance,
    fractions: Sequence[float],
    mode: str,
    retrains: int = 1,
    train_config: nn.TrainConfig | None = None,
    estimator: str = "",
) -> RoarKarResult:
    """Replace pixels in both splits by the training-set channel mean and retrain from scratch."""
    train_config = train_config or nn.TrainConfig()
    fractions = sorted(float(f) for f in fractions)
    for f in fractions:
        if not 0 < f < 1:
            raise ValueError(f"fraction must lie in (0, 1), got {f}")
    fill = channel_means(train.images)
    tr_order = importance_order(train_importance)
    te_order = importance_order(test_importance)
    per_retrain = []
    for f in fractions:
        tr_x = apply_removal(train.images, tr_order, f, mode, fill)
        te_x = apply_removal(test.images, te_order, f, mode, fill)
        accs = []
        for r in range(retrains):
            cfg = nn.TrainConfig(**{**asdict(train_config), "seed": train_config.seed + 1000 * r})
            ckpt, _ = nn.train(spec, tr_x, train.labels, cfg)
            accs.append(nn.accuracy(spec, ckpt, te_x, test.labels))
            logger.info("%s %s fraction %.2f retrain %d: accuracy %.4f", estimator, mode, f, r, accs[-1])
        per_retrain.append(accs)
    means = [float(np.mean(a)) for a in per_retrain]
    auc = area_under_curve(fractions, means)
    score = auc if mode == "roar" else 1.0 - auc
    return RoarKarResult(estimator, mode, fractions, means, per_retrain, retrains, auc, score)


def roar_kar(
    spec: nn.NetworkSpec,
    reference: nn.Checkpoint,
    train: Dataset,
    test: Dataset,
    estimator: A.AttributionConfig | str,
    fractions: Sequence[float] = (0.1, 0.5, 0.9),
    modes: Sequence[str] = ("roar", "kar"),
    retrains: int = 1,
    train_config: nn.TrainConfig | None = None,
    seed: int = 0,
) -> dict[str, RoarKarResult]:
    """Rank pixels with ``estimator`` under ``reference`` and run each mode.

    ``estimator`` is an attribution config or the string "random".  Maps are
    taken for the true label of every image.
    """
    if isinstance(estimator, str):
        if estimator != "random":
            raise ValueError(f"unknown estimator {estimator!r}")
        name = "random"
        tr_imp = random_importance(len(train), seed=seed)
        te_imp = random_importance(len(test), seed=seed + 1)
    else:
        name = estimator.method
        tr_imp = pixel_importance(compute_maps(spec, reference, train.images, train.labels, estimator))
        te_imp = pixel_importance(compute_maps(spec, reference, test.images, test.labels, estimator))
    return {
        mode: retrain_curve(spec, train, test, tr_imp, te_imp, fractions, mode, retrains, train_config, name)
        for mode in modes
    }


# ---------------------------------------------------------------------------
# Adversarial probe
# ---------------------------------------------------------------------------


def fgsm(spec: nn.NetworkSpec, ckpt: nn.Checkpoint, images, labels, epsilon: float = 0.01) -> np.ndarray:
    """x' = clip(x + eps * sign(grad_x cross-entropy), -1, 1)."""
    x = T.as_tensor(images)
    single = x.ndim == len(spec.input_shape)
    if single:
        x = x[None]
    labels = np.atleast_1d(np.asarray(labels))
    logits, trace = nn.forward(spec, ckpt, x)
    _, grad_logits = T.softmax_cross_entropy(logits, labels)
    grad = nn.backward(spec, ckpt, trace, grad_logits).grad_input
    adv = np.clip(x + T.DTYPE(epsilon) * np.sign(grad), -1, 1).astype(T.DTYPE)
    return adv[0] if single else adv


def normalized_l1_change(clean_maps, adv_maps) -> np.ndarray:
    """Per-image L1 distance between maps that were each scaled to unit L1 norm."""
    def unit(m):
        m = np.asarray(m, dtype=np.float64).reshape(len(m), -1)
        s = np.abs(m).sum(axis=1, keepdims=True)
        return np.divide(m, s, out=np.zeros_like(m), where=s > 0)

    return np.abs(unit(clean_maps) - unit(adv_maps)).sum(axis=1)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


REPORT_VERSION = 1


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "to_json"):
        return obj.to_json()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_report(report: dict) -> str:
    return json.dumps({"version": REPORT_VERSION, **report}, sort_keys=True, indent=2, default=_jsonable) + "\n"


def write_report(report: dict, path) -> None:
    atomic_write_bytes(path, dumps_report(report).encode())


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"median": float(np.median(v)), "mean": float(v.mean()), "n": int(v.size)}
