"""Backward-pass rule engine for gradient-based attribution.

Every method here runs the standard backward pass of :mod:`rglab.nn` with
some of its steps swapped out:

* the ReLU step is replaced by a *gate* (deconvnet, guided backprop, or the
  thresholded RectGrad rules PR1-PR4),
* the max-pool step can be replaced by proportional redistribution (PRR),
* the input-gradient of every SAME-padded convolution can have its border
  zeroed (the padding trick).

Attributions are taken with respect to the pre-softmax class logit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T

METHODS = ("saliency", "grad_input", "deconv", "guided_bp", "smoothgrad", "integgrad", "rectgrad")
RULES = ("PR1", "PR2", "PR3", "PR4", "RectGradMod")


@dataclass(frozen=True)
class AttributionConfig:
    """Method selection and hyperparameters.

    ``tau`` fixes a constant threshold at every ReLU gate and overrides
    ``q``.  ``use_padding_trick`` and ``final_zero_threshold`` default to on
    for rectgrad and off for every other method when left as None.
    ``multiply_input`` turns the gradient-style maps (saliency, deconv,
    guided_bp, smoothgrad) into "method * input" maps.
    """

    method: str = "rectgrad"
    rule: str = "PR1"
    q: float = 98.0
    tau: float | None = None
    use_padding_trick: bool | None = None
    use_prr: bool = False
    final_zero_threshold: bool | None = None
    final_threshold_q: float | None = None
    multiply_input: bool = False
    smoothgrad_n: int = 50
    smoothgrad_sigma: float = 0.3
    integgrad_steps: int = 50
    integgrad_baseline: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; valid: {', '.join(RULES)}")
        if not 0 <= self.q <= 100:
            raise ValueError(f"q must lie in [0, 100], got {self.q}")
        if self.final_threshold_q is not None and not 0 <= self.final_threshold_q <= 100:
            raise ValueError(f"final_threshold_q must lie in [0, 100], got {self.final_threshold_q}")
        if self.smoothgrad_n < 1:
            raise ValueError("smoothgrad_n must be >= 1")
        if self.smoothgrad_sigma < 0:
            raise ValueError("smoothgrad_sigma must be >= 0")
        if self.integgrad_steps < 1:
            raise ValueError("integgrad_steps must be >= 1")

    @property
    def padding_trick(self) -> bool:
        if self.use_padding_trick is None:
            return self.method == "rectgrad"
        return self.use_padding_trick

    @property
    def zero_threshold(self) -> bool:
        if self.final_zero_threshold is None:
            return self.method == "rectgrad"
        return self.final_zero_threshold

    def resolved(self) -> dict:
        d = asdict(self)
        d["use_padding_trick"] = self.padding_trick
        d["final_zero_threshold"] = self.zero_threshold
        return d


@dataclass
class AttributionMap:
    values: np.ndarray
    method: str
    class_index: int
    config: dict

    @property
    def shape(self):
        return self.values.shape

    def channel_sum(self) -> np.ndarray:
        return channel_sum(self.values)


def channel_sum(values) -> np.ndarray:
    """Collapse the colour axis of a CHW (or NCHW) map."""
    values = np.asarray(values)
    return values.sum(axis=-3)


# ---------------------------------------------------------------------------
# Gates
# ---------------------------------------------------------------------------


def _same_shape(*arrays) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise T.ShapeError(f"gate operands must share a shape, got {sorted(shapes)}")


def rectgrad_gate(a, R, tau) -> np.ndarray:
    """Pass ``R`` where the importance score ``a * R`` is strictly above ``tau``."""
    _same_shape(a, R)
    R = np.asarray(R)
    return np.where(np.asarray(a) * R > tau, R, 0).astype(R.dtype)


def deconv_gate(R) -> np.ndarray:
    R = np.asarray(R)
    return np.where(R > 0, R, 0).astype(R.dtype)


def guided_gate(z, R) -> np.ndarray:
    _same_shape(z, R)
    R = np.asarray(R)
    return np.where((np.asarray(z) > 0) & (R > 0), R, 0).astype(R.dtype)


def shifted_activation_gate(a, R, eps: float) -> np.ndarray:
    """``I((a + eps) * R > 0) * R``; reproduces the deconvnet gate for ReLU activations."""
    _same_shape(a, R)
    R = np.asarray(R)
    return np.where((np.asarray(a) + T.DTYPE(eps)) * R > 0, R, 0).astype(R.dtype)


def rule_criterion(rule: str, a, R) -> np.ndarray:
    """The per-unit quantity a propagation rule compares against its threshold."""
    _same_shape(a, R)
    a, R = np.asarray(a), np.asarray(R)
    if rule == "PR1":
        return a * R
    if rule == "PR2":
        return np.abs(a * R)
    if rule == "PR3":
        return a
    if rule == "PR4":
        return R
    raise ValueError(f"unknown propagation rule {rule!r}; valid: PR1, PR2, PR3, PR4")


def rule_gate(rule: str, a, R, tau) -> np.ndarray:
    R = np.asarray(R)
    return np.where(rule_criterion(rule, a, R) > tau, R, 0).astype(R.dtype)


def layer_threshold(criterion, q: float) -> np.ndarray:
    """Per-example q-th percentile of a batched criterion, broadcastable back onto it."""
    criterion = np.asarray(criterion)
    flat = criterion.reshape(criterion.shape[0], -1)
    tau = np.asarray(T.percentile(flat, q, axis=1))
    return tau.reshape((-1,) + (1,) * (criterion.ndim - 1))


# ---------------------------------------------------------------------------
# Pooling and padding
# ---------------------------------------------------------------------------


def prr_pool_backward(grad_out, window_activations) -> np.ndarray:
    """Split each 2x2 window's gradient in proportion to its activations.

    ``window_activations`` is the (non-negative) max-pool input.  A window
    whose activations are all zero receives no gradient.
    """
    grad_out = T.as_tensor(grad_out)
    a = T.as_tensor(window_activations)
    if a.ndim != 4 or grad_out.shape != (a.shape[0], a.shape[1], a.shape[2] // 2, a.shape[3] // 2):
        raise T.ShapeError(f"grad_out {grad_out.shape} does not match pooled activations {a.shape}")
    if a.shape[2] % 2 or a.shape[3] % 2:
        raise T.ShapeError(f"pool input needs even spatial dims, got {a.shape}")
    n, c, h, w = a.shape
    win = a.reshape(n, c, h // 2, 2, w // 2, 2)
    total = win.sum(axis=(3, 5), keepdims=True)
    safe = np.where(total > 0, total, 1)
    share = np.where(total > 0, win / safe, 0)
    out = share * grad_out[:, :, :, None, :, None]
    return out.reshape(n, c, h, w).astype(T.DTYPE)


def padding_mask(grad, pad_width: int) -> np.ndarray:
    """Zero a border ring of ``pad_width`` on the last two (spatial) axes."""
    grad = np.asarray(grad)
    h, w = grad.shape[-2:]
    if pad_width < 0 or 2 * pad_width >= min(h, w):
        raise ValueError(f"pad_width {pad_width} too large for a {h}x{w} map")
    if pad_width == 0:
        return grad.copy()
    out = np.zeros_like(grad)
    out[..., pad_width:h - pad_width, pad_width:w - pad_width] = grad[..., pad_width:h - pad_width, pad_width:w - pad_width]
    return out


def _padding_hook(i, layer: nn.Conv, grad):
    if layer.padding != "same":
        return grad
    return padding_mask(grad, layer.kernel // 2)


def _prr_backward(i, pool_input, argmax, grad):
    return prr_pool_backward(grad, pool_input)


# ---------------------------------------------------------------------------
# Post-processing
# ---------------------------------------------------------------------------


def zero_threshold(values) -> np.ndarray:
    values = np.asarray(values)
    return np.where(values > 0, values, 0).astype(values.dtype)


def final_threshold(values, q: float) -> np.ndarray:
    """Keep entries strictly above the map's q-th percentile; per example for batches of CHW maps."""
    values = np.asarray(values)
    if values.ndim == 4:
        tau = layer_threshold(values, q)
    else:
        tau = T.percentile(values, q)
    return np.where(values > tau, values, 0).astype(values.dtype)


# ---------------------------------------------------------------------------
# Methods
# ---------------------------------------------------------------------------

Gate = Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def gradient_with_gate(
    spec: nn.NetworkSpec,
    ckpt: nn.Checkpoint,
    images,
    classes,
    gate: Gate = nn.vanilla_relu_gate,
    use_prr: bool = False,
    use_padding_trick: bool = False,
    check_range: bool = True,
) -> np.ndarray:
    """Backpropagate the class-logit seed through ``gate`` at every ReLU."""
    logits, trace = nn.forward(spec, ckpt, images, check_range=check_range)
    seed = nn.one_hot_seed(logits.shape, classes)
    res = nn.backward(
        spec,
        ckpt,
        trace,
        seed,
        relu_gate=gate,
        pool_backward=_prr_backward if use_prr else nn.max_pool_backward,
        conv_input_hook=_padding_hook if use_padding_trick else None,
    )
    return res.grad_input


def make_rectgrad_gate(spec: nn.NetworkSpec, rule: str = "PR1", q: float = 98.0, tau: float | None = None) -> Gate:
    top = max(spec.relu_indices(), default=-1)

    def gate(i, z, a, R):
        layer_rule = rule
        if rule == "RectGradMod":
            layer_rule = "PR1" if i == top else "PR2"
        crit = rule_criterion(layer_rule, a, R)
        thr = tau if tau is not None else layer_threshold(crit, q)
        return np.where(crit > thr, R, 0).astype(R.dtype)

    return gate


def _deconv(i, z, a, R):
    return deconv_gate(R)


def _guided(i, z, a, R):
    return guided_gate(z, R)


def _smoothgrad(spec, ckpt, x, classes, cfg: AttributionConfig, **kw):
    rng = np.random.default_rng(cfg.seed)
    total = np.zeros_like(x)
    for _ in range(cfg.smoothgrad_n):
        noisy = x
        if cfg.smoothgrad_sigma > 0:
            noisy = (x + cfg.smoothgrad_sigma * rng.standard_normal(x.shape)).astype(T.DTYPE)
        total += gradient_with_gate(spec, ckpt, noisy, classes, check_range=False, **kw)
    return (total / cfg.smoothgrad_n).astype(T.DTYPE)


def integrated_gradients(spec, ckpt, images, classes, steps: int = 50, baseline=None, **kw) -> np.ndarray:
    """Left-Riemann path integral of the logit gradient from ``baseline`` to the input."""
    x = T.as_tensor(images)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    base = np.zeros_like(x) if baseline is None else np.broadcast_to(T.as_tensor(baseline), x.shape)
    diff = x - base
    classes = np.broadcast_to(np.asarray(classes), (len(x),))
    total = np.zeros_like(x)
    for k in range(steps):
        point = (base + (k / steps) * diff).astype(T.DTYPE)
        total += gradient_with_gate(spec, ckpt, point, classes, check_range=False, **kw)
    return (diff * total / steps).astype(T.DTYPE)


def attribute_batch(spec: nn.NetworkSpec, ckpt: nn.Checkpoint, images, classes, config: AttributionConfig) -> np.ndarray:
    """Attribution maps for a batch of images; returns an array shaped like ``images``."""
    x = nn._check_batch(spec, images, check_range=True)
    classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (len(x),))
    if classes.size and (classes.min() < 0 or classes.max() >= spec.num_classes):
        raise ValueError(f"class index out of range [0, {spec.num_classes})")
    cfg = config
    kw = dict(use_prr=cfg.use_prr, use_padding_trick=cfg.padding_trick)
    times_input = cfg.multiply_input

    if cfg.method in ("saliency", "grad_input"):
        values = gradient_with_gate(spec, ckpt, x, classes, **kw)
        times_input = times_input or cfg.method == "grad_input"
    elif cfg.method == "deconv":
        values = gradient_with_gate(spec, ckpt, x, classes, gate=_deconv, **kw)
    elif cfg.method == "guided_bp":
        values = gradient_with_gate(spec, ckpt, x, classes, gate=_guided, **kw)
    elif cfg.method == "smoothgrad":
        values = _smoothgrad(spec, ckpt, x, classes, cfg, **kw)
    elif cfg.method == "integgrad":
        values = integrated_gradients(spec, ckpt, x, classes, cfg.integgrad_steps, cfg.integgrad_baseline, **kw)
    else:
        gate = make_rectgrad_gate(spec, cfg.rule, cfg.q, cfg.tau)
        values = gradient_with_gate(spec, ckpt, x, classes, gate=gate, **kw)
        times_input = True

    if times_input:
        values = x * values
    if cfg.zero_threshold:
        values = zero_threshold(values)
    if cfg.final_threshold_q is not None:
        values = final_threshold(values, cfg.final_threshold_q)
    return values.astype(T.DTYPE)


def attribute(spec: nn.NetworkSpec, ckpt: nn.Checkpoint, image, class_index: int, config: AttributionConfig | None = None) -> AttributionMap:
    config = config or AttributionConfig()
    image = T.as_tensor(image)
    values = attribute_batch(spec, ckpt, image[None], [class_index], config)[0]
    return AttributionMap(values, config.method, int(class_index), config.resolved())


# Comparison presets: RectGrad with the padding trick at q=98 (with and without
# PRR) and baselines final-thresholded at the 95th percentile.
def standard_configs(final_threshold_q: float | None = 95.0, **overrides) -> dict[str, AttributionConfig]:
    base = {
        "rectgrad": AttributionConfig("rectgrad", q=98.0),
        "rectgrad_prr": AttributionConfig("rectgrad", q=98.0, use_prr=True),
        "saliency": AttributionConfig("saliency"),
        "grad_input": AttributionConfig("grad_input"),
        "deconv": AttributionConfig("deconv"),
        "guided_bp": AttributionConfig("guided_bp"),
        "smoothgrad": AttributionConfig("smoothgrad"),
        "integgrad": AttributionConfig("integgrad"),
    }
    out = {}
    for name, cfg in base.items():
        if cfg.method != "rectgrad" and final_threshold_q is not None:
            cfg = replace(cfg, final_threshold_q=final_threshold_q)
        out[name] = replace(cfg, **overrides) if overrides else cfg
    return out
