"""Pixel-attribution methods and heatmap normalization.

Every explainer takes a checkpoint (or bare graph), a single (C, H, W) image
and a target class, and returns a :class:`Heatmap` of shape (H, W).  Gradient
based methods differentiate the pre-softmax logit of the target class.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .model import as_graph, predict
from .tensor import (
    Activation, Conv2D, Dense, Dropout, Flatten, GradTape, MaxPool2D,
    backprop, output_seed,
)

METHODS = ("sm", "gb", "ig", "sg", "gc", "lrp", "lime")
METHOD_NAMES = {
    "sm": "Saliency", "gb": "Guided Backprop", "ig": "Integrated Gradients",
    "sg": "SmoothGrad", "gc": "Grad-CAM", "lrp": "LRP-epsilon", "lime": "LIME",
}


class UnsupportedLayerError(ValueError):
    pass


@dataclass
class Heatmap:
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"heatmap must be 2-d, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("heatmap contains non-finite values")

    @property
    def shape(self):
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def method_rng(seed: int, method: str, image_id: int = 0) -> np.random.Generator:
    """Independent stream per (global seed, method, image)."""
    code = zlib.crc32(method.encode("ascii"))
    return np.random.default_rng([seed, code, image_id])


def _single(graph, x):
    xb, single = graph.batch(x)
    if not single:
        raise ValueError("explainers take a single (C, H, W) image")
    return xb


def _target(model, x, class_index):
    return predict(model, x)[0] if class_index is None else int(class_index)


def _heatmap(values, method, class_index, **params):
    return Heatmap(values, {"method": method, "class": int(class_index), **params})


def normalize_heatmap(E, positive_only: bool = True):
    """Scale a map to sum one (optionally after clipping negatives).

    A map that sums to zero becomes uniform so rankings stay defined.
    """
    values = np.asarray(E, dtype=np.float64)
    if positive_only:
        values = np.maximum(values, 0.0)
    total = values.sum()
    if total == 0.0:
        out = np.full(values.shape, 1.0 / values.size)
    else:
        out = values / total
    if isinstance(E, Heatmap):
        return Heatmap(out, {**E.provenance, "normalized": True, "positive_only": positive_only})
    return out


# -- gradient methods ------------------------------------------------------

def input_gradients(graph, xb, class_index) -> np.ndarray:
    tape = graph.run(xb)
    return backprop(tape, output_seed(tape, class_index))[0]


def saliency(model, x, class_index=None) -> Heatmap:
    graph = as_graph(model)
    xb = _single(graph, x)
    c = _target(model, x, class_index)
    g = input_gradients(graph, xb, c)[0]
    return _heatmap(np.abs(g).sum(axis=0), "sm", c)


def guided_backprop(model, x, class_index=None) -> Heatmap:
    """Backward pass that also blocks negative signal at every ReLU.

    The map is the channel sum of the absolute guided gradient.
    """
    graph = as_graph(model)
    xb = _single(graph, x)
    c = _target(model, x, class_index)
    if not graph.has_relu:
        hm = saliency(model, x, c)
        hm.provenance.update(method="gb", warning="no ReLU in graph; fell back to saliency")
        return hm
    tape = graph.run(xb)
    g = backprop(tape, output_seed(tape, c), guided=True)[0][0]
    return _heatmap(np.abs(g).sum(axis=0), "gb", c)


def integrated_gradients(model, x, class_index=None, baseline=None, steps: int = 64) -> Heatmap:
    """Left Riemann sum of gradients along the straight path from ``baseline``."""
    if steps < 1:
        raise ValueError("integrated gradients needs steps >= 1")
    graph = as_graph(model)
    xb = _single(graph, x)
    c = _target(model, x, class_index)
    base = np.zeros_like(xb) if baseline is None else np.asarray(baseline, np.float64).reshape(xb.shape)
    alphas = np.arange(steps) / steps
    path = base + alphas[:, None, None, None] * (xb - base)
    grads = np.zeros_like(xb[0])
    for start in range(0, steps, 64):
        grads += input_gradients(graph, path[start:start + 64], c).sum(axis=0)
    ig = (xb[0] - base[0]) * grads / steps
    return _heatmap(ig.sum(axis=0), "ig", c, steps=steps)


def smoothgrad(model, x, class_index=None, noise_sigma=None, samples: int = 25, seed: int = 0,
               image_id: int = 0, value_range=(0.0, 1.0)) -> Heatmap:
    """Mean saliency over Gaussian-perturbed copies of the input.

    ``noise_sigma`` defaults to 15% of the input range.
    """
    if samples < 1:
        raise ValueError("smoothgrad needs samples >= 1")
    sigma = 0.15 * (value_range[1] - value_range[0]) if noise_sigma is None else float(noise_sigma)
    if sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    graph = as_graph(model)
    xb = _single(graph, x)
    c = _target(model, x, class_index)
    if sigma == 0.0:
        hm = saliency(model, x, c)
        hm.provenance.update(method="sg", samples=samples, sigma=0.0)
        return hm
    rng = method_rng(seed, "sg", image_id)
    noisy = xb + sigma * rng.standard_normal((samples,) + xb.shape[1:])
    total = np.zeros(xb.shape[2:])
    for start in range(0, samples, 64):
        total += np.abs(input_gradients(graph, noisy[start:start + 64], c)).sum(axis=1).sum(axis=0)
    return _heatmap(total / samples, "sg", c, samples=samples, sigma=sigma, seed=seed)


def default_cam_layer(graph) -> int:
    """Index into the tape activations of the last conv feature map (after its nonlinearity)."""
    convs = [k for k, layer in enumerate(graph.layers) if isinstance(layer, Conv2D)]
    if not convs:
        raise ValueError("graph has no convolution layer for Grad-CAM")
    k = convs[-1]
    if k + 1 < len(graph.layers) and isinstance(graph.layers[k + 1], Activation):
        k += 1
    return k + 1


def bilinear_resize(img: np.ndarray, out_shape) -> np.ndarray:
    """Bilinear interpolation with half-pixel centres and edge clamping."""
    h, w = img.shape
    oh, ow = out_shape

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def grad_cam(model, x, class_index=None, target_layer: int | None = None) -> Heatmap:
    """ReLU of gradient-weighted feature maps, upsampled to the input size.

    ``target_layer`` indexes the recorded activations (0 is the input).
    """
    graph = as_graph(model)
    xb = _single(graph, x)
    c = _target(model, x, class_index)
    k = default_cam_layer(graph) if target_layer is None else int(target_layer)
    if len(graph.shapes[k]) != 3:
        raise ValueError(f"Grad-CAM target {k} has non-spatial shape {graph.shapes[k]}")
    tape = graph.run(xb)
    deltas = backprop(tape, output_seed(tape, c))
    feats, grads = tape.acts[k][0], deltas[k][0]
    alpha = grads.mean(axis=(1, 2))
    coarse = np.maximum(np.tensordot(alpha, feats, axes=1), 0.0)
    return _heatmap(bilinear_resize(coarse, xb.shape[2:]), "gc", c, target_layer=k)


# -- LRP ---------------------------------------------------------------------

def _stabilizer(z, eps, eps_scale):
    sign = np.where(z >= 0, 1.0, -1.0)
    if eps is None:
        axes = tuple(range(1, z.ndim))
        eps = eps_scale * np.abs(z).mean(axis=axes, keepdims=True)
    return z + eps * sign


def lrp_pass(tape: GradTape, class_index, eps=None, eps_scale: float = 1e-2):
    """Epsilon-rule relevance for every recorded activation.

    Starts from the target logit.  ``eps`` fixes an absolute stabilizer;
    otherwise each layer uses ``eps_scale`` times its mean |pre-activation|.
    Returns the relevances (indexed like ``tape.acts``) and per-layer values
    the adjoint needs.
    """
    layers = tape.graph.layers
    logits = tape.logits
    onehot = output_seed(tape, class_index)
    rels = [None] * len(tape.acts)
    stash = [None] * len(layers)
    r = onehot * logits
    rels[-1] = r
    for k in range(len(layers) - 1, -1, -1):
        layer, cache = layers[k], tape.caches[k]
        if isinstance(layer, (Conv2D, Dense)):
            denom = _stabilizer(tape.acts[k + 1], eps, eps_scale)
            s = r / denom
            contrib = layer.vjp(cache, s)
            r = tape.acts[k] * contrib
            stash[k] = (denom, s, contrib, eps_scale if eps is None else None)
        elif isinstance(layer, Activation):
            pass
        elif isinstance(layer, (MaxPool2D, Flatten, Dropout)):
            r = layer.vjp(cache, r)
        else:
            raise UnsupportedLayerError(f"no LRP rule for layer {layer.name}")
        rels[k] = r
    return rels, stash


def lrp_adjoint(tape: GradTape, stash, class_index, rho0: np.ndarray) -> list:
    """Pull dL/d(input relevance) back to contributions dL/d(acts[k]).

    A relative stabilizer is differentiated through its mean |z| term.  Feed
    the result to :func:`xagg.tensor.reverse_sweep`.
    """
    layers = tape.graph.layers
    extras = [None] * len(tape.acts)

    def add(k, v):
        extras[k] = v if extras[k] is None else extras[k] + v

    rho = rho0
    for k, layer in enumerate(layers):
        cache = tape.caches[k]
        if isinstance(layer, (Conv2D, Dense)):
            denom, s, contrib, scale = stash[k]
            add(k, rho * contrib)
            ds = layer.jvp(cache, rho * tape.acts[k])
            rho = ds / denom
            ddenom = -ds * s / denom
            add(k + 1, ddenom)
            if scale is not None:
                z = tape.acts[k + 1]
                axes = tuple(range(1, z.ndim))
                deps = (ddenom * np.where(z >= 0, 1.0, -1.0)).sum(axis=axes, keepdims=True)
                add(k + 1, deps * scale * np.sign(z) / np.prod(z.shape[1:]))
        elif isinstance(layer, Activation):
            pass
        else:
            rho = layer.jvp(cache, rho)
    add(len(layers), rho * output_seed(tape, class_index))
    return extras


def lrp_epsilon(model, x, class_index=None, eps_rule=None, eps_scale: float = 1e-2) -> Heatmap:
    graph = as_graph(model)
    xb = _single(graph, x)
    c = _target(model, x, class_index)
    rels, _ = lrp_pass(graph.run(xb), c, eps_rule, eps_scale)
    params = {"eps": eps_rule} if eps_rule is not None else {"eps_scale": eps_scale}
    return _heatmap(rels[0][0].sum(axis=0), "lrp", c, **params)


# -- LIME --------------------------------------------------------------------

def weighted_ridge(features, target, weights, ridge):
    """Weighted ridge regression with an unpenalized intercept."""
    wsum = weights.sum()
    xm = weights @ features / wsum
    ym = weights @ target / wsum
    xc = features - xm
    yc = target - ym
    gram = (xc * weights[:, None]).T @ xc
    rhs = (xc * weights[:, None]).T @ yc
    reg = ridge
    for _ in range(10):
        system = gram + reg * np.eye(gram.shape[0])
        if np.linalg.cond(system) < 1e12:
            return np.linalg.solve(system, rhs), ym - xm @ np.linalg.solve(system, rhs), reg
        reg *= 10.0
    raise np.linalg.LinAlgError("ridge system stayed singular")


def lime(model, x, class_index=None, segments=None, samples: int = 1000, kernel_width: float = 0.25,
         seed: int = 0, image_id: int = 0, baseline_value: float = 0.0, ridge: float = 1e-3) -> Heatmap:
    """Local linear surrogate over superpixels; each coefficient paints its segment."""
    from .segment import slic

    graph = as_graph(model)
    xb = _single(graph, x)
    c = _target(model, x, class_index)
    labels = slic(xb[0]).labels if segments is None else np.asarray(getattr(segments, "labels", segments))
    n_seg = int(labels.max()) + 1
    if labels.shape != xb.shape[2:]:
        raise ValueError("segment map does not cover the image")
    if samples < n_seg:
        raise ValueError(f"LIME needs at least as many samples ({samples}) as segments ({n_seg})")
    rng = method_rng(seed, "lime", image_id)
    z = rng.integers(0, 2, size=(samples, n_seg)).astype(np.float64)
    z[0] = 1.0
    probs = np.empty(samples)
    for start in range(0, samples, 100):
        keep = z[start:start + 100][:, labels]  # (b, H, W)
        batch = np.where(keep[:, None] > 0, xb, baseline_value)
        _, p = predict(graph, batch)
        probs[start:start + 100] = p[:, c]
    norms = np.linalg.norm(z, axis=1)
    cos = np.where(norms > 0, z.sum(axis=1) / (np.maximum(norms, 1e-300) * np.sqrt(n_seg)), 0.0)
    distance = 1.0 - cos
    weights = np.sqrt(np.exp(-(distance ** 2) / kernel_width ** 2))
    coef, _, used_ridge = weighted_ridge(z, probs, weights, ridge)
    params = {"samples": samples, "kernel_width": kernel_width, "seed": seed, "ridge": used_ridge}
    if used_ridge != ridge:
        params["ridge_increased"] = True
    return _heatmap(coef[labels], "lime", c, **params)


EXPLAINERS = {
    "sm": saliency,
    "gb": guided_backprop,
    "ig": integrated_gradients,
    "sg": smoothgrad,
    "gc": grad_cam,
    "lrp": lrp_epsilon,
    "lime": lime,
}


def explain(model, x, method: str, class_index=None, seed: int = 0, image_id: int = 0, **params) -> Heatmap:
    """Dispatch to a single explainer by short name."""
    try:
        fn = EXPLAINERS[method]
    except KeyError:
        raise ValueError(f"unknown explanation method {method!r}; choose from {', '.join(METHODS)}") from None
    if method in ("sg", "lime"):
        params.setdefault("seed", seed)
        params.setdefault("image_id", image_id)
    hm = fn(model, x, class_index, **params)
    hm.provenance["image_id"] = image_id
    return hm
