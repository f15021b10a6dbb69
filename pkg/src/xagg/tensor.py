"""Small dense-tensor engine for the layer vocabulary used by the reference CNN.

Tensors are plain float64 numpy arrays with a leading batch axis.  A forward
pass records a :class:`GradTape` (activations plus per-layer caches); every
gradient routine works off a tape.

Besides the usual reverse pass this module provides the second-order pieces the
explanation attacks need: the adjoint of a (possibly guided) backward pass, so
that the gradient of any scalar function of an input gradient can be pulled
back onto the input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Input does not match the shape a graph expects."""


class NumericOverflowError(FloatingPointError):
    """A non-finite value appeared inside a layer."""

    def __init__(self, layer: str, stage: str):
        super().__init__(f"non-finite values in {stage} of layer {layer}")
        self.layer = layer
        self.stage = stage


class ContractError(ValueError):
    """A graph was used in a way its operation does not allow."""


class Layer:
    kind = "layer"
    linear = True  # output is affine in the input (given frozen routing)

    def __init__(self):
        self.name = self.kind
        self.params: dict[str, np.ndarray] = {}

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def forward(self, a, train=False, rng=None):
        raise NotImplementedError

    def vjp(self, cache, g):
        raise NotImplementedError

    def jvp(self, cache, v):
        """Apply the layer's linear part (no bias) to a tangent ``v``."""
        raise NotImplementedError

    def param_grads(self, cache, g) -> dict[str, np.ndarray]:
        return {}

    def spec(self) -> dict:
        return {"type": self.kind}

    def __repr__(self):
        return f"{type(self).__name__}({self.spec()})"


class Conv2D(Layer):
    """Valid-padding, stride-1 convolution. Weights are (filters, channels, kh, kw).

    Activations are logically (N, C, H, W); outputs are returned as transposed
    views of channels-last buffers, which keeps the im2col copies contiguous.
    """

    kind = "conv2d"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        super().__init__()
        self.params = {"weight": np.asarray(weight, DTYPE), "bias": np.asarray(bias, DTYPE)}

    @property
    def kernel(self):
        return self.params["weight"].shape[2:]

    def output_shape(self, shape):
        c, h, w = shape
        f, cw, kh, kw = self.params["weight"].shape
        if c != cw or h < kh or w < kw:
            raise ShapeError(f"{self.name}: cannot convolve {shape} with kernel {self.params['weight'].shape}")
        return (f, h - kh + 1, w - kw + 1)

    def _cols(self, a):
        n, c, h, w = a.shape
        kh, kw = self.kernel
        oh, ow = h - kh + 1, w - kw + 1
        win = sliding_window_view(a.transpose(0, 2, 3, 1), (kh, kw), axis=(1, 2))
        return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c), (n, oh, ow)

    def _apply(self, cols, dims):
        n, oh, ow = dims
        weight = self.params["weight"]
        wmat = weight.transpose(2, 3, 1, 0).reshape(-1, weight.shape[0])
        return (cols @ wmat).reshape(n, oh, ow, -1)

    def forward(self, a, train=False, rng=None):
        cols, dims = self._cols(a)
        out = self._apply(cols, dims)
        out += self.params["bias"]
        return out.transpose(0, 3, 1, 2), (cols, dims, a.shape)

    def jvp(self, cache, v):
        cols, dims = self._cols(v)
        return self._apply(cols, dims).transpose(0, 3, 1, 2)

    def vjp(self, cache, g):
        _, (n, oh, ow), (_, c, h, w) = cache
        weight = self.params["weight"]
        f, _, kh, kw = weight.shape
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        taps = np.ascontiguousarray(weight.transpose(2, 3, 0, 1))
        dx = np.zeros((n, h, w, c), DTYPE)
        for i in range(kh):
            for j in range(kw):
                dx[:, i:i + oh, j:j + ow, :] += (gm @ taps[i, j]).reshape(n, oh, ow, c)
        return dx.transpose(0, 3, 1, 2)

    def param_grads(self, cache, g):
        cols = cache[0]
        f, c, kh, kw = self.params["weight"].shape
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dw = (cols.T @ gm).reshape(kh, kw, c, f).transpose(3, 2, 0, 1)
        return {"weight": np.ascontiguousarray(dw), "bias": gm.sum(axis=0)}

    def spec(self):
        f, c, kh, kw = self.params["weight"].shape
        return {"type": self.kind, "filters": f, "channels": c, "kernel": [kh, kw]}


class Dense(Layer):
    """Affine map ``a @ weight + bias`` with weight of shape (inputs, outputs)."""

    kind = "dense"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        super().__init__()
        self.params = {"weight": np.asarray(weight, DTYPE), "bias": np.asarray(bias, DTYPE)}

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.params["weight"].shape[0]:
            raise ShapeError(f"{self.name}: expected ({self.params['weight'].shape[0]},), got {shape}")
        return (self.params["weight"].shape[1],)

    def forward(self, a, train=False, rng=None):
        return a @ self.params["weight"] + self.params["bias"], a

    def jvp(self, cache, v):
        return v @ self.params["weight"]

    def vjp(self, cache, g):
        return g @ self.params["weight"].T

    def param_grads(self, cache, g):
        return {"weight": cache.T @ g, "bias": g.sum(axis=0)}

    def spec(self):
        i, o = self.params["weight"].shape
        return {"type": self.kind, "inputs": i, "units": o}


class MaxPool2D(Layer):
    """Non-overlapping max pooling; ties go to the lowest index in the window."""

    kind = "maxpool2d"

    def __init__(self, pool: int = 2):
        super().__init__()
        self.pool = pool

    def output_shape(self, shape):
        c, h, w = shape
        if h < self.pool or w < self.pool:
            raise ShapeError(f"{self.name}: input {shape} smaller than pool {self.pool}")
        return (c, h // self.pool, w // self.pool)

    def _slices(self, shape):
        p = self.pool
        oh, ow = shape[2] // p, shape[3] // p
        return [(slice(None), slice(None), slice(i, oh * p, p), slice(j, ow * p, p))
                for i in range(p) for j in range(p)]

    def forward(self, a, train=False, rng=None):
        slices = self._slices(a.shape)
        out = a[slices[0]].copy(order="K")
        idx = np.zeros_like(out, dtype=np.int8)
        for k, sl in enumerate(slices[1:], 1):
            cand = a[sl]
            win = cand > out
            np.copyto(out, cand, where=win)
            idx[win] = k
        return out, (idx, a.shape)

    def jvp(self, cache, v):
        idx, shape = cache
        slices = self._slices(shape)
        out = v[slices[0]].copy(order="K")
        for k, sl in enumerate(slices[1:], 1):
            np.copyto(out, v[sl], where=idx == k)
        return out

    def vjp(self, cache, g):
        idx, shape = cache
        n, c, h, w = shape
        out = np.zeros((n, h, w, c), DTYPE).transpose(0, 3, 1, 2)
        for k, sl in enumerate(self._slices(shape)):
            out[sl] = np.where(idx == k, g, 0.0)
        return out

    def spec(self):
        return {"type": self.kind, "pool": self.pool}


class Dropout(Layer):
    """Inverted dropout. Identity unless ``train`` is set."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def forward(self, a, train=False, rng=None):
        if not train or self.rate == 0.0:
            return a, None
        mask = (rng.random(a.shape) >= self.rate) / (1.0 - self.rate)
        return a * mask, mask

    def jvp(self, cache, v):
        return v if cache is None else v * cache

    def vjp(self, cache, g):
        return g if cache is None else g * cache

    def spec(self):
        return {"type": self.kind, "rate": self.rate}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, a, train=False, rng=None):
        return a.reshape(a.shape[0], -1), a.shape

    def jvp(self, cache, v):
        return v.reshape(v.shape[0], -1)

    def vjp(self, cache, g):
        return g.reshape(cache)


class Activation(Layer):
    """Elementwise nonlinearity with first and second derivatives."""

    linear = False

    def fn(self, z):
        raise NotImplementedError

    def d1(self, z):
        raise NotImplementedError

    def d2(self, z):
        raise NotImplementedError

    def forward(self, a, train=False, rng=None):
        return self.fn(a), a

    def jvp(self, cache, v):
        return self.d1(cache) * v

    def vjp(self, cache, g):
        return self.d1(cache) * g


class ReLU(Activation):
    kind = "relu"

    def fn(self, z):
        return np.maximum(z, 0.0)

    def d1(self, z):
        return (z > 0).astype(DTYPE)

    def d2(self, z):
        return np.zeros_like(z)


class SoftPlus(Activation):
    """``log(1 + exp(beta z)) / beta``; tends to ReLU as beta grows."""

    kind = "softplus"

    def __init__(self, beta: float = 1.0):
        super().__init__()
        if beta <= 0:
            raise ValueError("softplus beta must be positive")
        self.beta = float(beta)

    def _sig(self, z):
        return 0.5 * (1.0 + np.tanh(0.5 * self.beta * z))

    def fn(self, z):
        return np.logaddexp(0.0, self.beta * z) / self.beta

    def d1(self, z):
        return self._sig(z)

    def d2(self, z):
        s = self._sig(z)
        return self.beta * s * (1.0 - s)

    def spec(self):
        return {"type": self.kind, "beta": self.beta}


@dataclass
class GradTape:
    """Activations of one forward pass; ``acts[0]`` is the input, ``acts[-1]`` the logits."""

    graph: "Graph"
    acts: list
    caches: list

    @property
    def logits(self):
        return self.acts[-1]


class Graph:
    """An ordered stack of layers mapping (N, *input_shape) inputs to logits."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple):
        self.layers = tuple(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        self.shapes = [shape]
        for i, layer in enumerate(self.layers):
            layer.name = f"{i}:{layer.kind}"
            shape = layer.output_shape(shape)
            self.shapes.append(shape)
        if len(shape) != 1:
            raise ShapeError(f"graph must end in a flat logit vector, got {shape}")
        self.n_classes = shape[0]

    def batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, DTYPE)
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected input shape {self.input_shape}, got {x.shape}")
        return x, False

    def run(self, x, train=False, rng=None) -> GradTape:
        a, _ = self.batch(x)
        acts, caches = [a], []
        for layer in self.layers:
            with np.errstate(over="ignore", invalid="ignore"):
                a, cache = layer.forward(a, train=train, rng=rng)
            if not np.all(np.isfinite(a)):
                raise NumericOverflowError(layer.name, "forward")
            acts.append(a)
            caches.append(cache)
        return GradTape(self, acts, caches)

    def param_count(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params.values())

    @property
    def has_relu(self) -> bool:
        return any(isinstance(layer, ReLU) for layer in self.layers)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(graph: Graph, x) -> tuple[np.ndarray, np.ndarray]:
    """Logits and softmax probabilities; a single image gives 1-d outputs."""
    xb, single = graph.batch(x)
    logits = graph.run(xb).logits
    probs = softmax(logits)
    if single:
        return logits[0], probs[0]
    return logits, probs


def _one_hot(n: int, n_classes: int, class_index) -> np.ndarray:
    idx = np.broadcast_to(np.asarray(class_index, dtype=int), (n,))
    if np.any(idx < 0) or np.any(idx >= n_classes):
        raise IndexError(f"class index {class_index} out of range for {n_classes} classes")
    seed = np.zeros((n, n_classes), DTYPE)
    seed[np.arange(n), idx] = 1.0
    return seed


def output_seed(tape: GradTape, class_index, use_logit: bool = True) -> np.ndarray:
    """Adjoint of the selected output scalar with respect to the logits."""
    logits = tape.logits
    seed = _one_hot(len(logits), logits.shape[1], class_index)
    if use_logit:
        return seed
    p = softmax(logits)
    pc = (p * seed).sum(axis=1, keepdims=True)
    return pc * (seed - p)


def backprop(tape: GradTape, seed: np.ndarray, guided: bool = False) -> list:
    """Reverse pass from ``seed`` at the logits.

    Returns the adjoint of every recorded activation (same indexing as
    ``tape.acts``).  With ``guided`` each nonlinearity also drops negative
    upstream signal (guided backpropagation).
    """
    layers = tape.graph.layers
    deltas = [None] * len(tape.acts)
    g = seed
    deltas[-1] = g
    for k in range(len(layers) - 1, -1, -1):
        layer = layers[k]
        if guided and not layer.linear:
            g = layer.vjp(tape.caches[k], np.maximum(g, 0.0))
        else:
            g = layer.vjp(tape.caches[k], g)
        if not np.all(np.isfinite(g)):
            raise NumericOverflowError(layer.name, "backward")
        deltas[k] = g
    return deltas


def reverse_sweep(tape: GradTape, extras: list) -> np.ndarray:
    """Pull per-activation adjoint contributions ``extras`` back to the input."""
    layers = tape.graph.layers
    g = extras[-1] if extras[-1] is not None else np.zeros_like(tape.acts[-1])
    for k in range(len(layers) - 1, -1, -1):
        g = layers[k].vjp(tape.caches[k], g)
        if extras[k] is not None:
            g = g + extras[k]
    return g


def backprop_adjoint(tape: GradTape, deltas: list, gamma0: np.ndarray, guided: bool = False) -> list:
    """Adjoint of :func:`backprop` with respect to the forward activations.

    ``gamma0`` is dL/d(deltas[0]) for some scalar L of the input gradient.  The
    backward pass depends on the input only through the nonlinearities'
    derivatives, so the result is a list of contributions dL/d(acts[k]) at the
    inputs of activation layers (``None`` elsewhere), ready for
    :func:`reverse_sweep`.  The seed at the logits is treated as constant.
    """
    layers = tape.graph.layers
    extras = [None] * len(tape.acts)
    gamma = gamma0
    for k, layer in enumerate(layers):
        cache = tape.caches[k]
        if layer.linear:
            gamma = layer.jvp(cache, gamma)
        else:
            z = cache
            upstream = deltas[k + 1]
            if guided:
                extras[k] = gamma * layer.d2(z) * np.maximum(upstream, 0.0)
                gamma = gamma * layer.d1(z) * (upstream > 0)
            else:
                extras[k] = gamma * layer.d2(z) * upstream
                gamma = gamma * layer.d1(z)
    return extras


def grad_input(graph: Graph, x, class_index, use_logit: bool = True) -> np.ndarray:
    """Gradient of the selected logit (or softmax probability) w.r.t. the input."""
    xb, single = graph.batch(x)
    tape = graph.run(xb)
    g = backprop(tape, output_seed(tape, class_index, use_logit))[0]
    return g[0] if single else g


def grad_of_scalar_of_grad(
    graph: Graph,
    x,
    class_index,
    scalar_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
) -> np.ndarray:
    """d scalar_fn(d logit_c / dx) / dx for a smooth (ReLU-free) graph.

    ``scalar_fn`` receives the input gradient (same shape as ``x``) and returns
    ``(value, d value / d gradient)``.
    """
    if graph.has_relu:
        raise ContractError("second-order gradients need a ReLU-free graph; substitute SoftPlus first")
    xb, single = graph.batch(x)
    tape = graph.run(xb)
    deltas = backprop(tape, output_seed(tape, class_index))
    grad = deltas[0][0] if single else deltas[0]
    _, dgrad = scalar_fn(grad)
    gamma0 = np.asarray(dgrad, DTYPE).reshape(deltas[0].shape)
    out = reverse_sweep(tape, backprop_adjoint(tape, deltas, gamma0))
    return out[0] if single else out


def substitute_nonlinearity(graph: Graph, mode: str, beta: float = 1.0) -> Graph:
    """Copy of ``graph`` with every ReLU/SoftPlus replaced by ``mode``.

    Parameter arrays are shared with the original graph, not copied.
    """
    if mode not in ("relu", "softplus"):
        raise ValueError(f"unknown nonlinearity {mode!r}")
    layers = []
    for layer in graph.layers:
        if isinstance(layer, (ReLU, SoftPlus)):
            layers.append(ReLU() if mode == "relu" else SoftPlus(beta))
        else:
            layers.append(layer)
    return Graph(layers, graph.input_shape)
