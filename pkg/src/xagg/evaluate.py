"""Faithfulness scores, non-informative baselines and heatmap similarity."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .explain import Heatmap, normalize_heatmap
from .model import as_graph, predict
from .tensor import forward

SIMILARITY_METRICS = ("mse", "pcc", "topk")


class ZeroProbabilityError(ValueError):
    pass


class UndefinedMetricError(ArithmeticError):
    """Raised when a correlation is asked of a constant map."""


# -- IROF --------------------------------------------------------------------

@dataclass
class IrofResult:
    score: float
    curve: np.ndarray   # clipped probability ratios, curve[0] == 1
    order: np.ndarray   # segment removal order
    class_index: int


def default_baseline(model, channels: int = 1) -> np.ndarray:
    """Per-channel dataset mean recorded at training time, else black."""
    meta = getattr(model, "metadata", {}) or {}
    mean = meta.get("channel_mean")
    if mean is None:
        return np.zeros(channels)
    return np.asarray(mean, dtype=np.float64).reshape(channels)


def segment_ranking(E, labels: np.ndarray) -> np.ndarray:
    """Segments by descending mean relevance, ties to the lowest label."""
    values = np.asarray(E, dtype=np.float64).ravel()
    flat = labels.ravel()
    n = int(flat.max()) + 1
    means = np.bincount(flat, weights=values, minlength=n) / np.bincount(flat, minlength=n)
    return np.lexsort((np.arange(n), -means))


def irof(model, x, E, seg, baseline_value=None, T: int | None = None, class_index=None) -> IrofResult:
    """Area over the probability-ratio curve while removing the most relevant segments first."""
    graph = as_graph(model)
    xb, single = graph.batch(x)
    if not single:
        raise ValueError("irof takes a single image")
    labels = np.asarray(getattr(seg, "labels", seg))
    n_seg = int(labels.max()) + 1
    T = n_seg if T is None else int(T)
    if not 0 <= T <= n_seg:
        raise ValueError(f"T must be in [0, {n_seg}], got {T}")
    channels = xb.shape[1]
    base = default_baseline(model, channels) if baseline_value is None else np.broadcast_to(
        np.asarray(baseline_value, dtype=np.float64), (channels,))
    c = predict(graph, xb[0])[0] if class_index is None else int(class_index)
    order = segment_ranking(E, labels)
    batch = np.repeat(xb, T + 1, axis=0)
    removed = np.zeros(labels.shape, dtype=bool)
    for t in range(1, T + 1):
        removed |= labels == order[t - 1]
        batch[t][:, removed] = base[:, None]
    probs = forward(graph, batch)[1][:, c]
    if probs[0] <= 0.0:
        raise ZeroProbabilityError("original class probability is zero")
    curve = np.clip(probs / probs[0], 0.0, 1.0)
    score = 100.0 * float(np.mean(1.0 - curve))
    return IrofResult(score, curve, order[:T], c)


# -- Sensitivity-n -----------------------------------------------------------

def log_grid(lo: float = 10, hi: float = 780, points: int = 15) -> list[int]:
    """Integer subset sizes log-spaced in [lo, hi]."""
    return [int(v) for v in np.round(np.geomspace(lo, hi, points))]


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    na, nb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    # spread at rounding level (e.g. equal sums added in different orders) counts as constant
    tol_a = 1e-12 * math.sqrt(a.size) * float(np.max(np.abs(a), initial=0.0))
    tol_b = 1e-12 * math.sqrt(b.size) * float(np.max(np.abs(b), initial=0.0))
    if na <= tol_a or nb <= tol_b:
        raise UndefinedMetricError("correlation undefined for a constant vector")
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


@dataclass
class SensitivityNResult:
    n_values: list
    mean_pcc: list          # nan where every image was excluded
    n_excluded: list
    subsets: int
    seed: int
    per_image: np.ndarray = field(repr=False, default=None)  # (images, n) with nan for excluded


def sensitivity_n_image(graph, x, E, n_values, subsets: int, rng, use_logit: bool = True,
                        class_index=None) -> np.ndarray:
    """PCC per subset size between output decrease and removed relevance (nan if undefined)."""
    xb = graph.batch(x)[0]
    c = predict(graph, xb[0])[0] if class_index is None else int(class_index)
    relevance = np.asarray(E, dtype=np.float64).ravel()
    h, w = xb.shape[2:]
    n_pix = h * w
    out = np.full(len(n_values), np.nan)
    logits, probs = forward(graph, xb)
    ref = (logits if use_logit else probs)[0, c]
    for j, n in enumerate(n_values):
        if not 1 <= n <= n_pix:
            raise ValueError(f"subset size {n} outside [1, {n_pix}]")
        idx = np.stack([rng.choice(n_pix, size=n, replace=False) for _ in range(subsets)])
        masks = np.ones((subsets, n_pix))
        np.put_along_axis(masks, idx, 0.0, axis=1)
        batch = xb * masks.reshape(subsets, 1, h, w)
        lg, pr = forward(graph, batch)
        drop = ref - (lg if use_logit else pr)[:, c]
        sums = relevance[idx].sum(axis=1)
        try:
            out[j] = pearson(drop, sums)
        except UndefinedMetricError:
            pass
    return out


def sensitivity_n(model, images, heatmaps, n_grid=None, subsets_per_n: int = 100, seed: int = 0,
                  use_logit: bool = True, image_ids=None) -> SensitivityNResult:
    """Mean over images of the per-size correlations; constant cases are excluded and counted."""
    graph = as_graph(model)
    n_values = log_grid() if n_grid is None else [int(n) for n in n_grid]
    ids = range(len(images)) if image_ids is None else image_ids
    rows = []
    for i, x, E in zip(ids, images, heatmaps):
        rng = np.random.default_rng([seed, int(i)])
        rows.append(sensitivity_n_image(graph, x, E, n_values, subsets_per_n, rng, use_logit))
    return summarize_sensitivity(n_values, np.array(rows), subsets_per_n, seed)


def summarize_sensitivity(n_values, per_image: np.ndarray, subsets: int, seed: int) -> SensitivityNResult:
    means, excluded = [], []
    for j in range(len(n_values)):
        col = per_image[:, j]
        ok = col[~np.isnan(col)]
        means.append(float(ok.mean()) if len(ok) else float("nan"))
        excluded.append(int(np.isnan(col).sum()))
    return SensitivityNResult(list(n_values), means, excluded, subsets, seed, per_image)


# -- baselines ---------------------------------------------------------------

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel_baseline(x) -> Heatmap:
    """Sobel gradient magnitude (zero padding), normalized to sum one."""
    img = np.asarray(x, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError("sobel baseline expects a single-channel image")
        img = img[0]
    gx = ndimage.correlate(img, SOBEL_X, mode="constant", cval=0.0)
    gy = ndimage.correlate(img, SOBEL_X.T, mode="constant", cval=0.0)
    return Heatmap(normalize_heatmap(np.hypot(gx, gy)), {"method": "sobel"})


def random_baseline(shape, seed: int = 0) -> Heatmap:
    values = np.random.default_rng(seed).random(tuple(shape)[-2:])
    return Heatmap(normalize_heatmap(values), {"method": "random", "seed": seed})


# -- similarity ----------------------------------------------------------------

def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"heatmap shapes differ: {a.shape} vs {b.shape}")
    return a, b


def topk_indices(v, k: int) -> np.ndarray:
    return np.argsort(-np.asarray(v, dtype=np.float64).ravel(), kind="stable")[:k]


def similarity(a, b, metric: str, fraction: float = 0.1) -> float:
    """MSE of sum-normalized maps, Pearson correlation, or top-k overlap fraction."""
    a, b = _check_pair(a, b)
    if metric == "mse":
        na = normalize_heatmap(a, positive_only=False)
        nb = normalize_heatmap(b, positive_only=False)
        return float(np.mean((na - nb) ** 2))
    if metric == "pcc":
        return pearson(a, b)
    if metric == "topk":
        if not 0 < fraction <= 1:
            raise ValueError("top-k fraction must be in (0, 1]")
        k = math.ceil(round(fraction * a.size, 9))
        common = np.intersect1d(topk_indices(a, k), topk_indices(b, k))
        return len(common) / k
    raise ValueError(f"unknown similarity metric {metric!r}")


def metric_diff(E_target, E_adv, E_orig, metric: str, fraction: float = 0.1) -> float:
    """How much closer to the target the adversarial map is than the original one."""
    return similarity(E_target, E_adv, metric, fraction) - similarity(E_target, E_orig, metric, fraction)


def cosine_alignment(E, A) -> float:
    e, a = _check_pair(E, A)
    ne, na = np.linalg.norm(e), np.linalg.norm(a)
    if ne == 0.0 or na == 0.0:
        return 0.0
    return float(np.clip(np.sum(a * e) / (ne * na), 0.0, 1.0))


def pairwise_ratio(methods, single_scores: dict, pair_scores: dict) -> list[tuple[str, str, float]]:
    """Mean IROF of each two-method aggregate over the mean IROF of its two members.

    ``single_scores`` maps method -> mean score and ``pair_scores`` maps an
    ordered pair from :func:`xagg.aggregate.pairwise_aggregate_stacks` to the
    mean score of its aggregate.  The diagonal is 1.
    """
    rows = []
    for a in methods:
        for b in methods:
            if a == b:
                rows.append((a, b, 1.0))
                continue
            key = (a, b) if (a, b) in pair_scores else (b, a)
            rows.append((a, b, pair_scores[key] / (0.5 * (single_scores[a] + single_scores[b]))))
    return rows
