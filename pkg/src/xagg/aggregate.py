"""Aggregation of normalized heatmaps and the error decomposition behind it.

For J maps E_j of a true explanation T, the mean squared error of the
individual maps splits into the error of their mean plus the spread of the
maps around that mean:

    mean_j ||E_j - T||^2 = ||mean_j E_j - T||^2 + mean_j ||E_j - mean_j E_j||^2

so the mean is never worse than a typical member.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .explain import Heatmap, explain, normalize_heatmap

DEFAULT_MEMBERS = ("sm", "gb", "ig", "sg", "gc")
ATTACK_MEMBERS = ("sm", "gb", "lrp")


class StackError(ValueError):
    pass


@dataclass(frozen=True)
class HeatmapStack:
    maps: np.ndarray  # (J, H, W)
    methods: tuple

    def __post_init__(self):
        if self.maps.ndim != 3:
            raise StackError(f"stack must be (J, H, W), got {self.maps.shape}")
        if len(self.methods) != len(self.maps):
            raise StackError("one method id per map")


def make_stack(maps, methods=None, check_normalized: bool = True) -> HeatmapStack:
    arrays = [np.asarray(m, dtype=np.float64) for m in maps]
    if len(arrays) < 2:
        raise StackError(f"aggregation needs at least two maps, got {len(arrays)}")
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise StackError(f"heatmap shapes differ: {sorted(shapes)}")
    stack = np.stack(arrays)
    if check_normalized:
        sums = stack.reshape(len(stack), -1).sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise StackError(f"stack members must sum to one, got sums {sums.tolist()}")
    if methods is None:
        methods = tuple(getattr(m, "provenance", {}).get("method", f"m{i}") for i, m in enumerate(maps))
    return HeatmapStack(stack, tuple(methods))


def _as_stack(stack) -> HeatmapStack:
    return stack if isinstance(stack, HeatmapStack) else make_stack(stack)


def agg_mean(stack) -> Heatmap:
    """Pixelwise mean of the member maps."""
    stack = _as_stack(stack)
    total = np.zeros(stack.maps.shape[1:])
    for m in stack.maps:
        total = total + m
    return Heatmap(total / len(stack.maps), {"method": "agg-mean", "members": list(stack.methods)})


@dataclass(frozen=True)
class AggVarConfig:
    epsilon: float
    multiplier: float | None = None
    mean_sigma: float | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


def pixel_sigma(stack) -> np.ndarray:
    """Population standard deviation across methods at every pixel."""
    return _as_stack(stack).maps.std(axis=0)


def agg_var(stack, cfg: AggVarConfig) -> Heatmap:
    """Mean of the maps divided by (pixelwise spread + epsilon), renormalized to sum one."""
    stack = _as_stack(stack)
    sigma = pixel_sigma(stack)
    raw = stack.maps.mean(axis=0) / (sigma + cfg.epsilon)
    out = normalize_heatmap(raw, positive_only=False)
    return Heatmap(out, {"method": "agg-var", "members": list(stack.methods), "epsilon": cfg.epsilon})


def epsilon_from_dataset(sigma_maps, multiplier: float = 10.0) -> AggVarConfig:
    """Epsilon as ``multiplier`` times the mean spread over every pixel of every image."""
    maps = [np.asarray(s, dtype=np.float64) for s in sigma_maps]
    if not maps:
        raise ValueError("need at least one sigma map")
    if not multiplier > 0:
        raise ValueError(f"multiplier must be > 0, got {multiplier}")
    values = np.concatenate([m.ravel() for m in maps])
    mean_sigma = float(values.mean())
    return AggVarConfig(multiplier * mean_sigma, multiplier, mean_sigma)


# -- decomposition --------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTruthCase:
    truth: np.ndarray
    observations: np.ndarray  # (J, H, W)
    noise: str = ""


@dataclass(frozen=True)
class DecompositionReport:
    per_method_mse: np.ndarray  # (cases, J)
    mean_mse: np.ndarray        # (cases,)
    aggregate_mse: np.ndarray   # (cases,)
    variance: np.ndarray        # (cases,)

    @property
    def max_identity_error(self) -> float:
        return float(np.max(np.abs(self.mean_mse - (self.aggregate_mse + self.variance))))

    def to_json(self) -> dict:
        return {
            "cases": int(len(self.mean_mse)),
            "max_identity_error": self.max_identity_error,
            "inequality_holds": bool(np.all(self.aggregate_mse <= self.mean_mse)),
            "mean_of_mean_mse": float(self.mean_mse.mean()),
            "mean_aggregate_mse": float(self.aggregate_mse.mean()),
            "mean_variance": float(self.variance.mean()),
        }


def _sqnorm(v: np.ndarray) -> float:
    return float(np.sum(v * v))


def decompose_mse(cases) -> DecompositionReport:
    """Per-case error terms; squared error is the squared Euclidean norm over pixels."""
    per, mean_mse, agg, var = [], [], [], []
    for case in cases:
        obs = np.asarray(case.observations, dtype=np.float64)
        truth = np.asarray(case.truth, dtype=np.float64)
        if len(obs) < 2:
            raise StackError("decomposition needs at least two methods per case")
        centre = obs.mean(axis=0)
        errs = np.array([_sqnorm(o - truth) for o in obs])
        per.append(errs)
        mean_mse.append(errs.mean())
        agg.append(_sqnorm(centre - truth))
        var.append(np.mean([_sqnorm(o - centre) for o in obs]))
    return DecompositionReport(np.array(per), np.array(mean_mse), np.array(agg), np.array(var))


def random_cases(n_cases: int, seed: int = 0, n_methods: int = 5, shape=(8, 8), noise: float = 0.05):
    """Random normalized truths with Gaussian-perturbed observations."""
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(n_cases):
        truth = rng.random(shape)
        truth /= truth.sum()
        obs = truth + noise * truth.mean() * rng.standard_normal((n_methods,) + tuple(shape))
        cases.append(SyntheticTruthCase(truth, obs, f"gaussian({noise})"))
    return cases


def pairwise_aggregate_stacks(methods) -> list[tuple[str, str]]:
    """Every unordered pair of methods, in stable lexicographic-by-position order."""
    methods = list(methods)
    if len(methods) < 2:
        raise StackError("need at least two methods for pairs")
    return list(itertools.combinations(methods, 2))


def explain_stack(model, x, members, class_index=None, seed: int = 0, image_id: int = 0,
                  params: dict | None = None, positive_only: bool = True) -> HeatmapStack:
    """Normalized explanations of ``x`` by every member method."""
    params = params or {}
    maps = []
    for m in members:
        hm = explain(model, x, m, class_index, seed=seed, image_id=image_id, **params.get(m, {}))
        maps.append(normalize_heatmap(hm, positive_only).values)
    return make_stack(maps, tuple(members))
