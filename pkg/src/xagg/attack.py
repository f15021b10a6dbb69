"""Input-space attacks that steer an explanation while keeping the prediction.

The attack optimizes a perturbed input x' so that the sum-normalized
explanation of x' approaches a target map (or drains relevance from a mask),
with a penalty on the change of the logits.  Explanations are differentiated
on a copy of the network whose ReLUs are replaced by SoftPlus with a growing
beta; reported maps are always computed on the original ReLU network.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .aggregate import ATTACK_MEMBERS, agg_mean, make_stack
from .evaluate import SIMILARITY_METRICS, UndefinedMetricError, metric_diff, similarity
from .explain import explain, lrp_adjoint, lrp_pass, normalize_heatmap
from .model import as_graph, predict
from .tensor import (
    NumericOverflowError, backprop, backprop_adjoint, output_seed, reverse_sweep,
    substitute_nonlinearity,
)

log = logging.getLogger(__name__)

ATTACKABLE = ("sm", "gb", "lrp", "agg-mean")


class AttackAbortedError(FloatingPointError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class AttackConfig:
    method: str = "sm"
    members: tuple = ATTACK_MEMBERS
    lr: float = 1e-3
    iterations: int = 300
    beta_start: float = 10.0
    beta_end: float = 800.0
    beta_growth: str = "geometric"
    w_expl: float = 1.0
    w_out: float | None = None
    out_tolerance: float = 0.1
    optimizer: str = "adam"
    clamp: tuple = (0.0, 1.0)
    lrp_eps: float | None = None
    lrp_eps_scale: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.method not in ATTACKABLE:
            raise ValueError(f"cannot attack {self.method!r}; choose from {', '.join(ATTACKABLE)}")
        if self.iterations < 0 or self.lr < 0:
            raise ValueError("iterations and lr must be >= 0")
        if not 0 < self.beta_start <= self.beta_end:
            raise ValueError("need 0 < beta_start <= beta_end")
        if self.beta_growth not in ("geometric", "linear"):
            raise ValueError(f"unknown beta growth {self.beta_growth!r}")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.method == "agg-mean":
            if len(self.members) < 2:
                raise ValueError("agg-mean needs at least two members")
            bad = [m for m in self.members if m not in ATTACKABLE[:3]]
            if bad:
                raise ValueError(f"cannot attack members {bad}")

    @property
    def explained(self) -> tuple:
        return tuple(self.members) if self.method == "agg-mean" else (self.method,)

    def beta(self, it: int) -> float:
        if self.iterations == 0:
            return self.beta_start
        frac = it / self.iterations
        if self.beta_growth == "linear":
            return self.beta_start + frac * (self.beta_end - self.beta_start)
        return self.beta_start * (self.beta_end / self.beta_start) ** frac


@dataclass
class AttackResult:
    x_adv: np.ndarray
    trace: list
    E_orig: np.ndarray
    E_adv: np.ndarray
    E_target: np.ndarray | None
    metric_diffs: dict
    input_mse: float
    label_preserved: bool
    class_index: int
    extra: dict = field(default_factory=dict)


# -- differentiable explanation on a smooth graph ---------------------------

def _raw_map(tape, method, c, cfg):
    if method in ("sm", "gb"):
        deltas = backprop(tape, output_seed(tape, c), guided=method == "gb")
        g = deltas[0][0]
        return np.abs(g).sum(axis=0), deltas
    rels, stash = lrp_pass(tape, c, cfg.lrp_eps, cfg.lrp_eps_scale)
    return rels[0][0].sum(axis=0), stash


def _raw_extras(tape, method, c, aux, d_raw):
    if method in ("sm", "gb"):
        g = aux[0]
        gamma0 = d_raw[None, None] * np.sign(g)
        return backprop_adjoint(tape, aux, gamma0, guided=method == "gb")
    rho0 = np.broadcast_to(d_raw, tape.acts[0].shape[1:])[None].copy()
    return lrp_adjoint(tape, aux, c, rho0)


def _normalize_with_grad(raw):
    """Positive-part sum normalization and its backward rule."""
    pos = np.maximum(raw, 0.0)
    total = pos.sum()
    if total == 0.0:
        return np.full(raw.shape, 1.0 / raw.size), lambda g: np.zeros_like(raw)
    E = pos / total

    def back(g):
        return (g - np.sum(g * E)) / total * (raw > 0)

    return E, back


def _add(extras, more):
    for k, v in enumerate(more):
        if v is not None:
            extras[k] = v if extras[k] is None else extras[k] + v


def smooth_explanation(graph, x, c, cfg: AttackConfig, beta: float):
    """Normalized (aggregate) explanation on the SoftPlus graph plus a pullback closure."""
    smooth = substitute_nonlinearity(graph, "softplus", beta)
    tape = smooth.run(x[None])
    parts = []
    for m in cfg.explained:
        raw, aux = _raw_map(tape, m, c, cfg)
        E, back = _normalize_with_grad(raw)
        parts.append((m, aux, E, back))
    E = sum(p[2] for p in parts) / len(parts)

    def pullback(dE):
        extras = [None] * len(tape.acts)
        share = dE / len(parts)
        for m, aux, _, back in parts:
            _add(extras, _raw_extras(tape, m, c, aux, back(share)))
        return extras

    return tape, E, pullback


def objective(graph, x, c, cfg: AttackConfig, beta: float, logits0, w_out, expl_loss):
    """Total loss and its input gradient.

    ``expl_loss(E)`` returns (value, dvalue/dE) for the explanation term.
    """
    tape, E, pullback = smooth_explanation(graph, x, c, cfg, beta)
    le, dE = expl_loss(E)
    extras = pullback(cfg.w_expl * dE)
    diff = tape.logits[0] - logits0
    lo = float(diff @ diff)
    out_extra = [None] * len(tape.acts)
    out_extra[-1] = (2.0 * w_out * diff)[None]
    _add(extras, out_extra)
    grad = reverse_sweep(tape, extras)[0]
    return cfg.w_expl * le + w_out * lo, grad, le, lo


def lrp_kwargs_for(method, cfg):
    if method != "lrp":
        return {}
    return {"eps_rule": cfg.lrp_eps, "eps_scale": cfg.lrp_eps_scale}


def _explain_for_report(graph, x, method, c, cfg):
    return explain(graph, x, method, c, **lrp_kwargs_for(method, cfg))


def reported_explanation(model, x, method: str, class_index, cfg: AttackConfig | None = None) -> np.ndarray:
    """Normalized explanation on the ReLU network, as used for every reported metric."""
    cfg = cfg or AttackConfig()
    graph = as_graph(model)
    members = tuple(cfg.members) if method == "agg-mean" else (method,)
    maps = [normalize_heatmap(_explain_for_report(graph, x, m, class_index, cfg)).values for m in members]
    if len(maps) == 1:
        return maps[0]
    return agg_mean(make_stack(maps, members)).values


# -- optimizer ----------------------------------------------------------------

class _Adam:
    def __init__(self, shape, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.b1, self.b2, self.eps = b1, b2, eps

    def state(self):
        return self.m.copy(), self.v.copy(), self.t

    def restore(self, state):
        self.m, self.v, self.t = state[0].copy(), state[1].copy(), state[2]

    def direction(self, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return mh / (np.sqrt(vh) + self.eps)


class _Plain:
    def __init__(self, shape):
        pass

    def state(self):
        return None

    def restore(self, state):
        pass

    def direction(self, g):
        return g


def optimize(graph, x, c, cfg: AttackConfig, expl_loss, max_retries: int = 5):
    """Descend the attack objective from ``x``; returns (x', trace, w_out)."""
    lo_, hi_ = cfg.clamp
    x = np.asarray(x, dtype=np.float64)
    logits0 = graph.run(x[None]).logits[0]
    w_out = cfg.w_out
    if w_out is None:
        # the output penalty equals the initial explanation loss once the
        # logits have moved by out_tolerance of their norm
        _, E0, _ = smooth_explanation(graph, x, c, cfg, cfg.beta(0))
        le0 = expl_loss(E0)[0]
        scale = (cfg.out_tolerance * np.linalg.norm(logits0)) ** 2
        w_out = cfg.w_expl * le0 / scale if scale > 0 and le0 > 0 else 1.0
    opt = (_Adam if cfg.optimizer == "adam" else _Plain)(x.shape)
    lr = cfg.lr
    xa = x.copy()
    loss, grad, _, _ = objective(graph, xa, c, cfg, cfg.beta(0), logits0, w_out, expl_loss)
    trace = [loss]
    for it in range(1, cfg.iterations + 1):
        beta = cfg.beta(it)
        saved = opt.state()
        for attempt in range(max_retries + 1):
            cand = np.clip(xa - lr * opt.direction(grad), lo_, hi_)
            try:
                new_loss, new_grad, _, _ = objective(graph, cand, c, cfg, beta, logits0, w_out, expl_loss)
                ok = np.isfinite(new_loss) and np.all(np.isfinite(new_grad))
            except NumericOverflowError:
                ok = False
            if ok:
                break
            opt.restore(saved)
            lr *= 0.5
            log.warning("non-finite attack loss at iteration %d, lr halved to %g", it, lr)
        else:
            raise AttackAbortedError(f"attack diverged at iteration {it}", trace)
        assert np.all(cand >= lo_) and np.all(cand <= hi_)
        xa, loss, grad = cand, new_loss, new_grad
        trace.append(float(loss))
    return xa, trace, w_out


def target_loss(E_target):
    def fn(E):
        d = E - E_target
        return float(np.sum(d * d)), 2.0 * d
    return fn


def mask_loss(mask):
    mask = np.asarray(mask, dtype=np.float64)

    def fn(E):
        return float(np.sum(mask * E)), mask
    return fn


def _finish(model, x, xa, trace, c, cfg, E_target, w_out) -> AttackResult:
    E_orig = reported_explanation(model, x, cfg.method, c, cfg)
    E_adv = reported_explanation(model, xa, cfg.method, c, cfg) if cfg.iterations else E_orig.copy()
    diffs = {}
    if E_target is not None:
        for m in SIMILARITY_METRICS:
            try:
                diffs[m] = metric_diff(E_target, E_adv, E_orig, m)
            except UndefinedMetricError:
                diffs[m] = float("nan")
    return AttackResult(
        x_adv=xa, trace=trace, E_orig=E_orig, E_adv=E_adv, E_target=E_target, metric_diffs=diffs,
        input_mse=float(np.mean((xa - x) ** 2)),
        label_preserved=bool(predict(model, xa)[0] == c),
        class_index=c, extra={"w_out": w_out, "config": asdict(cfg)},
    )


def attack(model, x, E_target, cfg: AttackConfig = AttackConfig()) -> AttackResult:
    """Make the explanation of x' resemble ``E_target`` (a normalized map)."""
    graph = as_graph(model)
    x = np.asarray(x, dtype=np.float64)
    c = predict(graph, x)[0]
    E_target = np.asarray(E_target, dtype=np.float64)
    if E_target.shape != x.shape[1:]:
        raise ValueError(f"target map shape {E_target.shape} does not match input {x.shape[1:]}")
    xa, trace, w_out = optimize(graph, x, c, cfg, target_loss(E_target))
    return _finish(model, x, xa, trace, c, cfg, E_target, w_out)


def center_mask(shape, fraction: float = 0.25) -> np.ndarray:
    """Centred square covering ``fraction`` of the image area."""
    h, w = shape
    side_h, side_w = int(round(h * fraction ** 0.5)), int(round(w * fraction ** 0.5))
    mask = np.zeros((h, w))
    top, left = (h - side_h) // 2, (w - side_w) // 2
    mask[top:top + side_h, left:left + side_w] = 1.0
    return mask


def attack_blank_region(model, x, mask, cfg: AttackConfig = AttackConfig()) -> AttackResult:
    """Drain relevance from ``mask``; ``extra['preserved']`` is end/start in-mask mass."""
    graph = as_graph(model)
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape[1:] or not mask.any():
        raise ValueError("mask must be a nonempty map of the input's spatial shape")
    c = predict(graph, x)[0]
    xa, trace, w_out = optimize(graph, x, c, cfg, mask_loss(mask))
    res = _finish(model, x, xa, trace, c, cfg, None, w_out)
    start = float(np.sum(mask * res.E_orig))
    end = float(np.sum(mask * res.E_adv))
    res.extra.update(start_fraction=start, end_fraction=end,
                     preserved=end / start if start > 0 else 1.0)
    return res


def transfer_matrix(model, images, targets, attacked, evaluated, cfg: AttackConfig = AttackConfig(),
                    image_ids=None, metric: str = "pcc"):
    """Attack each method in ``attacked`` and score every method in ``evaluated``.

    ``targets[i]`` is the image whose explanation is the target for ``images[i]``.
    Returns (matrix of mean metric_diff, per-image records).
    """
    ids = list(range(len(images))) if image_ids is None else list(image_ids)
    records = []
    for a in attacked:
        acfg = replace(cfg, method=a)
        for i, x, xt in zip(ids, images, targets):
            records.extend(transfer_records(model, x, xt, acfg, evaluated, i))
    mat = np.zeros((len(attacked), len(evaluated)))
    for r, a in enumerate(attacked):
        for s, b in enumerate(evaluated):
            vals = [rec["metric_diff"] for rec in records
                    if rec["attacked_method"] == a and rec["evaluated_method"] == b and rec["metric"] == metric]
            mat[r, s] = float(np.mean(vals)) if vals else float("nan")
    return mat, records


def transfer_records(model, x, x_target, cfg: AttackConfig, evaluated, image_id: int) -> list[dict]:
    """One attack on ``cfg.method``; metric records for each evaluated method."""
    E_target = reported_explanation(model, x_target, cfg.method, None, cfg)
    res = attack(model, x, E_target, cfg)
    c = res.class_index
    out = []
    for b in evaluated:
        if b == cfg.method:
            Et, Eo, Ea = E_target, res.E_orig, res.E_adv
        else:
            Et = reported_explanation(model, x_target, b, None, cfg)
            Eo = reported_explanation(model, x, b, c, cfg)
            Ea = reported_explanation(model, res.x_adv, b, c, cfg) if cfg.iterations else Eo
        for m in SIMILARITY_METRICS:
            before = _sim_or_nan(Et, Eo, m)
            after = _sim_or_nan(Et, Ea, m)
            out.append({
                "image_id": image_id, "attacked_method": cfg.method, "evaluated_method": b,
                "metric": m, "value_before": before, "value_after": after,
                "metric_diff": after - before, "input_mse": res.input_mse,
                "label_preserved": res.label_preserved,
            })
    return out


def _sim_or_nan(a, b, metric):
    try:
        return similarity(a, b, metric)
    except UndefinedMetricError:
        return float("nan")
