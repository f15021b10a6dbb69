"""Command-line entry point: ``xagg <command> [options]``.

Every option can also come from the environment (``XAGG_<OPTION>``, e.g.
``XAGG_N_IMAGES=20``) or from a TOML file passed with ``--config``; flags win
over the environment, which wins over the file.  Each run writes the resolved
configuration and a manifest of output hashes into ``--out-dir``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio
from .aggregate import (
    ATTACK_MEMBERS, DEFAULT_MEMBERS, AggVarConfig, agg_mean, agg_var, decompose_mse, epsilon_from_dataset,
    make_stack, pairwise_aggregate_stacks, pixel_sigma, random_cases,
)
from .attack import AttackConfig, attack_blank_region, center_mask, transfer_records
from .evaluate import (
    ZeroProbabilityError, irof, log_grid, random_baseline, sensitivity_n_image, sobel_baseline,
    summarize_sensitivity, pairwise_ratio,
)
from .explain import METHODS, explain, normalize_heatmap
from .model import TrainConfig, accuracy, build_reference_cnn, load_checkpoint, save_checkpoint, train
from .segment import grid_segments, slic

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("xagg")

AGG_METHODS = ("agg-mean", "agg-var")
SYNTHETIC_SIZES = {"train": 2000, "test": 500}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- option registry with flag > env > TOML > default precedence ------------

_OPTIONS: dict[str, dict[str, tuple]] = {}


def _opt(sub, command, name, type=str, default=None, help=None, choices=None, flag=False):
    dest = name.lstrip("-").replace("-", "_")
    _OPTIONS.setdefault(command, {})[dest] = (type, default, flag)
    if flag:
        sub.add_argument(name, action="store_true", default=None, help=help)
    else:
        sub.add_argument(name, default=None, help=help, choices=choices,
                         metavar=dest.upper() if choices is None else None)


def _convert(value, type_, flag):
    if flag:
        if isinstance(value, bool):
            return value
        return str(value).lower() in ("1", "true", "yes", "on")
    if type_ is list:
        if isinstance(value, (list, tuple)):
            return [str(v) for v in value]
        return [v.strip() for v in str(value).split(",") if v.strip()]
    return type_(value)


def resolve_config(command: str, args: argparse.Namespace, env=None) -> dict:
    env = os.environ if env is None else env
    table = {}
    if getattr(args, "config", None):
        with open(args.config, "rb") as fh:
            doc = tomllib.load(fh)
        table = {k: v for k, v in doc.items() if not isinstance(v, dict)}
        table.update(doc.get(command, {}))
    resolved = {}
    for dest, (type_, default, flag) in _OPTIONS[command].items():
        value = getattr(args, dest)
        env_key = f"XAGG_{dest.upper()}"
        if value is None and env_key in env:
            value = env[env_key]
        if value is None and dest in table:
            value = table[dest]
        if value is None:
            value = default
        resolved[dest] = None if value is None else _convert(value, type_, flag)
    return resolved


def _common(sub, command, images=True):
    _opt(sub, command, "--seed", int, 0, "global seed")
    _opt(sub, command, "--out-dir", str, "xagg-out", "directory for outputs, config and manifest")
    _opt(sub, command, "--data-dir", str, None, "dataset root (defaults to $XAGG_DATA_DIR)")
    sub.add_argument("--config", help="TOML file with option defaults")
    if images:
        _opt(sub, command, "--ckpt", str, None, "checkpoint file")
        _opt(sub, command, "--n-images", int, 100, "number of test images (from index 0)")
        _opt(sub, command, "--jobs", int, 1, "worker processes (results do not depend on it)")
        _opt(sub, command, "--ig-steps", int, 64, "integrated gradients steps")
        _opt(sub, command, "--sg-samples", int, 25, "smoothgrad samples")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xagg", description="Aggregate, evaluate and attack pixel attributions.")
    p.add_argument("-v", "--verbose", action="store_true")
    subs = p.add_subparsers(dest="command", parser_class=_Parser)

    s = subs.add_parser("train", help="train the reference CNN")
    _common(s, "train", images=False)
    _opt(s, "train", "--dataset", str, "mnist", "mnist, fashion or synthetic")
    _opt(s, "train", "--out", str, None, "checkpoint path (default <out-dir>/<dataset>.ckpt)")
    _opt(s, "train", "--epochs", int, 30, "maximum epochs")
    _opt(s, "train", "--patience", int, 3, "early stopping patience")
    _opt(s, "train", "--batch-size", int, 128)
    _opt(s, "train", "--val-fraction", float, 0.1)
    _opt(s, "train", "--train-limit", int, None, "use only the first N training images")

    s = subs.add_parser("explain", help="write one heatmap and its rendering")
    _common(s, "explain")
    _opt(s, "explain", "--image-index", int, 0)
    _opt(s, "explain", "--method", str, "sm", choices=METHODS + AGG_METHODS)
    _opt(s, "explain", "--members", list, list(DEFAULT_MEMBERS), "comma list for aggregate methods")
    _opt(s, "explain", "--eps-multiplier", float, 10.0, "agg-var epsilon as multiple of mean sigma")
    _opt(s, "explain", "--out", str, None, "heatmap file (default <out-dir>/<method>_<index>.xagh)")
    _opt(s, "explain", "--clip-percentile", float, 99.0, "render clip percentile")
    _opt(s, "explain", "--png", bool, False, "also render a PNG", flag=True)

    s = subs.add_parser("eval-irof", help="IROF score per method and image")
    _common(s, "eval-irof")
    _opt(s, "eval-irof", "--methods", list, list(DEFAULT_MEMBERS + AGG_METHODS))
    _opt(s, "eval-irof", "--members", list, list(DEFAULT_MEMBERS), "aggregate members")
    _opt(s, "eval-irof", "--segments", str, "slic", choices=("slic", "grid"))
    _opt(s, "eval-irof", "--cell", int, 4, "grid cell size")
    _opt(s, "eval-irof", "--n-segments", int, 49, "SLIC segment count")
    _opt(s, "eval-irof", "--baseline", str, "mean", choices=("mean", "zero"))
    _opt(s, "eval-irof", "--eps-multiplier", float, 10.0)
    _opt(s, "eval-irof", "--csv", str, None, "output CSV (default <out-dir>/irof.csv)")

    s = subs.add_parser("eval-sensn", help="Sensitivity-n curves")
    _common(s, "eval-sensn")
    _opt(s, "eval-sensn", "--methods", list, list(DEFAULT_MEMBERS + ("agg-mean",)))
    _opt(s, "eval-sensn", "--members", list, list(DEFAULT_MEMBERS))
    _opt(s, "eval-sensn", "--n-grid", list, None, "comma list of subset sizes (default 15 log-spaced in [10, 780])")
    _opt(s, "eval-sensn", "--subsets", int, 100)
    _opt(s, "eval-sensn", "--csv", str, None, "output CSV (default <out-dir>/sensn.csv)")

    s = subs.add_parser("pairwise", help="IROF of two-method aggregates over their members")
    _common(s, "pairwise")
    _opt(s, "pairwise", "--methods", list, list(DEFAULT_MEMBERS))
    _opt(s, "pairwise", "--n-segments", int, 49)
    _opt(s, "pairwise", "--csv", str, None, "output CSV (default <out-dir>/pairwise_ratio.csv)")

    for name, helptext in (("attack", "attack explanations"), ("transfer", "transferability of attacks")):
        s = subs.add_parser(name, help=helptext)
        _common(s, name)
        _opt(s, name, "--iters", int, 300)
        _opt(s, name, "--lr", float, 1e-3)
        _opt(s, name, "--out-tolerance", float, 0.1, "logit drift at which both loss terms balance")
        _opt(s, name, "--csv", str, None, "output CSV (default <out-dir>/attack_runs.csv)")
    _opt(subs.choices["attack"], "attack", "--attacked", list, ["sm", "gb", "lrp", "agg-mean"])
    _opt(subs.choices["attack"], "attack", "--objective", str, "target", choices=("target", "blank"))
    _opt(subs.choices["transfer"], "transfer", "--attacked-set", list, list(ATTACK_MEMBERS))
    _opt(subs.choices["transfer"], "transfer", "--eval-set", list, list(ATTACK_MEMBERS))

    s = subs.add_parser("decompose", help="check the MSE decomposition on synthetic stacks")
    _common(s, "decompose", images=False)
    _opt(s, "decompose", "--trials", int, 1000)
    _opt(s, "decompose", "--methods", int, 5, "maps per stack")
    _opt(s, "decompose", "--noise", float, 0.5)
    _opt(s, "decompose", "--csv", str, None, "optional per-trial CSV")
    return p


# -- data and workers ----------------------------------------------------------

def load_data(name: str, split: str, root=None) -> dataio.Dataset:
    if name == "synthetic":
        spec = dataio.SyntheticSpec(seed=0 if split == "train" else 1)
        return replace_split(dataio.make_synthetic(spec, SYNTHETIC_SIZES[split])[0], split)
    return dataio.load_dataset(name, split, root)


def replace_split(ds, split):
    return dataio.Dataset(ds.images, ds.labels, ds.name, split)


_WORKER: dict = {}


def _init_worker(ckpt_path, data_dir, cfg):
    ckpt = load_checkpoint(ckpt_path)
    ds = load_data(ckpt.metadata.get("dataset", "mnist"), "test", data_dir)
    _WORKER.update(ckpt=ckpt, images=ds.images, cfg=cfg)


def _map(fn, items, cfg):
    jobs = max(1, cfg.get("jobs") or 1)
    if jobs == 1:
        _init_worker(cfg["ckpt"], cfg["data_dir"], cfg)
        return [fn(it) for it in items]
    with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(cfg["ckpt"], cfg["data_dir"], cfg)) as ex:
        return list(ex.map(fn, items))


def _method_params(cfg) -> dict:
    return {"ig": {"steps": cfg["ig_steps"]}, "sg": {"samples": cfg["sg_samples"]}}


def _single_maps(ckpt, x, methods, cfg, image_id, segments=None) -> dict:
    params = _method_params(cfg)
    out = {}
    for m in methods:
        extra = dict(params.get(m, {}))
        if m == "lime" and segments is not None:
            extra["segments"] = segments
        hm = explain(ckpt, x, m, seed=cfg["seed"], image_id=image_id, **extra)
        out[m] = normalize_heatmap(hm).values
    return out


def _singles_needed(methods, members):
    need = [m for m in methods if m in METHODS]
    if any(m in AGG_METHODS for m in methods):
        need += [m for m in members if m not in need]
    for m in need:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}")
    return need


def _check_methods(methods, members, allow=METHODS + AGG_METHODS + ("random", "sobel")):
    bad = [m for m in methods if m not in allow]
    if bad:
        raise UsageError(f"unknown method(s) {bad}; choose from {', '.join(allow)}")
    if any(m in AGG_METHODS for m in methods) and len(members) < 2:
        raise UsageError("aggregate methods need at least two members")


def _segments_for(x, cfg):
    if cfg.get("segments", "slic") == "grid":
        return grid_segments(x.shape, cfg["cell"])
    return slic(x, n_segments=cfg["n_segments"], seed=cfg["seed"])


def _irof_stage1(i):
    ckpt, cfg = _WORKER["ckpt"], _WORKER["cfg"]
    x = _WORKER["images"][i]
    seg = _segments_for(x, cfg)
    return _single_maps(ckpt, x, cfg["_singles"], cfg, i, seg), seg.labels


def _irof_stage2(task):
    i, maps, labels = task
    ckpt, cfg = _WORKER["ckpt"], _WORKER["cfg"]
    x = _WORKER["images"][i]
    base = 0.0 if cfg["baseline"] == "zero" else None
    maps = maps + [("random", random_baseline(labels.shape, seed=cfg["seed"] * 1_000_003 + i).values),
                   ("sobel", sobel_baseline(x).values)]
    rows = []
    for m, E in maps:
        try:
            rows.append((m, i, irof(ckpt, x, E, labels, baseline_value=base).score))
        except ZeroProbabilityError:
            log.warning("image %d skipped for %s: zero class probability", i, m)
    return rows


def _aggregate_maps(maps: dict, members, epsilon=None) -> dict:
    stack = make_stack([maps[m] for m in members], tuple(members))
    out = {"agg-mean": agg_mean(stack).values}
    if epsilon is not None:
        out["agg-var"] = agg_var(stack, AggVarConfig(epsilon)).values
    return out


def _epsilon(per_image_maps, members, multiplier):
    sigmas = [pixel_sigma(make_stack([maps[m] for m in members], tuple(members))) for maps in per_image_maps]
    return epsilon_from_dataset(sigmas, multiplier).epsilon


# -- commands ------------------------------------------------------------------

def cmd_train(cfg, out_dir):
    ds = load_data(cfg["dataset"], "train", cfg["data_dir"])
    if cfg["train_limit"]:
        ds = ds.subset(np.arange(min(cfg["train_limit"], len(ds))))
    n_classes = int(ds.labels.max()) + 1 if cfg["dataset"] == "synthetic" else 10
    tcfg = TrainConfig(batch_size=cfg["batch_size"], max_epochs=cfg["epochs"], patience=cfg["patience"],
                       val_fraction=cfg["val_fraction"], seed=cfg["seed"])
    ckpt = train(build_reference_cnn(n_classes), ds, tcfg)
    ckpt.metadata["dataset"] = cfg["dataset"]
    test = load_data(cfg["dataset"], "test", cfg["data_dir"])
    ckpt.metadata["test_accuracy"] = accuracy(ckpt, test.images, test.labels)
    out = Path(cfg["out"] or out_dir / f"{cfg['dataset']}.ckpt")
    save_checkpoint(ckpt, out)
    print(json.dumps({"checkpoint": str(out), "epochs": ckpt.metadata["epochs"],
                      "test_accuracy": ckpt.metadata["test_accuracy"]}))
    return [out]


def cmd_explain(cfg, out_dir):
    method = cfg["method"]
    members = cfg["members"]
    if method in AGG_METHODS:
        _check_methods([method], members)
        if len(set(members)) < 2:
            raise UsageError("aggregate methods need at least two distinct members")
    _init_worker(cfg["ckpt"], cfg["data_dir"], cfg)
    ckpt, images = _WORKER["ckpt"], _WORKER["images"]
    i = cfg["image_index"]
    if not 0 <= i < len(images):
        raise UsageError(f"image index {i} out of range")
    x = images[i]
    if method in AGG_METHODS:
        maps = _single_maps(ckpt, x, members, cfg, i)
        eps = _epsilon([maps], members, cfg["eps_multiplier"]) if method == "agg-var" else None
        values = _aggregate_maps(maps, members, eps)[method]
        prov = {"method": method, "members": members, "image_id": i}
        if eps is not None:
            prov["epsilon"] = eps
    else:
        hm = explain(ckpt, x, method, seed=cfg["seed"], image_id=i, **_method_params(cfg).get(method, {}))
        values, prov = hm.values, hm.provenance
    out = Path(cfg["out"] or out_dir / f"{method}_{i}.xagh")
    dataio.write_heatmap(out, values, prov)
    pgm = out.with_suffix(".pgm")
    dataio.write_pgm(pgm, values, cfg["clip_percentile"])
    written = [out, pgm]
    if cfg["png"]:
        written.append(out.with_suffix(".png"))
        dataio.write_png(written[-1], values, cfg["clip_percentile"])
    print(json.dumps({"heatmap": str(out), "method": method, "image_id": i}))
    return written


def cmd_eval_irof(cfg, out_dir):
    methods, members = cfg["methods"], cfg["members"]
    _check_methods(methods, members)
    cfg["_singles"] = _singles_needed(methods, members)
    ids = list(range(cfg["n_images"]))
    stage1 = _map(_irof_stage1, ids, cfg)
    eps = None
    if "agg-var" in methods:
        eps = _epsilon([maps for maps, _ in stage1], members, cfg["eps_multiplier"])
    tasks = []
    for i, (maps, labels) in zip(ids, stage1):
        if any(m in AGG_METHODS for m in methods):
            maps.update(_aggregate_maps(maps, members, eps))
        tasks.append((i, [(m, maps[m]) for m in methods], labels))
    rows = [r for chunk in _map(_irof_stage2, tasks, cfg) for r in chunk]
    path = Path(cfg["csv"] or out_dir / "irof.csv")
    dataio.write_csv(path, dataio.IROF_COLUMNS, rows)
    summary = {m: float(np.mean([r[2] for r in rows if r[0] == m])) for m in methods + ["random", "sobel"]}
    print(json.dumps({"csv": str(path), "mean_irof": summary, "agg_var_epsilon": eps}))
    return [path]


def _sensn_image(i):
    ckpt, cfg = _WORKER["ckpt"], _WORKER["cfg"]
    x = _WORKER["images"][i]
    maps = _single_maps(ckpt, x, cfg["_singles"], cfg, i)
    if any(m in AGG_METHODS for m in cfg["methods"]):
        maps.update(_aggregate_maps(maps, cfg["members"]))
    out = {}
    for k, m in enumerate(cfg["methods"]):
        rng = np.random.default_rng([cfg["seed"], i, k])
        out[m] = sensitivity_n_image(ckpt.graph, x, maps[m], cfg["_grid"], cfg["subsets"], rng)
    return out


def cmd_eval_sensn(cfg, out_dir):
    methods, members = cfg["methods"], cfg["members"]
    _check_methods(methods, members, METHODS + ("agg-mean",))
    cfg["_singles"] = _singles_needed(methods, members)
    grid = log_grid() if not cfg["n_grid"] else [int(v) for v in cfg["n_grid"]]
    cfg["_grid"] = grid
    per_image = _map(_sensn_image, list(range(cfg["n_images"])), cfg)
    rows, summary = [], {}
    for m in methods:
        res = summarize_sensitivity(grid, np.array([r[m] for r in per_image]), cfg["subsets"], cfg["seed"])
        summary[m] = res.mean_pcc
        rows.extend((m, n, p, e) for n, p, e in zip(res.n_values, res.mean_pcc, res.n_excluded))
    path = Path(cfg["csv"] or out_dir / "sensn.csv")
    dataio.write_csv(path, dataio.SENSN_COLUMNS, rows)
    print(json.dumps({"csv": str(path), "n_grid": grid, "mean_pcc": summary}))
    return [path]


def _pairwise_image(i):
    ckpt, cfg = _WORKER["ckpt"], _WORKER["cfg"]
    x = _WORKER["images"][i]
    seg = slic(x, n_segments=cfg["n_segments"], seed=cfg["seed"])
    maps = _single_maps(ckpt, x, cfg["methods"], cfg, i)
    scores = {}
    for m in cfg["methods"]:
        scores[m] = irof(ckpt, x, maps[m], seg).score
    for a, b in pairwise_aggregate_stacks(cfg["methods"]):
        scores[(a, b)] = irof(ckpt, x, agg_mean(make_stack([maps[a], maps[b]], (a, b))).values, seg).score
    return scores


def cmd_pairwise(cfg, out_dir):
    methods = cfg["methods"]
    _check_methods(methods, methods, METHODS)
    if len(methods) < 2:
        raise UsageError("pairwise needs at least two methods")
    per_image = _map(_pairwise_image, list(range(cfg["n_images"])), cfg)
    single = {m: float(np.mean([s[m] for s in per_image])) for m in methods}
    pairs = {p: float(np.mean([s[p] for s in per_image])) for p in pairwise_aggregate_stacks(methods)}
    rows = pairwise_ratio(methods, single, pairs)
    path = Path(cfg["csv"] or out_dir / "pairwise_ratio.csv")
    dataio.write_csv(path, dataio.PAIRWISE_COLUMNS, rows)
    print(json.dumps({"csv": str(path), "mean_irof": single}))
    return [path]


def _attack_cfg(cfg, method) -> AttackConfig:
    return AttackConfig(method=method, lr=cfg["lr"], iterations=cfg["iters"],
                        out_tolerance=cfg["out_tolerance"], seed=cfg["seed"])


def _attack_image(task):
    i, method, evaluated = task
    ckpt, cfg = _WORKER["ckpt"], _WORKER["cfg"]
    images = _WORKER["images"]
    n = cfg["n_images"]
    acfg = _attack_cfg(cfg, method)
    if cfg.get("objective", "target") == "blank":
        res = attack_blank_region(ckpt, images[i], center_mask(images[i].shape[1:]), acfg)
        e = res.extra
        return [{"image_id": i, "attacked_method": method, "evaluated_method": method, "metric": "mask_fraction",
                 "value_before": e["start_fraction"], "value_after": e["end_fraction"],
                 "metric_diff": e["end_fraction"] - e["start_fraction"], "input_mse": res.input_mse,
                 "label_preserved": res.label_preserved}]
    return transfer_records(ckpt, images[i], images[(i + 1) % n], acfg, evaluated, i)


def _run_attacks(cfg, out_dir, attacked, evaluated_for):
    tasks = [(i, m, evaluated_for(m)) for m in attacked for i in range(cfg["n_images"])]
    records = [r for chunk in _map(_attack_image, tasks, cfg) for r in chunk]
    rows = [[r[c] for c in dataio.ATTACK_COLUMNS] for r in records]
    path = Path(cfg["csv"] or out_dir / "attack_runs.csv")
    dataio.write_csv(path, dataio.ATTACK_COLUMNS, rows)
    return path, records


def cmd_attack(cfg, out_dir):
    attacked = cfg["attacked"]
    bad = [m for m in attacked if m not in ("sm", "gb", "lrp", "agg-mean")]
    if bad:
        raise UsageError(f"cannot attack {bad}")
    path, records = _run_attacks(cfg, out_dir, attacked, lambda m: (m,))
    summary = {}
    for m in attacked:
        mine = [r for r in records if r["attacked_method"] == m]
        if cfg["objective"] == "blank":
            pres = [r["value_after"] / r["value_before"] for r in mine if r["value_before"] > 0]
            summary[m] = {"preserved": float(np.mean(pres)) if pres else None}
        else:
            summary[m] = {k: float(np.nanmean([r["metric_diff"] for r in mine if r["metric"] == k]))
                          for k in ("mse", "pcc", "topk")}
        summary[m]["max_input_mse"] = float(max(r["input_mse"] for r in mine))
        summary[m]["label_preserved"] = float(np.mean([r["label_preserved"] for r in mine]))
    print(json.dumps({"csv": str(path), "summary": summary}))
    return [path]


def cmd_transfer(cfg, out_dir):
    attacked, evaluated = cfg["attacked_set"], cfg["eval_set"]
    bad = [m for m in attacked if m not in ("sm", "gb", "lrp", "agg-mean")]
    bad += [m for m in evaluated if m not in METHODS + ("agg-mean",)]
    if bad:
        raise UsageError(f"unsupported methods {bad}")
    path, records = _run_attacks(cfg, out_dir, attacked, lambda m: tuple(evaluated))
    matrix = {a: {b: float(np.nanmean([r["metric_diff"] for r in records if r["attacked_method"] == a
                                       and r["evaluated_method"] == b and r["metric"] == "pcc"]))
                  for b in evaluated} for a in attacked}
    print(json.dumps({"csv": str(path), "pcc_metric_diff": matrix}))
    return [path]


def cmd_decompose(cfg, out_dir):
    cases = random_cases(cfg["trials"], cfg["seed"], cfg["methods"], noise=cfg["noise"])
    report = decompose_mse(cases)
    summary = report.to_json()
    ok = summary["max_identity_error"] <= 1e-10 and summary["inequality_holds"]
    summary["ok"] = ok
    written = []
    if cfg["csv"]:
        rows = [(k, a, b, c) for k, (a, b, c) in
                enumerate(zip(report.mean_mse, report.aggregate_mse, report.variance))]
        dataio.write_csv(cfg["csv"], ("trial", "mean_mse", "aggregate_mse", "variance"), rows)
        written.append(Path(cfg["csv"]))
    print(json.dumps(summary))
    if not ok:
        raise RuntimeError("decomposition check failed")
    return written


COMMANDS = {
    "train": cmd_train, "explain": cmd_explain, "eval-irof": cmd_eval_irof, "eval-sensn": cmd_eval_sensn,
    "pairwise": cmd_pairwise, "attack": cmd_attack, "transfer": cmd_transfer, "decompose": cmd_decompose,
}


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, paths) -> Path:
    manifest = out_dir / "manifest.json"
    doc = json.loads(manifest.read_text()) if manifest.exists() else {"artifacts": {}}
    for p in paths:
        doc["artifacts"][str(Path(p))] = {"sha256": _sha256(p), "bytes": Path(p).stat().st_size,
                                          "command": command}
    manifest.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return manifest


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        raise UsageError("missing command; see xagg --help")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = resolve_config(args.command, args)
    if "ckpt" in cfg:
        if not cfg["ckpt"]:
            raise UsageError("--ckpt is required")
        if not Path(cfg["ckpt"]).exists():
            raise UsageError(f"checkpoint not found: {cfg['ckpt']}")
        if cfg["n_images"] is not None and cfg["n_images"] < 1:
            raise UsageError("--n-images must be >= 1")
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{args.command}-config.json").write_text(
        json.dumps({"command": args.command, **cfg}, indent=2, sort_keys=True) + "\n")
    written = COMMANDS[args.command](cfg, out_dir)
    write_manifest(out_dir, args.command, written)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, FileNotFoundError) as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
