"""Command-line entry point: train, evaluate, certify, attack and simulate flows."""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import yaml

from . import flows
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .data import load_dataset, read_idx
from .errors import CertilipError, ConfigError, UsageError
from .layers import build_network
from .robustness import attack_accuracy, certify, empirical_lipschitz, predict
from .training import OptimizerState, TrainConfig, margins, relaxed_mode, train

log = logging.getLogger("certilip")

DEFAULT_EPS = [36 / 255, 72 / 255, 108 / 255]

PRESETS = {
    "moons-cpl6": {
        "data": {"kind": "synthetic", "synthetic": "two_moons", "n": 2000, "noise": 0.1,
                 "normalization": "standardize", "test_fraction": 0.2},
        "arch": {"input_shape": [2], "num_classes": 2, "last_layer_normalization": True,
                 "layers": [{"type": "zero_pad", "size": 16},
                            {"type": "cpl_dense", "features": 32, "repeat": 6},
                            {"type": "linear", "out": 2}]},
        "train": {"epochs": 200, "batch_size": 256, "lr": 1e-3, "margin": 0.7},
        "eval": {"eps": [0.1]},
    },
    "moons-deep100": {
        "data": {"kind": "synthetic", "synthetic": "two_moons", "n": 2000, "noise": 0.1,
                 "normalization": "standardize", "test_fraction": 0.2},
        "arch": {"input_shape": [2], "num_classes": 2,
                 "layers": [{"type": "zero_pad", "size": 32},
                            {"type": "cpl_dense", "features": 4, "repeat": 100},
                            {"type": "truncate", "size": 2}]},
        "train": {"epochs": 20, "batch_size": 256, "lr": 1e-3, "margin": 0.7},
        "eval": {"eps": [0.1]},
    },
    "mnist-cpl-tiny": {
        "data": {"kind": "idx_images", "normalization": "unit", "test_fraction": 0.2, "num_classes": 10},
        "arch": {"input_shape": [1, 28, 28], "num_classes": 10, "channels": 8, "conv_layers": 2, "kernel": 3,
                 "pools": 1, "linear_layers": 2, "linear_features": 256, "last_layer_normalization": True},
        "train": {"epochs": 20, "batch_size": 256, "lr": 1e-3, "margin": 0.7},
        "eval": {"eps": DEFAULT_EPS},
    },
}

CONFIG_KEYS = {"preset", "seed", "data", "arch", "train", "eval", "checkpoint_every", "relaxed_h"}
EVAL_KEYS = {"eps", "attack_iterations", "lipschitz_pairs", "random_start"}


def parse_eps(text: str) -> list:
    """Comma-separated budgets; fractions such as ``36/255`` are exact."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            value = float(Fraction(part))
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"cannot parse eps value {part!r}") from None
        if value < 0:
            raise ConfigError(f"eps must be >= 0, got {part}")
        out.append(value)
    if not out:
        raise ConfigError("empty eps list")
    return out


def _deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "arch":
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path) -> dict:
    try:
        with open(path) as f:
            cfg = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a mapping")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def resolve_config(file_cfg: dict | None, overrides: dict) -> dict:
    """Preset < config file < command-line flags."""
    file_cfg = file_cfg or {}
    preset = overrides.get("preset") or file_cfg.get("preset") or "moons-cpl6"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = _deep_merge(PRESETS[preset], file_cfg)
    cfg["preset"] = preset
    for section, values in overrides.items():
        if section == "preset" or values is None:
            continue
        if isinstance(values, dict):
            cfg[section] = _deep_merge(cfg.get(section, {}), {k: v for k, v in values.items() if v is not None})
        else:
            cfg[section] = values
    cfg.setdefault("seed", 0)
    cfg.setdefault("checkpoint_every", 0)
    cfg.setdefault("relaxed_h", None)
    cfg["data"].setdefault("seed", cfg["seed"])
    cfg["eval"] = {"attack_iterations": 10, "lipschitz_pairs": 256, "random_start": False, **cfg.get("eval", {})}
    unknown = set(cfg["eval"]) - EVAL_KEYS
    if unknown:
        raise ConfigError(f"unknown eval keys: {sorted(unknown)}")
    if isinstance(cfg["eval"]["eps"], str):
        cfg["eval"]["eps"] = parse_eps(cfg["eval"]["eps"])
    try:
        TrainConfig(**{**cfg["train"], "seed": cfg["seed"]})
    except TypeError as e:
        raise ConfigError(f"invalid train section: {e}") from None
    return cfg


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in header])
    _atomic_text(path, buf.getvalue())


def _atomic_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, obj):
    _atomic_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


METRIC_COLUMNS = ["epoch", "loss", "accuracy", "lr", "max_sigma", "val_accuracy", "val_margin"]


def validation_stats(net, test_set):
    logits = predict(net, test_set[0])
    m = np.maximum(margins(logits, test_set[1]), 0.0)
    return float(np.mean(np.argmax(logits, axis=1) == test_set[1])), float(np.mean(m))


def build_report(net, test_set, eps_list, attack_iterations=10, lipschitz_pairs=0, random_start=False,
                 seed=0, attack=True):
    """Report JSON: clean accuracy, certified and attacked accuracy per eps, Lipschitz lower bound."""
    report = {"clean_accuracy": None, "certified": [], "attack": [], "lipschitz_lower_bound": None,
              "lipschitz_upper_bound": None}
    x, y = test_set
    if net.relaxed:
        logits = predict(net, x)
        report["clean_accuracy"] = float(np.mean(np.argmax(logits, axis=1) == y))
    else:
        rep = certify(net, x, y, eps_list)
        summary = rep.summary()
        report["clean_accuracy"] = summary["clean_accuracy"]
        report["certified"] = summary["certified"]
        report["lipschitz_upper_bound"] = summary["lipschitz_bound"]
    if attack:
        report["attack"] = attack_accuracy(net, x, y, eps_list, attack_iterations,
                                           random_start=random_start, seed=seed)
    if lipschitz_pairs:
        report["lipschitz_lower_bound"] = empirical_lipschitz(net, x, pairs=lipschitz_pairs, seed=seed)
    return report


def run_training(cfg: dict, out, datasets=None):
    """Train according to a resolved config, writing metrics, checkpoints and a report under ``out``.

    Returns (net, history, report).
    """
    out = Path(out)
    ck_dir = out / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    if datasets is None:
        train_set, test_set, norm = load_dataset(cfg["data"])
    else:
        train_set, test_set, norm = datasets
    seed = int(cfg["seed"])
    tcfg = TrainConfig(**{**cfg["train"], "seed": seed})
    net = build_network(cfg["arch"], seed=seed)
    if cfg.get("relaxed_h") is not None:
        relaxed_mode(net, cfg["relaxed_h"])
    state = OptimizerState.for_network(net)
    extra = {"data": cfg["data"], "normalizer": norm.to_dict() if norm is not None else None}
    echo = {k: v for k, v in cfg.items() if k not in ("arch",)}

    rows, timing = [], []
    best = {"margin": -np.inf}
    metrics_path = out / "metrics.csv"
    _write_csv(metrics_path, METRIC_COLUMNS, rows)

    def on_epoch(m):
        val_acc, val_margin = validation_stats(net, test_set)
        net.unfreeze()
        row = {k: m[k] for k in METRIC_COLUMNS[:5]}
        row.update(val_accuracy=val_acc, val_margin=val_margin)
        rows.append(row)
        timing.append({"epoch": m["epoch"], "wall_time": m["wall_time"]})
        _write_csv(metrics_path, METRIC_COLUMNS, rows)
        every = int(cfg.get("checkpoint_every") or 0)
        if every and m["epoch"] % every == 0:
            save_checkpoint(net, state, ck_dir / f"epoch-{m['epoch']:04d}", echo, extra)
        if val_margin > best["margin"]:
            best["margin"] = val_margin
            save_checkpoint(net, state, ck_dir / "best", echo, extra)

    history, state = train(net, train_set, tcfg, state, on_epoch=on_epoch)
    save_checkpoint(net, state, ck_dir / "last", echo, extra)
    _write_csv(out / "timing.csv", ["epoch", "wall_time"], timing)
    ev = cfg["eval"]
    report = build_report(net, test_set, ev["eps"], ev["attack_iterations"], 0, ev["random_start"], seed,
                          attack=False)
    _write_json(out / "report.json", report)
    return net, history, report


# -- command handlers -------------------------------------------------------

def _overrides(args) -> dict:
    o = {"preset": getattr(args, "preset", None)}
    if getattr(args, "seed", None) is not None:
        o["seed"] = args.seed
    train_flags = {"epochs": getattr(args, "epochs", None), "lr": getattr(args, "lr", None),
                   "batch_size": getattr(args, "batch_size", None), "margin": getattr(args, "margin", None)}
    o["train"] = train_flags
    data = {}
    if getattr(args, "images", None):
        data.update(kind="idx_images", path=args.images, labels_path=args.labels)
    if getattr(args, "csv", None):
        data.update(kind="csv_vectors", path=args.csv)
    if getattr(args, "limit", None):
        data["limit"] = args.limit
    o["data"] = data
    if getattr(args, "eps", None):
        o["eval"] = {"eps": parse_eps(args.eps)}
    if getattr(args, "checkpoint_every", None) is not None:
        o["checkpoint_every"] = args.checkpoint_every
    if getattr(args, "relaxed_h", None) is not None:
        o["relaxed_h"] = args.relaxed_h
    return o


def cmd_train(args):
    file_cfg = load_config(args.config) if args.config else None
    cfg = resolve_config(file_cfg, _overrides(args))
    _, history, report = run_training(cfg, args.out)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _checkpoint_and_data(args):
    net, _, manifest = load_checkpoint(args.checkpoint)
    data = manifest.get("extra", {}).get("data")
    if args.config:
        data = _deep_merge(data or {}, load_config(args.config).get("data", {}))
    o = _overrides(args)["data"]
    if o:
        data = _deep_merge(data or {}, o)
    if not data:
        raise ConfigError("checkpoint carries no dataset description; pass --config")
    _, test_set, _ = load_dataset(data)
    return net, test_set, manifest


def _eval_eps(args, manifest):
    if getattr(args, "eps", None):
        return parse_eps(args.eps)
    return manifest.get("config", {}).get("eval", {}).get("eps", DEFAULT_EPS)


def _emit(args, report):
    if args.out:
        _write_json(Path(args.out) / "report.json", report)
    print(json.dumps(report, indent=2, sort_keys=True))


def cmd_eval(args):
    net, test_set, manifest = _checkpoint_and_data(args)
    report = build_report(net, test_set, _eval_eps(args, manifest), args.iterations, args.pairs,
                          args.random_start, args.seed or 0)
    _emit(args, report)
    return 0


def cmd_certify(args):
    net, (x, y), manifest = _checkpoint_and_data(args)
    rep = certify(net, x, y, _eval_eps(args, manifest))
    summary = rep.summary()
    report = {"clean_accuracy": summary["clean_accuracy"], "certified": summary["certified"], "attack": [],
              "lipschitz_lower_bound": None, "lipschitz_upper_bound": summary["lipschitz_bound"]}
    if args.out:
        rows = list(rep.rows())
        _write_csv(Path(args.out) / "certify.csv", ["index", "predicted", "label", "margin", "radius"], rows)
    _emit(args, report)
    return 0


def cmd_attack(args):
    net, (x, y), manifest = _checkpoint_and_data(args)
    pred = np.argmax(predict(net, x), axis=1)
    report = {"clean_accuracy": float(np.mean(pred == y)), "certified": [],
              "attack": attack_accuracy(net, x, y, _eval_eps(args, manifest), args.iterations,
                                        random_start=args.random_start, seed=args.seed or 0),
              "lipschitz_lower_bound": None}
    _emit(args, report)
    return 0


def cmd_lipschitz(args):
    net, (x, _), _ = _checkpoint_and_data(args)
    est = empirical_lipschitz(net, x, pairs=args.pairs, seed=args.seed or 0)
    report = {"clean_accuracy": None, "certified": [], "attack": [], "lipschitz_lower_bound": est,
              "lipschitz_upper_bound": None if net.relaxed else net.lipschitz_bound()}
    _emit(args, report)
    return 0


def _flow_potential(args, rng):
    d = args.dim
    if args.spec == "zero":
        return flows.ZeroPotential()
    if args.spec == "quadratic":
        return flows.Quadratic(args.mu)
    if args.spec == "quadratic_form":
        b = rng.standard_normal((d, d))
        s = b @ b.T
        return flows.QuadraticForm(args.mu * s / np.linalg.eigvalsh(s)[-1])
    if args.spec == "icnn":
        return flows.ICNNPotential(rng.standard_normal((2 * d, d)) / np.sqrt(d), rng.standard_normal(2 * d))
    if args.spec == "hinge":
        return flows.HingePotential(rng.standard_normal(d), 0.0, args.mu)
    raise ConfigError(f"unknown flow spec {args.spec!r}")


def _vector(text, dim, rng):
    if text is None:
        return rng.standard_normal(dim)
    v = np.array([float(Fraction(s)) for s in text.split(",")])
    if v.shape != (dim,):
        raise ConfigError(f"expected {dim} comma-separated values, got {len(v)}")
    return v


def cmd_flow_sim(args):
    rng = np.random.default_rng(args.seed or 0)
    potential = _flow_potential(args, rng)
    skew = None
    if args.skew:
        a = rng.standard_normal((args.dim, args.dim))
        skew = args.skew * (a - a.T) / 2
    spec = flows.FlowSpec.single(potential, args.dim, skew, horizon=args.T)
    x0 = _vector(args.x0, args.dim, rng)
    z0 = _vector(args.z0, args.dim, rng)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if args.scheme == "continuous":
        if potential.curvature is None:
            raise ConfigError("continuous simulation needs a smooth potential; use a discrete scheme")
        rep = flows.contraction_envelope_check(spec, x0, z0, args.step)
        w.writerow(["t", "d_t", "lower", "upper"])
        for row in zip(rep.times, rep.distances, rep.lower, rep.upper):
            w.writerow([repr(float(v)) for v in row])
    else:
        rows = flows.scheme_compare(spec, x0, z0, [args.scheme], args.step)
        cols = ["scheme", "step_index", "t", "distance", "ratio", "sq_growth", "norm_x"]
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    if args.out:
        _atomic_text(Path(args.out) / "flow.csv", buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_inspect(args):
    if args.idx:
        arr = read_idx(args.idx)
        info = {"shape": list(arr.shape), "dtype": str(arr.dtype), "min": arr.min().item(),
                "max": arr.max().item()}
    else:
        if not args.checkpoint:
            raise UsageError("inspect needs --checkpoint or --idx")
        manifest = read_manifest(args.checkpoint)
        net, _, _ = load_checkpoint(args.checkpoint)
        net.freeze()
        info = {"format_version": manifest["format_version"], "seed": manifest["seed"], "step": manifest["step"],
                "param_count": manifest["param_count"], "relaxed": net.relaxed,
                "lipschitz_upper_bound": None if net.relaxed else net.lipschitz_bound(),
                "layers": [{"index": i, **layer.spec(),
                            **({"sigma_train": layer.spectral.sigma, "sigma": layer.frozen_sigma}
                               if hasattr(layer, "spectral") else {})}
                           for i, layer in enumerate(net.layers)]}
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser():
    p = _Parser(prog="certilip", description=__doc__)
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, help="checkpoint directory")
            sp.add_argument("--images")
            sp.add_argument("--labels")
            sp.add_argument("--csv")
            sp.add_argument("--limit", type=int)

    t = sub.add_parser("train", help="train a network")
    common(t)
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--margin", type=float)
    t.add_argument("--eps", help="comma-separated budgets, fractions allowed (36/255)")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--relaxed-h", type=float, help="fix every CPL step (uncertifiable)")
    t.add_argument("--images", help="IDX image file")
    t.add_argument("--labels", help="IDX label file")
    t.add_argument("--csv", help="CSV file with a 'label' column")
    t.add_argument("--limit", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="full report: clean, certified, attacked, Lipschitz estimate")
    common(e, checkpoint=True)
    e.add_argument("--eps")
    e.add_argument("--iterations", type=int, default=10)
    e.add_argument("--pairs", type=int, default=256)
    e.add_argument("--random-start", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("certify", help="certified accuracy per eps")
    common(c, checkpoint=True)
    c.add_argument("--eps")
    c.set_defaults(func=cmd_certify)

    a = sub.add_parser("attack", help="PGD l2 robust accuracy per eps")
    common(a, checkpoint=True)
    a.add_argument("--eps")
    a.add_argument("--iterations", type=int, default=10)
    a.add_argument("--random-start", action="store_true")
    a.set_defaults(func=cmd_attack)

    lp = sub.add_parser("lipschitz", help="empirical Lipschitz lower bound")
    common(lp, checkpoint=True)
    lp.add_argument("--pairs", type=int, default=256)
    lp.set_defaults(func=cmd_lipschitz)

    f = sub.add_parser("flow-sim", help="simulate a convex potential flow")
    common(f)
    f.add_argument("--spec", default="quadratic", choices=["zero", "quadratic", "quadratic_form", "icnn", "hinge"])
    f.add_argument("--mu", type=float, default=1.0)
    f.add_argument("--T", type=float, default=1.0)
    f.add_argument("--step", type=float, default=0.01)
    f.add_argument("--dim", type=int, default=2)
    f.add_argument("--skew", type=float, default=0.0, help="scale of a random skew term")
    f.add_argument("--scheme", default="continuous", choices=("continuous",) + flows.SCHEMES)
    f.add_argument("--x0")
    f.add_argument("--z0")
    f.set_defaults(func=cmd_flow_sim)

    i = sub.add_parser("inspect", help="describe a checkpoint or IDX file")
    i.add_argument("--checkpoint")
    i.add_argument("--idx")
    i.set_defaults(func=cmd_inspect)
    return p


def _thread_limit():
    raw = os.environ.get("CERTILIP_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CERTILIP_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("CERTILIP_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        n = _thread_limit()
        if n is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=n):
            return args.func(args)
    except CertilipError as e:
        print(f"error[{e.code}]: {e}", file=sys.stderr)
        return e.exit_status


if __name__ == "__main__":
    sys.exit(main())
