"""Command-line entry point: ``nsad <subcommand> [options]``.

Every subcommand reads its keys from (lowest priority first) built-in
defaults, an INI config file (``--config``; keys go in a section named after
the subcommand or in ``[DEFAULT]``) and ``--set key=value`` / dedicated flags.
Artifacts are written under ``--out``: CSV for numbers, JSON for metadata, and
``manifest.json`` last.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, IdxFormatError, batches, load_mnist, stratified_subset
from .montecarlo import SWEEP_DIMENSIONS, VolumeConfig, estimate_volume, sweep_configs
from .network import build
from .nonsmooth import PoolMode
from .precision import Precision
from .programs import TABLE_T, VARIANTS, zero_table
from .autodiff import NonsmoothPolicy
from .training import TrainConfig, beta_sweep, hybrid_policy, train, weight_divergence
from .variation import (TAU1_BLOCK, Program, dump_json, find_modes, histogram_summary, measure_pairs,
                        tau1_from, tau1_pair, tau2_from, tau2_pair)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# -- keys ----------------------------------------------------------------------

def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]


def _ints(text) -> list[int]:
    return [int(v) for v in _floats(text)]


def _strs(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _bools(text) -> list[bool]:
    return [_bool(v) for v in _strs(text)]


def _tau(text) -> str:
    t = str(text).strip().lower()
    if t in ("tau1", "tau2"):
        return t
    float(t)  # "inf" is accepted
    return t


DATA_KEYS = {
    "subset": (2048, int),  # stratified training subset size, 0 = everything
    "data_dir": ("", str),
}

VARIATION_KEYS = {
    "network": ("lenet5", str),
    "batch_size": (128, int),
    "draws": (100, int),
    **DATA_KEYS,
}

TRAIN_KEYS = {
    "network": ("lenet5", str),
    "optimizer": ("sgd", str),
    "gamma": (0.01, float),
    "alpha_q": (1.0, float),
    "batch_size": (128, int),
    "epochs": (20, int),
    "relu_s": (0.0, float),
    "beta": (0.0, float),
    "strict_b16": (False, _bool),
    "test_subset": (0, int),  # 0 = the whole test split
    **DATA_KEYS,
}

KEYS: dict[str, dict] = {
    "zero-table": {
        "variant": ("both", str),
        "x": ("1,2,3,4", _floats),
        "t": (",".join(f"{t:g}" for t in TABLE_T), _floats),
        "pool_mode": ("minimal", str),
    },
    "variation-hist": {
        **VARIATION_KEYS,
        "pool_p": ("native", str),
        "pool_q": ("minimal", str),
        "relu_s_p": (0.0, float),
        "relu_s_q": (0.0, float),
        "bin_width": (0.5, float),
        "split_factor": (10.0, float),  # compensation split = split_factor * eps * gradient L1 scale
    },
    "thresholds": {
        **VARIATION_KEYS,
        "pool_mode": ("native", str),
        "order": ("shuffled", str),  # "shuffled" or "sequential" (no emulated nondeterminism)
        "tau1_block": (TAU1_BLOCK, int),  # 0 shuffles every term
        "repeats": (1, int),
    },
    "zone-volume": {
        **VARIATION_KEYS,
        "pool_p": ("native", str),
        "pool_q": ("minimal", str),
        "tau": ("tau1", _tau),
        "tau1_block": (TAU1_BLOCK, int),
        "alpha": (0.05, float),
        "sweep": ("none", str),
        "sweep_values": ("", _strs),
    },
    "train": dict(TRAIN_KEYS),
    "weight-divergence": {**TRAIN_KEYS, "betas": ("0,1,10,10000", _floats)},
    "beta-sweep": {
        **TRAIN_KEYS,
        "betas": ("0,1,10,100", _floats),
        "precisions": ("", _strs),  # empty = the global --precision
        "batchnorm": ("off", _bools),
        "seeds": ("", _ints),  # empty = the global --seed
    },
}

GLOBAL_KEYS = {"precision": ("32", str), "seed": (0, int), "threads": (1, int)}


@dataclass
class RunConfig:
    command: str
    values: dict
    out: Path
    sources: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def precision(self) -> Precision:
        return Precision.parse(self.values["precision"])

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def to_json(self) -> dict:
        return {"command": self.command, **{k: _jsonable(v) for k, v in sorted(self.values.items())}}


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, Path):
        return str(v)
    return v


def _valid_keys(command: str) -> list[str]:
    return sorted({**GLOBAL_KEYS, **KEYS[command]})


def resolve_config(command: str, config_path=None, overrides: dict | None = None, out=None) -> RunConfig:
    """Merge defaults, the config file and explicit overrides; validate every key."""
    table = {**GLOBAL_KEYS, **KEYS[command]}
    raw = {k: d for k, (d, _) in table.items()}
    sources = {k: "default" for k in table}
    if config_path is not None:
        cp = configparser.ConfigParser()
        try:
            with open(config_path) as f:
                cp.read_file(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {config_path}: {e}") from None
        known = set(KEYS) | {"global"}
        for section in cp.sections():
            if section not in known:
                raise ConfigError(f"unknown section [{section}] in {config_path}; "
                                  f"valid sections: {', '.join(sorted(known))}")
            if section in KEYS:
                for k in cp[section]:
                    if k not in GLOBAL_KEYS and k not in KEYS[section] and k not in cp.defaults():
                        raise ConfigError(f"invalid config key {k!r} in [{section}]; "
                                          f"valid keys: {', '.join(_valid_keys(section))}")
        file_items = dict(cp.defaults())
        for section in ("global", command):
            if cp.has_section(section):
                file_items.update({k: v for k, v in cp.items(section, raw=True)})
        for k, v in file_items.items():
            if k not in table:
                if k in _all_keys():
                    continue  # belongs to another subcommand
                raise ConfigError(f"invalid config key {k!r} for {command}; valid keys: {', '.join(_valid_keys(command))}")
            raw[k] = v
            sources[k] = str(config_path)
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in table:
            raise ConfigError(f"invalid config key {k!r} for {command}; valid keys: {', '.join(_valid_keys(command))}")
        raw[k] = v
        sources[k] = "command line"
    values = {}
    for k, v in raw.items():
        conv = table[k][1]
        try:
            values[k] = conv(v)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {k!r}: {v!r} ({e})") from None
    try:
        Precision.parse(values["precision"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    values["precision"] = str(Precision.parse(values["precision"]))
    return RunConfig(command, values, Path(out or f"runs/{command}"), sources)


def _all_keys() -> set[str]:
    out = set(GLOBAL_KEYS)
    for t in KEYS.values():
        out |= set(t)
    return out


# -- artifacts -------------------------------------------------------------------

class Artifacts:
    """Collects the files a run writes and finishes with a manifest."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.files: list[str] = []
        self.start = time.time()
        cfg.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.cfg.out / name

    def json(self, name: str, obj: dict):
        dump_json(self.path(name), {"config": self.cfg.to_json(), **obj})

    def csv(self, name: str, header, rows):
        p = self.path(name)
        with open(p, "w") as f:
            f.write("# config: " + json.dumps(self.cfg.to_json(), sort_keys=True) + "\n")
            f.write(",".join(header) + "\n")
            for row in rows:
                f.write(",".join(_cell(v) for v in row) + "\n")

    def manifest(self, exit_code: int, extra: dict | None = None):
        dump_json(self.cfg.out / "manifest.json", {
            "command": self.cfg.command,
            "config": self.cfg.to_json(),
            "sources": self.cfg.sources,
            "seed": self.cfg.seed,
            "artifacts": self.files,
            "exit_code": exit_code,
            "wall_time_s": round(time.time() - self.start, 3),
            "version": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            **(extra or {}),
        })


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- data ----------------------------------------------------------------------

def _train_data(cfg: RunConfig):
    ds = load_mnist("train", cfg["data_dir"] or None, cfg.precision)
    if cfg["subset"] and cfg["subset"] < len(ds):
        ds = stratified_subset(ds, cfg["subset"], cfg.seed)
    return ds


def _test_data(cfg: RunConfig):
    ds = load_mnist("test", cfg["data_dir"] or None, cfg.precision)
    n = cfg.values.get("test_subset", 0)
    if n and n < len(ds):
        ds = stratified_subset(ds, n, cfg.seed)
    return ds


def _batches(cfg: RunConfig):
    ds = _train_data(cfg)
    bt = batches(ds, cfg["batch_size"])
    if not bt:
        raise ConfigError(f"batch_size {cfg['batch_size']} exceeds the {len(ds)} available samples")
    return bt


def _spec(cfg: RunConfig, network=None, precision=None):
    try:
        return build(network or cfg["network"], precision=precision or cfg.precision, seed=cfg.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _pool(text: str) -> PoolMode:
    try:
        return PoolMode.parse(text)
    except ValueError as e:
        raise ConfigError(str(e)) from None


# -- subcommands ---------------------------------------------------------------------

RECORD_COLUMNS = ["m", "q", "d", "scale", "nan", "policyP", "policyQ", "precision", "seed"]


def _record_rows(result):
    for r in result.records:
        yield [r.m, r.q, r.d, r.scale, r.nan, result.policy_p, result.policy_q, result.precision, r.seed]


def cmd_zero_table(cfg: RunConfig, art: Artifacts) -> int:
    variants = VARIANTS if cfg["variant"] == "both" else (cfg["variant"],)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected both or one of {VARIANTS}")
    mode = _pool(cfg["pool_mode"])
    ts, x = cfg["t"], cfg["x"]
    rows, table = [], {}
    for v in variants:
        vals = zero_table(x, ts, v, cfg.precision, pool_mode=mode)
        table[v] = vals
        rows += [[v, t, d] for t, d in zip(ts, vals)]
    art.csv("zero_table.csv", ["variant", "t", "derivative"], rows)
    art.json("zero_table.json", {"x": x, "t": ts, "table": table})
    width = max(len(f"{t:g}") for t in ts)
    print(f"zero'(t) at {cfg.precision}, x = {tuple(x)}")
    for v in variants:
        print(f"  {v}:")
        for t, d in zip(ts, table[v]):
            print(f"    t = {t:>{width}g}   {d!r}")
    return EXIT_OK


def cmd_variation_hist(cfg: RunConfig, art: Artifacts) -> int:
    spec = _spec(cfg)
    bt = _batches(cfg)
    p = Program(NonsmoothPolicy(cfg["relu_s_p"], _pool(cfg["pool_p"])))
    q = Program(NonsmoothPolicy(cfg["relu_s_q"], _pool(cfg["pool_q"])))
    res = measure_pairs(spec, cfg["draws"], bt, {"pq": (p, q)}, cfg.seed)["pq"]
    art.csv("records.csv", RECORD_COLUMNS, _record_rows(res))
    split = cfg["split_factor"] * spec.precision.eps * res.scales()
    modes = find_modes(res.values(), split, cfg["bin_width"])
    summary = histogram_summary(res, cfg["bin_width"])
    summary["modes"] = asdict(modes) | {"bimodal": modes.bimodal, "separation_decades": modes.separation}
    art.json("histogram.json", summary)
    v = res.values()
    print(f"{len(res.records)} records ({res.nan_count} NaN), {int(np.sum(v == 0))} zero, "
          f"max d = {v.max() if v.size else float('nan'):.3g}; bimodal: {modes.bimodal}")
    return EXIT_OK


def cmd_thresholds(cfg: RunConfig, art: Artifacts) -> int:
    spec = _spec(cfg)
    bt = _batches(cfg)
    mode = _pool(cfg["pool_mode"])
    if cfg["order"] not in ("shuffled", "sequential"):
        raise ConfigError(f"order must be shuffled or sequential, got {cfg['order']!r}")
    seed = None if cfg["order"] == "sequential" else cfg.seed + 1
    pairs = {"tau1": tau1_pair(mode, seed, block=cfg["tau1_block"] or None), "tau2": tau2_pair(mode)}
    res = measure_pairs(spec, cfg["draws"], bt, pairs, cfg.seed, cfg["repeats"])
    t1 = tau1_from(res["tau1"])
    t2, pos = tau2_from(res["tau2"])
    for k in pairs:
        art.csv(f"{k}_records.csv", RECORD_COLUMNS, _record_rows(res[k]))
    out = {
        "network": spec.name, "precision": str(spec.precision), "M": cfg["draws"], "R": len(bt),
        "batch_size": cfg["batch_size"],
        "tau1": t1,
        "tau2": t2 if pos else 0.0,
        "tau2_positive": pos,
        "tau2_note": "" if pos else "no positive variation observed",
    }
    art.json("thresholds.json", out)
    print(f"tau1 = {t1:.6g}")
    print(f"tau2 = {t2:.6g}" if pos else "tau2: no positive variation observed (reported as 0)")
    return EXIT_OK


def cmd_zone_volume(cfg: RunConfig, art: Artifacts) -> int:
    base = VolumeConfig(network=cfg["network"], precision=cfg["precision"], batch_size=cfg["batch_size"],
                        subset=cfg["subset"], draws=cfg["draws"], seed=cfg.seed, alpha=cfg["alpha"],
                        pool_p=cfg["pool_p"], pool_q=cfg["pool_q"], tau=cfg["tau"], tau1_block=cfg["tau1_block"])
    if cfg["sweep"] == "none":
        configs = [base]
    else:
        if not cfg["sweep_values"]:
            raise ConfigError("sweep needs sweep_values")
        try:
            configs = sweep_configs(base, cfg["sweep"], cfg["sweep_values"])
        except ValueError as e:
            raise ConfigError(f"{e}; sweep must be none or one of {SWEEP_DIMENSIONS}") from None
    data = _train_data(cfg)
    rows, estimates = [], []
    for i, c in enumerate(configs):
        _spec(cfg, c.network, c.precision)
        d = data if c.precision == cfg["precision"] else data.astype(c.precision)
        run = estimate_volume(c, d)
        e = run.estimate
        estimates.append(e.to_json())
        rows.append([c.network, c.precision, c.batch_size, e.M, e.R, run.tau, e.prop_theta_in_S,
                     e.prop_batches_impacted, e.hoeffding_margin, e.mcdiarmid_margin])
        tag = "" if len(configs) == 1 else f"_{i}"
        art.csv(f"records{tag}.csv", RECORD_COLUMNS, _record_rows(run.pq))
        print(f"{c.network} {c.precision} bs={c.batch_size}: tau = {run.tau:.3g}, "
              f"in S {100 * e.prop_theta_in_S:.2f}% +- {100 * e.hoeffding_margin:.2f}, "
              f"batches impacted {100 * e.prop_batches_impacted:.2f}% +- {100 * e.mcdiarmid_margin:.2f}")
    art.csv("volume.csv", ["network", "precision", "batch_size", "M", "R", "tau", "prop_theta_in_S",
                           "prop_batches_impacted", "hoeffding_margin", "mcdiarmid_margin"], rows)
    art.json("volume.json", {"estimates": estimates})
    return EXIT_OK


def _train_config(cfg: RunConfig, beta=None, precision=None, seed=None) -> TrainConfig:
    try:
        return TrainConfig(optimizer=cfg["optimizer"], gamma=cfg["gamma"], alpha_q=cfg["alpha_q"],
                           batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                           precision=str(precision or cfg.precision),
                           policy=hybrid_policy(cfg["beta"] if beta is None else beta, cfg["relu_s"]),
                           seed=cfg.seed if seed is None else seed, strict_b16=cfg["strict_b16"])
    except ValueError as e:
        raise ConfigError(str(e)) from None


TRACE_COLUMNS = ["epoch", "train_loss", "test_accuracy", "grad_l1", "param_l1"]


def _trace_rows(trace):
    return [[r[k] for k in TRACE_COLUMNS] for r in trace.rows()]


def cmd_train(cfg: RunConfig, art: Artifacts) -> int:
    spec = _spec(cfg)
    tc = _train_config(cfg)
    trace, _ = train(spec, tc, _train_data(cfg), _test_data(cfg))
    art.csv("trace.csv", TRACE_COLUMNS, _trace_rows(trace))
    art.json("train.json", {"train_config": tc.to_json(), "diverged": trace.diverged, "halted": trace.halted,
                            "final_accuracy": trace.final_accuracy, "steps": trace.steps})
    for e in trace.epochs:
        print(f"epoch {e.epoch:3d}  loss {e.train_loss:.4f}  test acc {100 * e.test_accuracy:.2f}%")
    if trace.diverged:
        print("training diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_weight_divergence(cfg: RunConfig, art: Artifacts) -> int:
    spec = _spec(cfg)
    res = weight_divergence(spec, _train_config(cfg), cfg["betas"], _train_data(cfg), _test_data(cfg))
    pairs = list(res.distances)
    n = max(len(v) for v in res.distances.values())
    rows = [[k] + [res.distances[p][k] if k < len(res.distances[p]) else "" for p in pairs] for k in range(n)]
    art.csv("distances.csv", ["epoch"] + pairs, rows)
    for name, tr in res.traces.items():
        art.csv(f"trace_beta_{name.replace(' ', '_').replace('(', '').replace(')', '')}.csv",
                TRACE_COLUMNS, _trace_rows(tr))
    summary = {name: {"final_accuracy": tr.final_accuracy, "diverged": tr.diverged}
               for name, tr in res.traces.items()}
    art.json("weight_divergence.json", {"runs": summary, "final_distances": {p: res.distances[p][-1] for p in pairs}})
    for p in pairs:
        print(f"{p}: final L1 distance {res.distances[p][-1]:.4g}")
    return EXIT_DIVERGED if any(tr.diverged for tr in res.traces.values()) else EXIT_OK


def cmd_beta_sweep(cfg: RunConfig, art: Artifacts) -> int:
    precisions = [Precision.parse(p) for p in cfg["precisions"]] or [cfg.precision]
    seeds = cfg["seeds"] or [cfg.seed]
    stem = cfg["network"].removesuffix("-bn")

    def build_spec(bn, prec):
        return _spec(cfg, stem + ("-bn" if bn else ""), prec)

    train_set, test_set = _train_data(cfg), _test_data(cfg)
    cells = beta_sweep(build_spec, _train_config(cfg), precisions, cfg["betas"], cfg["batchnorm"], seeds,
                       train_set, test_set)
    rows = [[c.precision, c.beta, c.batchnorm, c.optimizer, c.seed, c.final_accuracy, c.diverged] for c in cells]
    art.csv("sweep.csv", ["precision", "beta", "batchnorm", "optimizer", "seed", "final_accuracy", "diverged"], rows)
    art.json("sweep.json", {"cells": [{k: v for k, v in asdict(c).items() if k != "trace"} for c in cells]})
    for c in cells:
        flag = "  DIVERGED" if c.diverged else ""
        print(f"{c.precision} beta={c.beta:g} bn={int(c.batchnorm)} seed={c.seed}: "
              f"acc {100 * c.final_accuracy:.2f}%{flag}")
    return EXIT_DIVERGED if any(c.diverged for c in cells) else EXIT_OK


HELP = {
    "zero-table": "derivative of the zero program (max variants) at a list of t values",
    "variation-hist": "variation records between two nonsmooth policies and their log histogram",
    "thresholds": "tau1 (shuffled-order ceiling) and tau2 (ReLU-pair floor) estimates",
    "zone-volume": "share of parameter draws and batches above a threshold, with confidence margins",
    "train": "train one network with a hybrid pooling rule",
    "weight-divergence": "L1 distance between weights trained under different hybrid betas",
    "beta-sweep": "final accuracy over a grid of precisions, betas, batch norm and seeds",
}

COMMANDS = {
    "zero-table": cmd_zero_table,
    "variation-hist": cmd_variation_hist,
    "thresholds": cmd_thresholds,
    "zone-volume": cmd_zone_volume,
    "train": cmd_train,
    "weight-divergence": cmd_weight_divergence,
    "beta-sweep": cmd_beta_sweep,
}


# -- argument parsing -------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--precision", choices=["16", "32", "64", "B16", "B32", "B64"])
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default runs/<subcommand>)")
    common.add_argument("--config", help="INI file; keys in [DEFAULT], [global] or [<subcommand>]")
    common.add_argument("--threads", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    p = argparse.ArgumentParser(prog="nsad", description="Nonsmooth AD audit experiments.",
                                epilog="exit codes: 0 ok, 2 config error, 3 data error, 4 divergence")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
        for key, (default, _) in KEYS[name].items():
            sp.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                            help=f"default: {default}")
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    overrides = {k: getattr(args, k) for k in KEYS[args.command]}
    overrides.update(precision=args.precision, seed=args.seed, threads=args.threads)
    try:
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip().replace("-", "_")] = v.strip()
        cfg = resolve_config(args.command, args.config, overrides, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg["threads"] > 1:
        import numba
        numba.set_num_threads(min(cfg["threads"], numba.config.NUMBA_NUM_THREADS))
    art = Artifacts(cfg)
    try:
        code = COMMANDS[args.command](cfg, art)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        code = EXIT_CONFIG
    except (DataError, IdxFormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        code = EXIT_DATA
    art.manifest(code)
    return code


if __name__ == "__main__":
    sys.exit(main())
