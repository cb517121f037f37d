"""Experiment configuration: ``key = value`` lines with dotted sections.

Resolution order is built-in defaults, then the ``--config`` file, then
each ``--set key=value`` in order, then ``--seed``. Unknown keys and
out-of-domain values raise :class:`~fedgru.errors.ConfigError` naming the
key. :func:`dump` writes every key in canonical form; feeding that
snapshot back in reproduces the run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError


def _int(v: str) -> int:
    return int(v.strip())


def _float(v: str) -> float:
    v = v.strip()
    if "/" in v:
        num, den = v.split("/", 1)
        x = float(num) / float(den)
    else:
        x = float(v)
    if not math.isfinite(x):
        raise ValueError(f"{v!r} is not finite")
    return x


def _int_list(v: str) -> tuple[int, ...]:
    items = tuple(int(x) for x in v.replace(" ", "").split(",") if x)
    if not items:
        raise ValueError("empty list")
    return items


def _float_list(v: str) -> tuple[float, ...]:
    items = tuple(_float(x) for x in v.replace(" ", "").split(",") if x)
    if not items:
        raise ValueError("empty list")
    return items


def _opt_float(v: str) -> float | None:
    return None if v.strip().lower() in ("none", "off", "") else _float(v)


def _str(v: str) -> str:
    return v.strip()


def _choice(*options):
    def parse(v: str) -> str:
        v = v.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v

    return parse


def _fmt(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class Option:
    key: str
    default: Any
    parse: Callable[[str], Any]
    check: Callable[[Any], bool]
    help: str


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _all(pred):
    return lambda xs: all(pred(x) for x in xs)


OPTIONS = [
    Option("seed", 0, _int, _nonneg, "master seed for data synthesis, initialization, shuffling and protocol draws"),
    Option("data.source", "synthetic", _choice("synthetic", "csv"), bool, "synthetic | csv"),
    Option("data.csv_path", "", _str, lambda x: True, "input CSV (timestamp,station_id,flow[,lat,lon]) when data.source=csv"),
    Option("data.gap_policy", "reject", _choice("reject", "interpolate"), bool, "missing intervals: reject | interpolate"),
    Option("data.train_fraction", 2 / 3, _float, lambda x: 0 < x < 1, "temporal prefix of each station used for training, in (0,1); fractions like 2/3 accepted"),
    Option("data.mape_floor", 1.0, _float, _nonneg, "targets with |y| <= floor are left out of MAPE"),
    Option("synth.n_stations", 20, _int, lambda x: x >= 1, "synthetic stations"),
    Option("synth.n_days", 90, _int, lambda x: x >= 1, "synthetic days"),
    Option("synth.noise_std", 5.0, _float, _nonneg, "std of additive Gaussian noise (vehicles per interval)"),
    Option("synth.groups", 4, _int, lambda x: 1 <= x <= 4, "profile groups (1-4); stations in a group share a daily curve and a location"),
    Option("synth.interval_minutes", 5, _int, lambda x: x >= 1 and 1440 % x == 0, "sampling interval in minutes"),
    Option("window.r", 12, _int, lambda x: x >= 1, "history window length"),
    Option("window.s", 1, _int, lambda x: x >= 1, "prediction horizon (1 = next interval)"),
    Option("model.hidden_sizes", (50, 50), _int_list, lambda xs: 1 <= len(xs) <= 3 and min(xs) >= 1, "hidden units per GRU layer (1-3 layers), comma-separated"),
    Option("model.lambda", 0.0, _float, _nonneg, "L2 weight on weights (biases excluded)"),
    Option("model.clip_norm", 5.0, _opt_float, lambda x: x is None or x > 0, "global gradient-norm clip, or none"),
    Option("model.init_checkpoint", "", _str, lambda x: True, "optional checkpoint to warm-start from instead of random init"),
    Option("train.epochs", 1, _int, lambda x: x >= 1, "local epochs E per round (centralized: epochs per block)"),
    Option("train.batch_size", 128, _int, lambda x: x >= 1, "mini-batch size B"),
    Option("train.alpha", 0.001, _float, _pos, "SGD learning rate"),
    Option("train.rounds", 100, _int, _nonneg, "rounds T (centralized trains E*T epochs); 0 evaluates the initial model"),
    Option("train.eval_every", 1, _int, _nonneg, "evaluate on the test split every N rounds (0 = never during training)"),
    Option("fed.n_orgs", (20,), _int_list, _all(lambda x: x >= 1), "organizations C; a comma list runs a sweep"),
    Option("fed.beta", (1.0,), _float_list, _all(lambda x: 0 < x <= 1), "participation ratio in (0,1]; a comma list runs a sweep"),
    Option("fed.failure_prob", 0.0, _float, lambda x: 0 <= x < 1, "per-round refusal and mid-round drop probability"),
    Option("fed.aggregation", "uniform", _choice("uniform", "weighted"), bool, "uniform | weighted (by sample count)"),
    Option("fed.protocol", "joint", _choice("joint", "fedavg"), bool, "joint (beta sub-sampling) | fedavg (all volunteers)"),
    Option("fed.partition", "station", _choice("station", "sample"), bool, "station (whole stations round-robin) | sample (shuffled samples)"),
    Option("cluster.k", (0, 4), _int_list, _all(_nonneg), "cluster counts to run; 0 means plain FedGRU without clustering"),
    Option("cluster.kappa", (1,), _int_list, _all(_nonneg), "minimum organizations per cluster; one value for all or one per cluster"),
    Option("cluster.restarts", 10, _int, lambda x: x >= 1, "seeded K-Means restarts"),
    Option("cluster.max_iters", 100, _int, lambda x: x >= 1, "assign/update iterations per restart"),
    Option("cluster.val_fraction", 0.2, _float, lambda x: 0 < x < 1, "tail of each station's training windows held out for ensemble selection"),
]
BY_KEY = {o.key: o for o in OPTIONS}


def defaults() -> dict:
    return {o.key: o.default for o in OPTIONS}


def set_value(cfg: dict, key: str, raw: str) -> None:
    key = key.strip()
    opt = BY_KEY.get(key)
    if opt is None:
        raise ConfigError("unknown key", key)
    try:
        value = opt.parse(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value {raw.strip()!r} ({exc})", key) from None
    if not opt.check(value):
        raise ConfigError(f"value {raw.strip()!r} out of range ({opt.help})", key)
    cfg[key] = value


def parse_lines(text: str, cfg: dict, source: str = "<config>") -> None:
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = line.split("=", 1)
        set_value(cfg, key, raw)


def resolve(path=None, sets=(), seed=None) -> dict:
    cfg = defaults()
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        parse_lines(text, cfg, str(path))
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        set_value(cfg, key, raw)
    if seed is not None:
        set_value(cfg, "seed", str(seed))
    check_consistency(cfg)
    return cfg


def check_consistency(cfg: dict) -> None:
    if cfg["data.source"] == "csv" and not cfg["data.csv_path"]:
        raise ConfigError("required when data.source=csv", "data.csv_path")
    kappa = cfg["cluster.kappa"]
    for k in cfg["cluster.k"]:
        if k and len(kappa) not in (1, k):
            raise ConfigError(f"needs 1 or {k} values for k={k}", "cluster.kappa")


def dump(cfg: dict) -> str:
    return "".join(f"{o.key} = {_fmt(cfg[o.key])}\n" for o in OPTIONS)


def help_text() -> str:
    width = max(len(o.key) for o in OPTIONS)
    lines = ["configuration keys (key = value, one per line; '#' starts a comment):"]
    for o in OPTIONS:
        lines.append(f"  {o.key:<{width}}  [{_fmt(o.default)}]  {o.help}")
    return "\n".join(lines)
