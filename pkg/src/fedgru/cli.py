"""Command-line front end: ``fedgru <command> [--config PATH] [--set K=V ...]``.

Every command resolves its configuration, works in a temporary sibling of
the output directory and renames it into place only on success, so a
failed run never leaves a partial artifact set behind.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .cluster import ClusterConfig, Ensemble, run_clustered_fedgru, split_validation, unproject
from .data import (
    Normalizer,
    TimeSeriesDataset,
    WindowSet,
    generate_synthetic,
    load_csv,
    make_windows,
    metrics,
    partition_equal,
    split_train_test,
    SyntheticProfile,
    write_csv,
    write_manifest,
)
from .errors import CheckpointError, ConfigError, DataError, FedGruError
from .federation import (
    CommLedger,
    FederationConfig,
    Organization,
    make_evaluator,
    measure_overhead,
    run_centralized_training,
    run_federated_training,
    simulate_ledger,
)
from .gru import LossConfig, init_network, load_checkpoint, param_count, save_checkpoint

log = logging.getLogger("fedgru")

METRIC_FIELDS = ["run", "dataset_hash", "split", "n", "mae", "mse", "rmse", "mape", "mape_excluded"]
ROUND_FIELDS = ["round", "participants", "dropped", "global_mae", "global_loss", "bytes_up", "bytes_down", "cumulative_bytes"]


# ---------------------------------------------------------------- formatting


def fmt(v) -> str:
    """Full-precision text for machine-readable files; ``NA`` for missing."""
    if v is None:
        return "NA"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def parse_num(text: str):
    if text == "NA":
        return None
    try:
        return int(text)
    except ValueError:
        return float(text)


def write_table(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_table(path: Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def show(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def print_table(header, rows, out=None) -> None:
    out = out or sys.stdout
    cells = [list(header)] + [[show(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)).rstrip(), file=out)


def metric_row(run: str, dataset_hash: str, split: str, m) -> list:
    return [run, dataset_hash, split, m.n, m.mae, m.mse, m.rmse, m.mape, m.mape_excluded]


def beta_tag(beta: float) -> str:
    return f"{beta:g}"


# ---------------------------------------------------------------- run directories


class RunDir:
    """Temporary working directory promoted to ``out`` on success."""

    def __init__(self, out: Path):
        self.out = out
        if out.exists() and not (out / "config.txt").is_file():
            raise ConfigError(f"{out} exists and is not a run directory; refusing to overwrite", "--out")
        self.tmp = out.parent / f".{out.name}.tmp-{os.getpid()}"

    def __enter__(self) -> Path:
        self.out.parent.mkdir(parents=True, exist_ok=True)
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir()
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.out.exists():
            shutil.rmtree(self.out)
        self.tmp.rename(self.out)
        return False


# ---------------------------------------------------------------- pipeline pieces


def load_dataset(cfg: dict) -> TimeSeriesDataset:
    if cfg["data.source"] == "csv":
        return load_csv(cfg["data.csv_path"], gap_policy=cfg["data.gap_policy"])
    return generate_synthetic(
        cfg["synth.n_stations"],
        cfg["synth.n_days"],
        SyntheticProfile.from_library(cfg["synth.groups"]),
        noise_std=cfg["synth.noise_std"],
        seed=cfg["seed"],
        interval_minutes=cfg["synth.interval_minutes"],
    )


class Prepared:
    """Dataset, normalizer and windowed train/test splits for one config."""

    def __init__(self, cfg: dict):
        self.dataset = load_dataset(cfg)
        self.hash = self.dataset.fingerprint()
        train, test = split_train_test(self.dataset, cfg["data.train_fraction"])
        self.normalizer = Normalizer.fit(train)
        r, s = cfg["window.r"], cfg["window.s"]
        self.train_sets = make_windows(train, r, s, self.normalizer)
        self.train = WindowSet.concat(self.train_sets)
        self.test = WindowSet.concat(make_windows(test, r, s, self.normalizer))

    def split(self, name: str) -> WindowSet:
        return self.train if name == "train" else self.test

    def organizations(self, n_orgs: int, cfg: dict) -> list[Organization]:
        mode = cfg["fed.partition"]
        parts = partition_equal(self.train_sets, n_orgs, cfg["seed"], mode)
        locs = np.array([s.location for s in self.dataset.stations])
        orgs = []
        for o, part in enumerate(parts):
            # station mode deals stations round-robin; sample mode mixes all of them
            own = locs[o::n_orgs] if mode == "station" else locs
            orgs.append(Organization(o, part, (float(own[:, 0].mean()), float(own[:, 1].mean()))))
        return orgs

    def evaluate(self, members, split: str, mape_floor: float):
        ws = self.split(split)
        pred = Ensemble(members).predict(ws.x)
        return metrics(self.normalizer.inverse(ws.y), self.normalizer.inverse(pred), mape_floor)


def fed_config(cfg: dict, n_orgs: int, beta: float) -> FederationConfig:
    return FederationConfig(
        n_orgs=n_orgs,
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        alpha=cfg["train.alpha"],
        rounds=cfg["train.rounds"],
        beta=beta,
        failure_prob=cfg["fed.failure_prob"],
        aggregation=cfg["fed.aggregation"],
        protocol=cfg["fed.protocol"],
        seed=cfg["seed"],
        loss=LossConfig(cfg["model.lambda"], cfg["model.clip_norm"]),
        eval_every=cfg["train.eval_every"],
    )


def initial_network(cfg: dict):
    hidden = list(cfg["model.hidden_sizes"])
    if cfg["model.init_checkpoint"]:
        net = load_checkpoint(cfg["model.init_checkpoint"]).members[0]
        if list(net.hidden_sizes) != hidden or net.input_size != 1:
            raise ConfigError(
                f"checkpoint has hidden sizes {list(net.hidden_sizes)}, config asks for {hidden}", "model.init_checkpoint"
            )
        return net
    return init_network(1, hidden, cfg["seed"])


def checkpoint_meta(cfg: dict, prep: Prepared, tag: str) -> dict:
    return {"run": tag, "dataset_hash": prep.hash, "seed": cfg["seed"]}


def round_rows(reports) -> list[list]:
    cum = CommLedger.from_reports(reports).cumulative
    return [
        [r.round, len(r.participants), len(r.dropped), r.global_mae, r.global_loss, r.bytes_up, r.bytes_down, c]
        for r, c in zip(reports, cum)
    ]


def single(cfg: dict, key: str, command: str):
    values = cfg[key]
    if len(values) != 1:
        raise ConfigError(f"{command} takes a single value, got {fmt_list(values)}", key)
    return values[0]


def fmt_list(values) -> str:
    return ",".join(fmt(v) for v in values)


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: dict, args, work: Path) -> None:
    ds = load_dataset(cfg)
    write_csv(ds, work / "data.csv")
    write_manifest(ds, work / "manifest.txt")
    print(f"wrote {len(ds.stations)} stations x {ds.length} intervals  sha256={ds.fingerprint()}")


def cmd_train_central(cfg: dict, args, work: Path) -> None:
    prep = Prepared(cfg)
    fcfg = fed_config(cfg, 1, 1.0)
    evaluator = make_evaluator(prep.test, prep.normalizer, fcfg)
    net, trace = run_centralized_training(fcfg, prep.train, initial_network(cfg), evaluator)
    write_table(
        work / "trace_central.csv",
        ["round", "train_loss", "eval_loss", "eval_mae"],
        [[t["round"], t["train_loss"], t["eval_loss"], t["eval_mae"]] for t in trace],
    )
    save_checkpoint(work / "checkpoint_central.json", [net], prep.normalizer, cfg["window.r"], cfg["window.s"],
                    checkpoint_meta(cfg, prep, "central"))
    rows = [metric_row("central", prep.hash, split, prep.evaluate([net], split, cfg["data.mape_floor"]))
            for split in ("train", "test")]
    finish_metrics(work, rows)


def cmd_train_fed(cfg: dict, args, work: Path) -> None:
    prep = Prepared(cfg)
    init = initial_network(cfg)
    n_params = param_count(1, init.hidden_sizes)
    rows, ledger_lines = [], []
    for n_orgs in cfg["fed.n_orgs"]:
        orgs = prep.organizations(n_orgs, cfg)
        for beta in cfg["fed.beta"]:
            tag = f"C{n_orgs}_b{beta_tag(beta)}"
            fcfg = fed_config(cfg, n_orgs, beta)
            log.info("training %s", tag)
            net, reports = run_federated_training(fcfg, orgs, init, make_evaluator(prep.test, prep.normalizer, fcfg))
            write_table(work / f"rounds_{tag}.csv", ROUND_FIELDS, round_rows(reports))
            save_checkpoint(work / f"checkpoint_{tag}.json", [net], prep.normalizer, cfg["window.r"], cfg["window.s"],
                            checkpoint_meta(cfg, prep, tag))
            for split in ("train", "test"):
                rows.append(metric_row(tag, prep.hash, split, prep.evaluate([net], split, cfg["data.mape_floor"])))
            ledger_lines.append(ledger_line(tag, fcfg, reports, [o.org_id for o in orgs], n_params))
    (work / "ledger.txt").write_text("\n".join(ledger_lines) + "\n", encoding="utf-8")
    for line in ledger_lines:
        print(line)
    finish_metrics(work, rows)


def ledger_line(tag, fcfg: FederationConfig, reports, org_ids, n_params) -> str:
    if not reports:
        return f"{tag}: no rounds"
    reference = simulate_ledger(
        FederationConfig(**{**fcfg.__dict__, "beta": 1.0, "failure_prob": 0.0}), org_ids, n_params
    )
    s = measure_overhead(reports, reference)
    return (
        f"{tag}: rounds={s.rounds} bytes_up={s.total_up} bytes_down={s.total_down} "
        f"reference_up={s.reference_up} reference_down={s.reference_down} "
        f"uplink_reduction={fmt(s.uplink_reduction)} downlink_reduction={fmt(s.downlink_reduction)} "
        f"total_reduction={fmt(s.total_reduction)}"
    )


def cmd_train_clustered(cfg: dict, args, work: Path) -> None:
    n_orgs = single(cfg, "fed.n_orgs", "train-clustered")
    beta = single(cfg, "fed.beta", "train-clustered")
    kappa = cfg["cluster.kappa"]
    # settle every K's feasibility before any training starts
    ccfgs = {}
    for k in cfg["cluster.k"]:
        if k == 0:
            continue
        cc = ClusterConfig(k, kappa, cfg["cluster.max_iters"], cfg["cluster.restarts"], cfg["seed"])
        if k > n_orgs or sum(cc.kappa) > n_orgs:
            raise ConfigError(f"k={k} with minimum sizes {cc.kappa} is infeasible for {n_orgs} organizations", "cluster.kappa")
        ccfgs[k] = cc
    prep = Prepared(cfg)
    orgs = prep.organizations(n_orgs, cfg)
    train_orgs, validation = split_validation(orgs, cfg["cluster.val_fraction"])
    fcfg = fed_config(cfg, n_orgs, beta)
    init = initial_network(cfg)
    locs = np.array([o.location for o in orgs])
    rows = []
    for k in cfg["cluster.k"]:
        tag = f"K{k}"
        log.info("training %s", tag)
        run = run_clustered_fedgru(train_orgs, validation, k, fcfg, init, prep.normalizer, ccfgs.get(k))
        models = {m.cluster_id: m for m in run.models}
        write_table(
            work / f"clusters_{tag}_orgs.csv",
            ["org_id", "lat", "lon", "n_samples", "cluster"],
            [[o.org_id, o.location[0], o.location[1], o.n_samples, run.membership[o.org_id]] for o in train_orgs],
        )
        centers = unproject(run.clustering.centers, locs) if run.clustering is not None else locs.mean(axis=0, keepdims=True)
        write_table(
            work / f"clusters_{tag}_centers.csv",
            ["cluster", "lat", "lon", "n_orgs", "val_mae"],
            [[cid, float(centers[cid, 0]), float(centers[cid, 1]),
              sum(1 for v in run.membership.values() if v == cid), models[cid].validation.mae]
             for cid in sorted(models)],
        )
        write_table(
            work / f"clusters_{tag}_selection.csv",
            ["subset", "val_mae", "selected"],
            [[" ".join(map(str, sub)), mae, int(sub == run.selection.subset)] for sub, mae in run.selection.evaluated.items()],
        )
        rr = []
        for cid, reps in sorted(run.reports.items()):
            rr += [[cid] + row for row in round_rows(reps)]
        write_table(work / f"rounds_{tag}.csv", ["cluster"] + ROUND_FIELDS, rr)
        save_checkpoint(work / f"checkpoint_{tag}.json", run.selection.ensemble.members, prep.normalizer,
                        cfg["window.r"], cfg["window.s"], checkpoint_meta(cfg, prep, tag))
        for split in ("train", "test"):
            rows.append(metric_row(tag, prep.hash, split,
                                   prep.evaluate(run.selection.ensemble.members, split, cfg["data.mape_floor"])))
    finish_metrics(work, rows)


def cmd_evaluate(cfg: dict, args, work: Path) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    if (ckpt.r, ckpt.s) != (cfg["window.r"], cfg["window.s"]):
        raise CheckpointError(
            f"{args.checkpoint}: checkpoint windows r={ckpt.r}, s={ckpt.s} do not match config "
            f"r={cfg['window.r']}, s={cfg['window.s']}"
        )
    dataset = load_dataset(cfg)
    train, test = split_train_test(dataset, cfg["data.train_fraction"])
    ws = WindowSet.concat(make_windows(train if args.split == "train" else test, ckpt.r, ckpt.s, ckpt.normalizer))
    pred = Ensemble(ckpt.members).predict(ws.x)
    m = metrics(ckpt.normalizer.inverse(ws.y), ckpt.normalizer.inverse(pred), cfg["data.mape_floor"])
    dataset_hash = dataset.fingerprint()
    run = ckpt.meta.get("run", Path(args.checkpoint).stem)
    if ckpt.meta.get("dataset_hash") not in (None, dataset_hash):
        log.warning("checkpoint was trained on dataset %s, evaluating on %s", ckpt.meta["dataset_hash"][:12], dataset_hash[:12])
    finish_metrics(work, [metric_row(run, dataset_hash, args.split, m)])


def cmd_compare(args) -> int:
    if not args.runs:
        print("fedgru compare: error: at least one run directory is required", file=sys.stderr)
        return 2
    rows = []
    for d in args.runs:
        path = Path(d) / "metrics.csv"
        if not path.is_file():
            raise DataError(f"{path}: missing metrics file")
        for rec in read_table(path):
            rows.append([Path(d).name, rec["run"], rec["split"], rec["dataset_hash"]]
                        + [parse_num(rec[f]) for f in ("n", "mae", "mse", "rmse", "mape")])
    reference = rows[0][3]
    header = ["dir", "run", "split", "n", "mae", "mse", "rmse", "mape", "warning"]
    table = [r[:3] + r[4:] + ["" if r[3] == reference else "dataset_hash_mismatch"] for r in rows]
    print_table(header, table)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_table(out, header, table)
    return 0


def finish_metrics(work: Path, rows) -> None:
    write_table(work / "metrics.csv", METRIC_FIELDS, rows)
    print_table(["run", "split", "n", "mae", "mse", "rmse", "mape"], [[r[0], r[2]] + r[3:8] for r in rows])


COMMANDS = {
    "synth": cmd_synth,
    "train-central": cmd_train_central,
    "train-fed": cmd_train_fed,
    "train-clustered": cmd_train_clustered,
    "evaluate": cmd_evaluate,
}


# ---------------------------------------------------------------- argument parsing


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", metavar="PATH", default=d(None), help="key = value configuration file")
    parser.add_argument("--set", metavar="K=V", action="append", dest="sets", default=d([]),
                        help="override one key (repeatable, applied after --config)")
    parser.add_argument("--seed", type=int, metavar="N", default=d(None), help="shorthand for --set seed=N")
    parser.add_argument("--out", metavar="DIR", default=d(None), help="output directory (default: runs/<command>)")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False), help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    epilog = config_mod.help_text() + "\n\nexit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error"
    parser = argparse.ArgumentParser(
        prog="fedgru",
        description="Federated GRU traffic-flow forecasting experiments.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "synth": "write a synthetic traffic CSV and manifest",
        "train-central": "train one GRU on the pooled data",
        "train-fed": "federated training over the fed.n_orgs x fed.beta grid",
        "train-clustered": "cluster organizations by location and train one federation per cluster",
        "evaluate": "score a checkpoint on the train or test split",
        "compare": "join metrics.csv files from run directories into one table",
    }
    subs = {}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text, epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
        _global_flags(p, suppress=True)
        subs[name] = p
    subs["evaluate"].add_argument("--checkpoint", required=True, metavar="PATH")
    subs["evaluate"].add_argument("--split", choices=("train", "test"), default="test")
    subs["compare"].add_argument("runs", nargs="*", metavar="RUN_DIR")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            return cmd_compare(args)
        cfg = config_mod.resolve(args.config, args.sets, args.seed)
        out = Path(args.out) if args.out else Path("runs") / args.command
        with RunDir(out) as work:
            (work / "config.txt").write_text(config_mod.dump(cfg), encoding="utf-8")
            COMMANDS[args.command](cfg, args, work)
        print(f"artifacts in {out}")
        return 0
    except FedGruError as exc:
        print(f"fedgru: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"fedgru: error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
