"""Acceptance criteria 1-10, one PASS/FAIL line each.

Under pytest the lines are repeated in the terminal summary. The module can
also be run directly: ``python tests/test_acceptance.py``.
"""

import contextlib
import io
import math
import statistics
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from fedgru.cli import main, parse_num, read_table
from fedgru.cluster import ClusterConfig, ClusterModel, Ensemble, assign_step, constrained_kmeans, ensemble_select
from fedgru.data import Normalizer, WindowSet, generate_synthetic, make_windows, metrics
from fedgru.federation import (
    FederationConfig,
    ModelUpdate,
    Organization,
    aggregate,
    measure_overhead,
    message_bytes,
    run_centralized_training,
    run_federated_training,
    simulate_ledger,
)
from fedgru.gru import GruNetwork, LossConfig, backward, forward_batch, init_network, param_count, predict

from helpers import sets, tree_hashes
from oracles import (
    brute_force_assignment,
    constrained_lloyd_best,
    exhaustive_best_subset,
    four_blobs,
    labeling_cost,
    ld_numeric_gradient,
    random_gru_case,
    relative_errors,
)

RESULTS: dict[int, str] = {}

# trend runs: full synthetic size, a smaller network and a larger step than the defaults
TREND_SETS = ["model.hidden_sizes=16", "train.alpha=0.2", "train.rounds=3", "train.eval_every=0"]
TREND_SEEDS = range(5)


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} [{n}] {title}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def cli(*argv) -> int:
    with contextlib.redirect_stdout(io.StringIO()):
        return main([str(a) for a in argv])


def station_orgs(n_stations, n_days, seed):
    ds = generate_synthetic(n_stations, n_days, seed=seed)
    windows = make_windows(ds, 12, 1, Normalizer.fit(ds))
    return [Organization(i, w) for i, w in enumerate(windows)]


def params_per_round(run):
    seen = []

    def capture(net):
        seen.append(net.params.copy())
        return 0.0, 0.0

    run(capture)
    return seen


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(100):
        hidden, x, y, lam = random_gru_case(case)
        net = init_network(1, hidden, seed=case)
        _, cache = forward_batch(x, net)
        g = backward(cache, y, net, LossConfig(lam=lam, clip_norm=None)).params
        worst = max(worst, float(relative_errors(g, ld_numeric_gradient(net.params, 1, hidden, x, y, lam)).max()))
    dt = time.perf_counter() - t0
    record(1, "gradient oracle", worst < 1e-5 and dt < 60,
           f"100 configs, max relative error {worst:.2e} (< 1e-5), {dt:.1f} s (< 60 s)")


# ---------------------------------------------------------------- 2


def test_criterion_2_single_client_equivalence():
    orgs = station_orgs(1, 3, seed=11)
    net = init_network(1, [8], seed=2)
    cfg = FederationConfig(n_orgs=1, rounds=10, alpha=0.1, batch_size=32, eval_every=1, seed=5)
    fed = params_per_round(lambda ev: run_federated_training(cfg, orgs, net, ev))
    cen = params_per_round(lambda ev: run_centralized_training(cfg, orgs[0].samples, net, ev))
    gaps = [float(np.max(np.abs(a - b))) for a, b in zip(fed, cen)]
    moved = float(np.max(np.abs(fed[-1] - net.params)))
    ok = len(gaps) == 10 and max(gaps) < 1e-12 and moved > 1e-3
    record(2, "single-client equivalence", ok,
           f"{len(gaps)} rounds, max coordinate gap {max(gaps):.1e} (< 1e-12), parameters moved by {moved:.2f}")


# ---------------------------------------------------------------- 3


def test_criterion_3_beta_one_degeneracy():
    orgs = station_orgs(10, 1, seed=3)
    net = init_network(1, [4], seed=1)
    details = []
    ok = True
    for failure in (0.0, 0.2):
        base = dict(n_orgs=10, rounds=20, beta=1.0, failure_prob=failure, alpha=0.1, batch_size=32, eval_every=1, seed=8)
        runs = {}
        for protocol in ("joint", "fedavg"):
            cfg = FederationConfig(protocol=protocol, **base)
            reports = []

            def go(ev):
                reports.extend(run_federated_training(cfg, orgs, net, ev)[1])

            trail = params_per_round(go)
            runs[protocol] = (trail, [(r.participants, r.dropped, r.bytes_up, r.bytes_down) for r in reports])
        same = len(runs["joint"][0]) == 20 and all(np.array_equal(a, b) for a, b in zip(runs["joint"][0], runs["fedavg"][0]))
        same = same and runs["joint"][1] == runs["fedavg"][1]
        ok = ok and same
        details.append(f"failure {failure}: {'identical' if same else 'DIFFERENT'}")
    record(3, "beta=1 protocol degeneracy", ok, "C=10, 20 rounds, params and ledgers bit-compared; " + ", ".join(details))


# ---------------------------------------------------------------- 4


def test_criterion_4_aggregation_algebra():
    rng = np.random.default_rng(4)
    up = lambda i, v, n: ModelUpdate(i, 1, np.asarray(v, dtype=float), n)
    example = aggregate([up(0, [1, 3], 1), up(1, [3, 5], 1)]).tolist() == [2.0, 4.0]
    idem = equal = True
    for _ in range(300):
        size, copies = int(rng.integers(1, 50)), int(rng.integers(1, 10))
        v = rng.standard_normal(size) * 10.0 ** rng.integers(-6, 7)
        ups = [up(i, v, int(rng.integers(1, 1000))) for i in range(copies)]
        idem &= np.array_equal(aggregate(ups), v) and np.array_equal(aggregate(ups, "weighted"), v)
        n = int(rng.integers(1, 1000))
        distinct = [up(i, rng.standard_normal(size) * 100, n) for i in range(copies)]
        equal &= np.array_equal(aggregate(distinct, "weighted"), aggregate(distinct, "uniform"))
    record(4, "aggregation algebra", example and idem and equal,
           f"[1,3]&[3,5]->[2,4] {example}, idempotent {idem}, weighted==uniform at equal counts {equal} (300 draws, exact)")


# ---------------------------------------------------------------- 5


def test_criterion_5_communication_ledger():
    n_params = param_count(1, [50, 50])
    ref = simulate_ledger(FederationConfig(n_orgs=20, rounds=50, beta=1.0), range(20), n_params)
    parts = []
    ok = True
    for beta, want in ((0.1, 0.9), (0.5, 0.5)):
        reps = simulate_ledger(FederationConfig(n_orgs=20, rounds=50, beta=beta), range(20), n_params)
        s = measure_overhead(reps, ref)
        k = round(20 * beta)
        exact_bytes = all(r.bytes_up == k * message_bytes(n_params) for r in reps)
        ok = ok and s.uplink_reduction == want and exact_bytes
        parts.append(f"beta {beta}: uplink reduction {s.uplink_reduction:g} (want {want:g}), {k} uploads every round {exact_bytes}")
    record(5, "communication ledger", ok, "C=20, T=50; " + "; ".join(parts))


# ---------------------------------------------------------------- 6


def test_criterion_6_constrained_kmeans():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    traces_ok = True
    n_traces = 0

    def check_traces(res):
        nonlocal traces_ok, n_traces
        for tr in res.restart_traces:
            n_traces += 1
            traces_ok &= all(b <= a for a, b in zip(tr, tr[1:]))

    # (b) assignment step against exhaustive enumeration, grid coordinates so sums are exact
    flow_ok = True
    n_inst = 0
    for m in range(1, 13):
        for k in range(1, 4):
            for _ in range(6 if m >= 11 and k == 3 else 12):
                pts = rng.integers(-6, 7, (m, 2)).astype(float)
                ctr = rng.integers(-12, 13, (k, 2)) / 2.0
                kappa = tuple(int(v) for v in rng.multinomial(int(rng.integers(0, m + 1)), [1 / k] * k))
                labels = assign_step(pts, ctr, kappa).argmax(axis=1)
                best, _ = brute_force_assignment(pts, ctr, kappa)
                flow_ok &= labeling_cost(pts, ctr, labels) == best and np.all(np.bincount(labels, minlength=k) >= kappa)
                n_inst += 1
                if k <= m:
                    check_traces(constrained_kmeans(pts, ClusterConfig(k, kappa, restarts=2, seed=n_inst)))

    # (c) four blobs, minimum size 5, against best of 20 restarts of an independent constrained Lloyd
    blob_ok = True
    ratios = []
    for seed in range(3):
        pts = four_blobs(seed, spread=2.5)
        res = constrained_kmeans(pts, ClusterConfig(4, (5,), seed=seed))
        check_traces(res)
        oracle = constrained_lloyd_best(pts, 4, (5, 5, 5, 5), restarts=20, seed=seed)
        ratios.append(res.sse / oracle)
        blob_ok &= bool(np.all(res.sizes >= 5)) and res.sse <= 1.01 * oracle
    dt = time.perf_counter() - t0
    ok = traces_ok and flow_ok and blob_ok and dt < 30
    record(6, "constrained k-means", ok,
           f"(a) {n_traces} SSE traces non-increasing {traces_ok}; (b) {n_inst} instances m<=12 k<=3 equal brute force "
           f"{flow_ok}; (c) sizes >= 5 and SSE/oracle max {max(ratios):.4f} (<= 1.01) {blob_ok}; {dt:.1f} s (< 30 s)")


# ---------------------------------------------------------------- 7


def test_criterion_7_ensemble_selection():
    identity = Normalizer(0.0, 1.0)
    matches = 0
    for seed in range(50):
        rng = np.random.default_rng([7, seed])
        k = 1 + seed % 3
        models = [ClusterModel(h, GruNetwork(1, [3], rng.standard_normal(param_count(1, [3])) * 0.8)) for h in range(k)]
        n = int(rng.integers(5, 60))
        val = WindowSet(rng.random((n, 4)), rng.random(n), np.full(n, "S", dtype=object), np.arange(n))
        sel = ensemble_select(models, val, identity)
        best, mae = exhaustive_best_subset({m.cluster_id: predict(val.x, m.net) for m in models}, val.y)
        ens_mae = float(np.mean(np.abs(Ensemble([models[h].net for h in sel.subset]).predict(val.x) - val.y)))
        matches += sel.subset == best and ens_mae == mae
    record(7, "ensemble selection oracle", matches == 50, f"{matches}/50 model sets (k<=3) pick the exhaustive argmin subset")


# ---------------------------------------------------------------- 8


def test_criterion_8_trend_reproduction(tmp_path):
    t0 = time.perf_counter()
    rows = []
    for seed in TREND_SEEDS:
        base = tmp_path / f"seed{seed}"
        argv = ["--seed", seed] + sum((["--set", kv] for kv in TREND_SETS), [])
        codes = [
            cli("train-central", *argv, "--out", base / "central"),
            cli("train-fed", *argv, "--set", "fed.n_orgs=2", "--out", base / "fed"),
            cli("train-clustered", *argv, "--set", "fed.n_orgs=20", "--set", "cluster.k=0,4", "--out", base / "clustered"),
        ]
        assert codes == [0, 0, 0]
        get = lambda d, run, split, field: parse_num(
            next(r for r in read_table(base / d / "metrics.csv") if r["run"] == run and r["split"] == split)[field])
        rows.append(dict(
            mape=get("central", "central", "test", "mape"),
            central=get("central", "central", "test", "mae"),
            central_train=get("central", "central", "train", "mae"),
            fed=get("fed", "C2_b1", "test", "mae"),
            k0=get("clustered", "K0", "test", "mae"),
            k4=get("clustered", "K4", "test", "mae"),
        ))
    dt = time.perf_counter() - t0
    mape = statistics.median(r["mape"] for r in rows)
    gap = statistics.median(r["fed"] / r["central"] - 1 for r in rows)
    wins = sum(r["k4"] < r["k0"] for r in rows)
    generalizes = sum(r["central_train"] <= r["central"] for r in rows)
    for seed, r in zip(TREND_SEEDS, rows):
        print(f"  seed {seed}: mape {r['mape']:.3f} central {r['central']:.4f} fed {r['fed']:.4f} "
              f"K0 {r['k0']:.4f} K4 {r['k4']:.4f}")
    ok = mape < 15 and gap <= 0.25 and wins >= 4 and dt < 900
    record(8, "trend reproduction", ok,
           f"median central MAPE {mape:.2f}% (< 15%), median FedGRU C=2 gap {gap:+.1%} (<= 25%), "
           f"K=4 beats plain on {wins}/5 seeds (>= 4), train MAE <= test on {generalizes}/5, "
           f"trend runs {dt:.0f} s (full suite time is reported below)")


# ---------------------------------------------------------------- 9


def test_criterion_9_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    steps = [
        ("synth", sets(), []),
        ("train-central", sets(), []),
        ("train-fed", sets("fed.beta=0.5", "fed.failure_prob=0.2"), []),
        ("train-clustered", sets("fed.n_orgs=4", "cluster.k=0,2"), []),
        ("evaluate", sets(), ["--checkpoint", a / "train-central" / "checkpoint_central.json"]),
    ]
    same = []
    for name, argv, extra in steps:
        assert cli(name, *argv, *extra, "--out", a / name) == 0
        assert cli(name, "--config", a / name / "config.txt", *extra, "--out", b / name) == 0
        same.append((name, tree_hashes(a / name) == tree_hashes(b / name)))
    runs = [a / "train-central", a / "evaluate"]
    assert cli("compare", *runs, "--out", a / "compare.csv") == 0
    assert cli("compare", *runs, "--out", b / "compare.csv") == 0
    same.append(("compare", (a / "compare.csv").read_bytes() == (b / "compare.csv").read_bytes()))
    ok = all(s for _, s in same)
    record(9, "determinism", ok, ", ".join(f"{n} {'identical' if s else 'DIFFERENT'}" for n, s in same))


# ---------------------------------------------------------------- 10


def test_criterion_10_metric_values():
    m1 = metrics([1, 2, 3], [1, 2, 3])
    m2 = metrics([0, 0], [1, 3])
    m3 = metrics([100], [110])
    hand = ((m1.mae, m1.mse, m1.rmse, m1.mape) == (0.0, 0.0, 0.0, 0.0)
            and (m2.mae, m2.mse, m2.rmse, m2.mape) == (2.0, 5.0, math.sqrt(5.0), None)
            and m3.mape == 10.0)
    rng = np.random.default_rng(10)
    ordered = 0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        y = rng.uniform(0, 1000, n)
        m = metrics(y, y + rng.standard_normal(n) * rng.uniform(0.01, 100))
        ordered += m.mae <= m.rmse
    record(10, "metric unit values", hand and ordered == 1000, f"hand cases exact {hand}, MAE <= RMSE on {ordered}/1000 vectors")


if __name__ == "__main__":
    failed = 0
    for name, fn in list(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                    with tempfile.TemporaryDirectory() as d:
                        fn(Path(d))
                else:
                    fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
