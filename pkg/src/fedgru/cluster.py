"""Constrained K-Means over organization locations and ensemble selection
of per-cluster global models."""

from __future__ import annotations

import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import MetricsReport, Normalizer, WindowSet, metrics
from .errors import ConfigError
from .federation import FederationConfig, Organization, make_evaluator, run_federated_training
from .gru import GruNetwork, predict

log = logging.getLogger(__name__)

MAX_EXHAUSTIVE = 12


@dataclass(frozen=True)
class ClusterConfig:
    k: int
    kappa: tuple[int, ...] = ()
    max_iters: int = 100
    restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("must be >= 1", "cluster.k")
        kappa = tuple(self.kappa) or (0,) * self.k
        if len(kappa) == 1 and self.k > 1:
            kappa = kappa * self.k
        if len(kappa) != self.k or min(kappa) < 0:
            raise ConfigError(f"need {self.k} non-negative minimum sizes, got {kappa}", "cluster.kappa")
        object.__setattr__(self, "kappa", kappa)
        if self.max_iters < 1:
            raise ConfigError("must be >= 1", "cluster.max_iters")
        if self.restarts < 1:
            raise ConfigError("must be >= 1", "cluster.restarts")


@dataclass
class ClusterResult:
    centers: np.ndarray  # (k, n)
    tau: np.ndarray  # (m, k), integral
    sse_trace: list[float]
    iterations: int
    sse: float
    restart_traces: list = field(default_factory=list)  # sse_trace of every restart, in order

    @property
    def labels(self) -> np.ndarray:
        return self.tau.argmax(axis=1)

    @property
    def sizes(self) -> np.ndarray:
        return self.tau.sum(axis=0).astype(int)


def project_locations(latlon) -> np.ndarray:
    """Equirectangular plane around the mean latitude, in degrees.

    Column 0 is the scaled longitude, column 1 the latitude.
    """
    latlon = np.asarray(latlon, dtype=np.float64).reshape(-1, 2)
    c = math.cos(math.radians(float(latlon[:, 0].mean())))
    return np.column_stack([latlon[:, 1] * c, latlon[:, 0]])


def unproject(points, ref_latlon) -> np.ndarray:
    ref_latlon = np.asarray(ref_latlon, dtype=np.float64).reshape(-1, 2)
    c = math.cos(math.radians(float(ref_latlon[:, 0].mean())))
    points = np.asarray(points, dtype=np.float64)
    return np.column_stack([points[:, 1], points[:, 0] / c])


def _half_sq_dist(points, centers):
    diff = points[:, None, :] - centers[None, :, :]
    return 0.5 * np.einsum("mkn,mkn->mk", diff, diff)


def sse(points, centers, tau) -> float:
    """Sum over points and clusters of ``tau * 0.5 * ||x - c||^2``."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if centers.ndim == 1:
        centers = centers[:, None]
    return float(np.sum(np.asarray(tau, dtype=np.float64) * _half_sq_dist(points, centers)))


# ---------------------------------------------------------------- assignment


class _FlowGraph:
    def __init__(self, n):
        self.adj = [[] for _ in range(n)]
        self.to, self.cap, self.cost = [], [], []

    def add(self, u, v, cap, cost):
        neg = tuple(-c for c in cost)
        for a, b, c, w in ((u, v, cap, cost), (v, u, 0, neg)):
            self.adj[a].append(len(self.to))
            self.to.append(b)
            self.cap.append(c)
            self.cost.append(w)

    def min_cost_flow(self, s, t, units):
        """Successive shortest paths with SPFA; costs are tuples compared
        lexicographically. Returns the amount of flow sent."""
        n = len(self.adj)
        zero = (0,) * len(self.cost[0])
        sent = 0
        while sent < units:
            dist = [None] * n
            prev = [-1] * n
            dist[s] = zero
            queue = deque([s])
            inq = [False] * n
            inq[s] = True
            pushes = 0
            while queue:
                u = queue.popleft()
                inq[u] = False
                du = dist[u]
                for e in self.adj[u]:
                    if self.cap[e] <= 0:
                        continue
                    v = self.to[e]
                    nd = tuple(a + b for a, b in zip(du, self.cost[e]))
                    if dist[v] is None or nd < dist[v]:
                        dist[v] = nd
                        prev[v] = e
                        if not inq[v] and pushes < n * n:
                            # the cap only bites on rounding-level cycles in float costs
                            queue.append(v)
                            inq[v] = True
                            pushes += 1
            if dist[t] is None:
                break
            v = t
            while v != s:
                e = prev[v]
                self.cap[e] -= 1
                self.cap[e ^ 1] += 1
                v = self.to[e ^ 1]
            sent += 1
        return sent


def _assign_flow(cost: np.ndarray, kappa: Sequence[int]) -> np.ndarray:
    m, k = cost.shape
    S, T = m + k, m + k + 1
    g = _FlowGraph(m + k + 2)
    for i in range(m):
        g.add(S, i, 1, (0, 0.0, 0))
    arc = np.empty((m, k), dtype=int)
    for i in range(m):
        for h in range(k):
            arc[i, h] = len(g.to)
            g.add(i, m + h, 1, (0, float(cost[i, h]), h))
    for h in range(k):
        if kappa[h]:
            g.add(m + h, T, kappa[h], (-1, 0.0, 0))  # filling a minimum slot outranks any distance
        g.add(m + h, T, m, (0, 0.0, 0))
    if g.min_cost_flow(S, T, m) != m:
        raise RuntimeError("assignment flow did not route every point")
    tau = np.zeros((m, k))
    for i in range(m):
        for h in range(k):
            if g.cap[arc[i, h]] == 0:
                tau[i, h] = 1.0
    return tau


def assign_step(points, centers, kappa) -> np.ndarray:
    """Optimal integral assignment for fixed centers under minimum sizes.

    Solved as a min-cost flow: points send one unit each to clusters, and
    cluster ``h`` must pass at least ``kappa[h]`` units to the sink. Path
    costs are compared as (unfilled minimum, SSE, cluster index), so ties
    in SSE go to lower cluster indices. When nearest-center assignment
    already meets every minimum it is returned directly, being the same
    optimum.
    """
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if centers.ndim == 1:
        centers = centers[:, None]
    m, k = len(points), len(centers)
    kappa = tuple(int(c) for c in kappa) if len(kappa) else (0,) * k
    if len(kappa) != k:
        raise ConfigError(f"need {k} minimum sizes, got {len(kappa)}", "cluster.kappa")
    if sum(kappa) > m:
        raise ConfigError(f"minimum sizes sum to {sum(kappa)} but only {m} points", "cluster.kappa")
    cost = _half_sq_dist(points, centers)
    nearest = cost.argmin(axis=1)  # first minimum = lowest index on ties
    if np.all(np.bincount(nearest, minlength=k) >= kappa):
        tau = np.zeros((m, k))
        tau[np.arange(m), nearest] = 1.0
        return tau
    return _assign_flow(cost, kappa)


def update_step(points, tau, previous=None) -> np.ndarray:
    """Weighted means; clusters with no mass keep their previous center."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    tau = np.asarray(tau, dtype=np.float64)
    mass = tau.sum(axis=0)
    centers = np.array(previous, dtype=np.float64).reshape(tau.shape[1], -1) if previous is not None else np.zeros((tau.shape[1], points.shape[1]))
    full = mass > 0
    centers[full] = (tau[:, full].T @ points) / mass[full, None]
    return centers


def initial_centers(points, k: int, seed: int, restart: int) -> np.ndarray:
    rng = np.random.default_rng([seed, restart])
    return np.array(points[rng.choice(len(points), size=k, replace=False)], dtype=np.float64)


def _single_run(points, centers, kappa, max_iters, tol=1e-9) -> ClusterResult:
    trace = []
    for it in range(1, max_iters + 1):
        tau = assign_step(points, centers, kappa)
        trace.append(sse(points, centers, tau))
        new = update_step(points, tau, centers)
        moved = np.max(np.abs(new - centers)) > tol
        centers = new
        if not moved:
            break
    return ClusterResult(centers, tau, trace, it, sse(points, centers, tau))


def constrained_kmeans(points, cfg: ClusterConfig) -> ClusterResult:
    """Best of ``cfg.restarts`` runs from distinct seeded point picks."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if len(points) < cfg.k:
        raise ConfigError(f"{cfg.k} clusters but only {len(points)} points", "cluster.k")
    if sum(cfg.kappa) > len(points):
        raise ConfigError(f"minimum sizes sum to {sum(cfg.kappa)} but only {len(points)} points", "cluster.kappa")
    best = None
    traces = []
    for restart in range(cfg.restarts):
        res = _single_run(points, initial_centers(points, cfg.k, cfg.seed, restart), cfg.kappa, cfg.max_iters)
        traces.append(res.sse_trace)
        if best is None or res.sse < best.sse:
            best = res
    best.restart_traces = traces
    return best


# ---------------------------------------------------------------- ensembles


@dataclass
class ClusterModel:
    cluster_id: int
    net: GruNetwork
    validation: MetricsReport | None = None


class Ensemble:
    """Averages the (normalized) predictions of its member networks."""

    def __init__(self, members: Sequence[GruNetwork]):
        if not members:
            raise ValueError("empty ensemble")
        self.members = list(members)

    def predict(self, x) -> np.ndarray:
        return np.stack([predict(x, m) for m in self.members]).mean(axis=0)


@dataclass
class Selection:
    subset: tuple[int, ...]  # cluster ids
    mae: float
    evaluated: dict = field(default_factory=dict)  # subset -> validation MAE
    greedy: bool = False
    ensemble: Ensemble | None = None


def ensemble_select(models: Sequence[ClusterModel], validation: WindowSet, normalizer: Normalizer) -> Selection:
    """Subset of models whose averaged prediction has the lowest validation MAE.

    All non-empty subsets are scored when there are at most 12 models;
    ties go to the smaller subset, then the lexicographically first. Larger
    sets fall back to greedy forward selection and set ``greedy``.
    """
    if not models:
        raise ValueError("no models to select from")
    if len(validation) == 0:
        raise ValueError("empty validation set")
    ids = [m.cluster_id for m in models]
    order = np.argsort(ids, kind="stable")
    ids = [ids[i] for i in order]
    P = np.stack([predict(validation.x, models[i].net) for i in order])
    y = normalizer.inverse(validation.y)

    def score(idx):
        return float(np.mean(np.abs(normalizer.inverse(P[list(idx)].mean(axis=0)) - y)))

    evaluated = {}
    if len(models) <= MAX_EXHAUSTIVE:
        best, best_mae = None, math.inf
        for size in range(1, len(ids) + 1):
            for idx in itertools.combinations(range(len(ids)), size):
                mae = score(idx)
                evaluated[tuple(ids[i] for i in idx)] = mae
                if mae < best_mae:
                    best, best_mae = idx, mae
        greedy = False
    else:
        log.warning("%d models exceed exhaustive search limit; using greedy forward selection", len(models))
        best, best_mae = (), math.inf
        while True:
            cands = [tuple(sorted(best + (j,))) for j in range(len(ids)) if j not in best]
            if not cands:
                break
            scored = [(score(c), c) for c in cands]
            for mae, c in scored:
                evaluated[tuple(ids[i] for i in c)] = mae
            mae, c = min(scored, key=lambda t: t[0])
            if mae >= best_mae:
                break
            best, best_mae = c, mae
        greedy = True
    subset = tuple(ids[i] for i in best)
    by_id = {m.cluster_id: m for m in models}
    return Selection(subset, best_mae, evaluated, greedy, Ensemble([by_id[c].net for c in subset]))


# ---------------------------------------------------------------- pipeline


def split_validation(orgs: Sequence[Organization], fraction: float = 0.2):
    """Hold out the last ``fraction`` of every station's windows in each org."""
    if not 0 < fraction < 1:
        raise ConfigError("must lie in (0, 1)", "cluster.val_fraction")
    train, val = [], {}
    for org in orgs:
        keep, hold = [], []
        sids = org.samples.station_ids
        for sid in dict.fromkeys(sids.tolist()):
            rows = np.flatnonzero(sids == sid)
            rows = rows[np.argsort(org.samples.t_index[rows], kind="stable")]
            cut = math.floor(len(rows) * (1 - fraction))
            keep.append(rows[:cut])
            hold.append(rows[cut:])
        train.append(Organization(org.org_id, org.samples.take(np.concatenate(keep)), org.location))
        val[org.org_id] = org.samples.take(np.concatenate(hold))
    return train, val


@dataclass
class ClusteredRun:
    k: int
    clustering: ClusterResult | None
    membership: dict  # org_id -> cluster id
    models: list[ClusterModel]
    reports: dict  # cluster id -> list[RoundReport]
    selection: Selection


def run_clustered_fedgru(
    orgs: Sequence[Organization],
    validation: dict,
    k: int,
    fed_cfg: FederationConfig,
    init_net: GruNetwork,
    normalizer: Normalizer,
    cluster_cfg: ClusterConfig | None = None,
    min_orgs: int = 1,
) -> ClusteredRun:
    """Cluster organizations by location, train one federation per cluster,
    and pick the validation-best ensemble of the cluster models.

    ``k=0`` skips clustering: all organizations form one federation.
    """
    orgs = sorted(orgs, key=lambda o: o.org_id)
    clustering = None
    if k == 0:
        membership = {o.org_id: 0 for o in orgs}
    else:
        cluster_cfg = cluster_cfg or ClusterConfig(k, (1,) * k)
        pts = project_locations([o.location for o in orgs])
        clustering = constrained_kmeans(pts, cluster_cfg)
        labels = clustering.labels
        membership = {o.org_id: int(l) for o, l in zip(orgs, labels)}
        membership = _merge_small(membership, clustering.centers, pts, [o.org_id for o in orgs], min_orgs)

    val_all = WindowSet.concat([validation[o.org_id] for o in orgs])
    models, reports = [], {}
    for cid in sorted(set(membership.values())):
        members = [o for o in orgs if membership[o.org_id] == cid]
        val = WindowSet.concat([validation[o.org_id] for o in members])
        net, reps = run_federated_training(fed_cfg, members, init_net, make_evaluator(val, normalizer, fed_cfg))
        pred = normalizer.inverse(predict(val_all.x, net))
        models.append(ClusterModel(cid, net, metrics(normalizer.inverse(val_all.y), pred)))
        reports[cid] = reps
    selection = ensemble_select(models, val_all, normalizer)
    return ClusteredRun(k, clustering, membership, models, reports, selection)


def _merge_small(membership, centers, pts, ids, min_orgs):
    while True:
        counts = {}
        for c in membership.values():
            counts[c] = counts.get(c, 0) + 1
        small = sorted(c for c, n in counts.items() if n < min_orgs)
        if not small or len(counts) == 1:
            return membership
        c = small[0]
        others = [h for h in counts if h != c]
        target = min(others, key=lambda h: (float(np.sum((centers[h] - centers[c]) ** 2)), h))
        log.warning("cluster %d has %d organization(s) (< %d); merged into cluster %d", c, counts[c], min_orgs, target)
        membership = {o: (target if l == c else l) for o, l in membership.items()}

