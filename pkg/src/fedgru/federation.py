"""Simulated cloud and organizations: FedAVG rounds, the joint-announcement
protocol (check-in, beta sub-sampling, aggregation), failure injection and a
byte-level communication ledger.

Every random decision is drawn from a generator keyed on ``(seed, stage,
round, org_id)``, so a whole training run is a pure function of the seed
and the data, whatever order the organizations are processed in.
"""

from __future__ import annotations

import logging
import math
import struct
import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Sequence

import numpy as np

from .data import WindowSet
from .errors import AggregationError, ConfigError
from .gru import GruNetwork, LossConfig, loss, predict, train_epochs

log = logging.getLogger(__name__)

HEADER_BYTES = 64
_HEADER = struct.Struct("<8sIqqqq")  # magic, version, org_id, round, n_samples, n_params
_MAGIC = b"FEDGRU\x00\x01"

_TRAIN, _CHECKIN, _DROP, _SELECT = 0, 1, 2, 3


def train_key(seed: int, round_: int, org_id: int) -> tuple[int, ...]:
    """Seed key of one organization's local training in one round."""
    return (seed, _TRAIN, round_, org_id)


def _uniform(seed, stage, round_, org_id=None) -> np.random.Generator:
    key = [seed, stage, round_] + ([] if org_id is None else [org_id])
    return np.random.default_rng(key)


@dataclass
class Organization:
    org_id: int
    samples: WindowSet
    location: tuple[float, float] = (0.0, 0.0)

    @property
    def n_samples(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class FederationConfig:
    n_orgs: int = 20
    epochs: int = 1
    batch_size: int = 128
    alpha: float = 0.001
    rounds: int = 100
    beta: float = 1.0
    failure_prob: float = 0.0
    aggregation: str = "uniform"
    protocol: str = "joint"
    seed: int = 0
    loss: LossConfig = LossConfig()
    eval_every: int = 1

    def __post_init__(self):
        checks = [
            (self.n_orgs >= 1, "fed.n_orgs", "must be >= 1"),
            (self.epochs >= 1, "train.epochs", "must be >= 1"),
            (self.batch_size >= 1, "train.batch_size", "must be >= 1"),
            (self.alpha > 0, "train.alpha", "must be > 0"),
            (self.rounds >= 0, "train.rounds", "must be >= 0"),
            (0 < self.beta <= 1, "fed.beta", "must lie in (0, 1]"),
            (0 <= self.failure_prob < 1, "fed.failure_prob", "must lie in [0, 1)"),
            (self.aggregation in ("uniform", "weighted"), "fed.aggregation", "must be uniform or weighted"),
            (self.protocol in ("joint", "fedavg"), "fed.protocol", "must be joint or fedavg"),
            (self.eval_every >= 0, "train.eval_every", "must be >= 0"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(msg, key)
        if n_selected(self.n_orgs, self.beta) < 1:
            raise ConfigError("beta * n_orgs rounds below one participant", "fed.beta")


@dataclass
class ModelUpdate:
    org_id: int
    round: int
    params: np.ndarray
    n_samples: int
    bytes: int = 0


@dataclass
class RoundReport:
    round: int
    n_orgs: int
    volunteers: list[int]
    participants: list[int]
    dropped: list[int]
    bytes_up: int
    bytes_down: int
    messages: int
    global_loss: float = math.nan
    global_mae: float = math.nan
    stalled: bool = False
    wall_time: float = 0.0

    @property
    def completed(self) -> list[int]:
        return [o for o in self.participants if o not in set(self.dropped)]


@dataclass
class CommLedger:
    up: list[int] = field(default_factory=list)
    down: list[int] = field(default_factory=list)
    messages: int = 0

    @classmethod
    def from_reports(cls, reports: Sequence[RoundReport]) -> "CommLedger":
        return cls([r.bytes_up for r in reports], [r.bytes_down for r in reports], sum(r.messages for r in reports))

    @property
    def cumulative(self) -> list[int]:
        return np.cumsum([u + d for u, d in zip(self.up, self.down)], dtype=np.int64).tolist()

    @property
    def total_up(self) -> int:
        return sum(self.up)

    @property
    def total_down(self) -> int:
        return sum(self.down)


# ---------------------------------------------------------------- wire format


def message_bytes(n_params: int) -> int:
    return 8 * n_params + HEADER_BYTES


def encode_update(params: np.ndarray, org_id: int = -1, round_: int = 0, n_samples: int = 0) -> bytes:
    """Serialize a parameter vector for transport.

    This is where parameter encryption would be applied; the payload is
    currently the raw little-endian float64 vector behind a 64-byte header.
    """
    head = _HEADER.pack(_MAGIC, 1, org_id, round_, n_samples, params.size)
    return head.ljust(HEADER_BYTES, b"\x00") + np.ascontiguousarray(params, dtype="<f8").tobytes()


def decode_update(blob: bytes) -> tuple[dict, np.ndarray]:
    magic, version, org_id, round_, n_samples, n = _HEADER.unpack_from(blob)
    if magic != _MAGIC or len(blob) != message_bytes(n):
        raise AggregationError("malformed parameter message")
    params = np.frombuffer(blob, dtype="<f8", offset=HEADER_BYTES).astype(np.float64)
    return {"org_id": org_id, "round": round_, "n_samples": n_samples, "version": version}, params


# ---------------------------------------------------------------- protocol phases


def check_in(orgs: Sequence, round_: int, seed: int, failure_prob: float) -> list:
    """Phase 1: each organization independently refuses with ``failure_prob``."""
    if not orgs:
        raise ValueError("no organizations")
    return [o for o in orgs if _uniform(seed, _CHECKIN, round_, _oid(o)).random() >= failure_prob]


def n_selected(n_volunteers: int, beta: float) -> int:
    k = int((Decimal(repr(beta)) * n_volunteers).to_integral_value(rounding=ROUND_HALF_UP))
    return max(1, min(k, n_volunteers))


def select_participants(volunteers: Sequence, beta: float, seed: int, round_: int) -> list:
    """Phase 2: draw ``max(1, round_half_up(beta * n))`` volunteers uniformly.

    Returned in ascending organization id order.
    """
    if not volunteers:
        raise ValueError("no volunteers")
    if not 0 < beta <= 1:
        raise ConfigError("must lie in (0, 1]", "fed.beta")
    k = n_selected(len(volunteers), beta)
    idx = _uniform(seed, _SELECT, round_).choice(len(volunteers), size=k, replace=False)
    return sorted((volunteers[i] for i in idx), key=_oid)


def drops_mid_round(org_id: int, round_: int, seed: int, failure_prob: float) -> bool:
    return bool(_uniform(seed, _DROP, round_, org_id).random() < failure_prob)


def _oid(o) -> int:
    return o.org_id if isinstance(o, Organization) else int(o)


@dataclass
class RoundPlan:
    volunteers: list[int]
    participants: list[int]
    dropped: list[int]

    @property
    def completed(self) -> list[int]:
        gone = set(self.dropped)
        return [o for o in self.participants if o not in gone]


def plan_round(org_ids: Sequence[int], cfg: FederationConfig, round_: int) -> RoundPlan:
    """Who checks in, who is selected, and who drops out mid-round."""
    volunteers = check_in(list(org_ids), round_, cfg.seed, cfg.failure_prob)
    if not volunteers:
        return RoundPlan([], [], [])
    if cfg.protocol == "fedavg":
        participants = sorted(volunteers)
    else:
        participants = select_participants(volunteers, cfg.beta, cfg.seed, round_)
    dropped = [o for o in participants if drops_mid_round(o, round_, cfg.seed, cfg.failure_prob)]
    return RoundPlan(volunteers, participants, dropped)


# ---------------------------------------------------------------- aggregation


def aggregate(updates: Sequence[ModelUpdate], mode: str = "uniform") -> np.ndarray:
    """Average update vectors, in ascending org order.

    ``weighted`` weighs by sample count. Counts are reduced by their gcd
    first, so equal counts reproduce the uniform mean bit for bit; the sum
    is taken as offsets from the first vector so identical updates come
    back unchanged.
    """
    if not updates:
        raise AggregationError("no updates to aggregate")
    if mode not in ("uniform", "weighted"):
        raise ConfigError(f"unknown aggregation mode {mode!r}", "fed.aggregation")
    updates = sorted(updates, key=lambda u: u.org_id)
    n = updates[0].params.size
    if any(u.params.size != n for u in updates):
        raise AggregationError("updates differ in parameter count")
    if mode == "weighted":
        counts = [int(u.n_samples) for u in updates]
        if min(counts) < 1:
            raise AggregationError("sample-weighted aggregation needs n_samples >= 1")
        g = math.gcd(*counts)
        weights = [c // g for c in counts]
    else:
        weights = [1] * len(updates)
    base = updates[0].params
    acc = np.zeros(n)
    for w, u in zip(weights, updates):
        d = u.params - base
        acc += d if w == 1 else w * d
    return base + acc / sum(weights)


# ---------------------------------------------------------------- rounds


Evaluator = Callable[[GruNetwork], "tuple[float, float]"]


def run_round(global_net: GruNetwork, orgs: Sequence[Organization], cfg: FederationConfig, round_: int, evaluate: Evaluator | None = None):
    """One protocol round: check-in, selection and broadcast, local
    training, aggregation over the uploads that arrived."""
    t0 = time.perf_counter()
    by_id = {o.org_id: o for o in orgs}
    plan = plan_round(sorted(by_id), cfg, round_)
    size = message_bytes(global_net.params.size)
    broadcast = encode_update(global_net.params, -1, round_)
    updates = []
    for oid in plan.completed:
        org = by_id[oid]
        _, start = decode_update(broadcast)
        local, _ = train_epochs(
            global_net.like(start), org.samples.x, org.samples.y, cfg.epochs, cfg.batch_size, cfg.alpha, cfg.loss,
            train_key(cfg.seed, round_, oid),
        )
        blob = encode_update(local.params, oid, round_, org.n_samples)
        head, params = decode_update(blob)
        updates.append(ModelUpdate(oid, round_, params, head["n_samples"], len(blob)))

    stalled = not updates
    if stalled:
        new_net = global_net.copy()
        if plan.volunteers:
            log.warning("round %d: every selected organization dropped; global model unchanged", round_)
        else:
            log.warning("round %d: no organization checked in; round skipped", round_)
    else:
        new_net = global_net.like(aggregate(updates, cfg.aggregation))

    report = RoundReport(
        round=round_,
        n_orgs=len(by_id),
        volunteers=plan.volunteers,
        participants=plan.participants,
        dropped=plan.dropped,
        bytes_up=sum(u.bytes for u in updates),
        bytes_down=size * len(plan.participants),
        messages=len(plan.participants) + len(updates),
        stalled=stalled,
    )
    if evaluate is not None:
        report.global_loss, report.global_mae = evaluate(new_net)
    report.wall_time = time.perf_counter() - t0
    return new_net, report


def _should_eval(cfg, round_):
    return cfg.eval_every > 0 and (round_ % cfg.eval_every == 0 or round_ == cfg.rounds)


def run_federated_training(cfg: FederationConfig, orgs: Sequence[Organization], init_net: GruNetwork, evaluate: Evaluator | None = None):
    """T rounds of :func:`run_round`; returns the final model and the reports."""
    ids = [o.org_id for o in orgs]
    if len(set(ids)) != len(ids):
        raise ConfigError("organization ids must be unique", "fed.n_orgs")
    net = init_net.copy()
    reports = []
    for round_ in range(1, cfg.rounds + 1):
        net, rep = run_round(net, orgs, cfg, round_, evaluate if _should_eval(cfg, round_) else None)
        reports.append(rep)
        log.info("round %d: %d/%d uploads, mae=%.4f", round_, len(rep.completed), len(rep.participants), rep.global_mae)
    return net, reports


def run_centralized_training(cfg: FederationConfig, samples: WindowSet, init_net: GruNetwork, evaluate: Evaluator | None = None):
    """Pooled mini-batch SGD for ``cfg.rounds`` blocks of ``cfg.epochs`` epochs.

    Block ``t`` is seeded exactly like organization 0's local training in
    round ``t``, so a one-organization federation follows the same
    trajectory.
    """
    if len(samples) == 0:
        raise ValueError("empty dataset")
    net = init_net.copy()
    trace = []
    for round_ in range(1, cfg.rounds + 1):
        net, losses = train_epochs(
            net, samples.x, samples.y, cfg.epochs, cfg.batch_size, cfg.alpha, cfg.loss, train_key(cfg.seed, round_, 0)
        )
        row = {"round": round_, "train_loss": float(np.mean(losses)), "eval_loss": math.nan, "eval_mae": math.nan}
        if evaluate is not None and _should_eval(cfg, round_):
            row["eval_loss"], row["eval_mae"] = evaluate(net)
        trace.append(row)
    return net, trace


def simulate_ledger(cfg: FederationConfig, org_ids: Sequence[int], n_params: int) -> list[RoundReport]:
    """Protocol bookkeeping of a run without any training.

    Byte counts depend only on the seeded protocol draws, so this yields
    the same ledger a full run with ``cfg`` would.
    """
    size = message_bytes(n_params)
    out = []
    for round_ in range(1, cfg.rounds + 1):
        plan = plan_round(sorted(org_ids), cfg, round_)
        done = len(plan.completed)
        out.append(
            RoundReport(
                round_, len(org_ids), plan.volunteers, plan.participants, plan.dropped,
                size * done, size * len(plan.participants), len(plan.participants) + done, stalled=done == 0,
            )
        )
    return out


@dataclass(frozen=True)
class OverheadSummary:
    rounds: int
    total_up: int
    total_down: int
    mean_up: float
    mean_down: float
    reference_up: int | None = None
    reference_down: int | None = None
    uplink_reduction: float | None = None
    downlink_reduction: float | None = None
    total_reduction: float | None = None


def measure_overhead(reports: Sequence[RoundReport], reference: Sequence[RoundReport] | None = None) -> OverheadSummary:
    """Totals, per-round means and reductions relative to a beta=1 run."""
    if not reports:
        raise ValueError("no round reports")
    led = CommLedger.from_reports(reports)
    n = len(reports)
    kw = {}
    if reference is not None:
        if len(reference) != n or reference[0].n_orgs != reports[0].n_orgs:
            raise ConfigError("reference run differs in rounds or organization count", "fed")
        ref = CommLedger.from_reports(reference)

        def red(a, b):
            return 1.0 - a / b if b else None

        kw = dict(
            reference_up=ref.total_up,
            reference_down=ref.total_down,
            uplink_reduction=red(led.total_up, ref.total_up),
            downlink_reduction=red(led.total_down, ref.total_down),
            total_reduction=red(led.total_up + led.total_down, ref.total_up + ref.total_down),
        )
    return OverheadSummary(n, led.total_up, led.total_down, led.total_up / n, led.total_down / n, **kw)


def make_evaluator(samples: WindowSet, normalizer, cfg: FederationConfig) -> Evaluator:
    """Callable returning (loss, MAE in vehicles) of a network on ``samples``."""
    y = normalizer.inverse(samples.y)

    def evaluate(net):
        p = predict(samples.x, net)
        return loss(p, samples.y, net, cfg.loss), float(np.mean(np.abs(normalizer.inverse(p) - y)))

    return evaluate
