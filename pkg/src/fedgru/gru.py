"""Stacked GRU regressor written directly in NumPy.

Cell update, per layer and time step::

    z  = sigmoid(W_z x + U_z h + b_z)
    r  = sigmoid(W_r x + U_r h + b_r)
    h' = tanh(W_h x + r * (U_h h) + b_h)
    h  = z * h_prev + (1 - z) * h'

Note the blend: ``z`` keeps the *previous* state. Some references swap
``z`` and ``1 - z``; numeric fixtures in the tests depend on this choice.

All parameters of a network live in one flat float64 vector. The canonical
order is, per layer, ``W_z, U_z, b_z, W_r, U_r, b_r, W_h, U_h, b_h``
(matrices row-major, shape hidden x input / hidden x hidden), followed by
``head_w`` and ``head_b``. The per-matrix attributes are views into it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CheckpointError, EmptyInputError, NumericError

LAYER_FIELDS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")
CHECKPOINT_FORMAT = "fedgru-checkpoint"
CHECKPOINT_VERSION = 1


def _sigmoid(a):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-a))


def layer_shapes(input_size: int, hidden: int) -> list[tuple[int, ...]]:
    w, u, b = (hidden, input_size), (hidden, hidden), (hidden,)
    return [w, u, b] * 3


def param_shapes(input_size: int, hidden_sizes: Sequence[int]) -> list[tuple[int, ...]]:
    shapes = []
    prev = input_size
    for h in hidden_sizes:
        shapes += layer_shapes(prev, h)
        prev = h
    return shapes + [(prev,), ()]


def param_count(input_size: int, hidden_sizes: Sequence[int]) -> int:
    return sum(math.prod(s) for s in param_shapes(input_size, hidden_sizes))


@dataclass
class GruLayerParams:
    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    W_h: np.ndarray
    U_h: np.ndarray
    b_h: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.U_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]


class GruNetwork:
    """Layered GRU plus a linear head on the last layer's final state.

    Also serves as the container for gradients, which share its shapes.
    """

    def __init__(self, input_size: int, hidden_sizes: Sequence[int], params: np.ndarray | None = None):
        hidden_sizes = tuple(int(h) for h in hidden_sizes)
        if input_size < 1 or not hidden_sizes or min(hidden_sizes) < 1:
            raise ValueError("input_size and every hidden size must be >= 1")
        self.input_size = int(input_size)
        self.hidden_sizes = hidden_sizes
        n = param_count(self.input_size, hidden_sizes)
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"parameter vector has length {params.size}, expected {n}")
        self.params = params
        views = []
        offset = 0
        for shape in param_shapes(self.input_size, hidden_sizes):
            size = math.prod(shape)
            views.append(params[offset:offset + size].reshape(shape))
            offset += size
        self.layers = [GruLayerParams(*views[9 * i:9 * i + 9]) for i in range(len(hidden_sizes))]
        self.head_w = views[-2]
        self._head_b = views[-1]

    @property
    def head_b(self) -> float:
        return float(self._head_b)

    @head_b.setter
    def head_b(self, value: float) -> None:
        self._head_b[...] = value

    def like(self, params: np.ndarray) -> "GruNetwork":
        return GruNetwork(self.input_size, self.hidden_sizes, params)

    def copy(self) -> "GruNetwork":
        return self.like(self.params.copy())

    def weight_mask(self) -> np.ndarray:
        """True for weight entries, False for biases (regularizer support)."""
        shapes = param_shapes(self.input_size, self.hidden_sizes)
        head_w = len(shapes) - 2
        parts = [np.full(math.prod(s), len(s) == 2 or i == head_w) for i, s in enumerate(shapes)]
        return np.concatenate(parts)

    def __eq__(self, other):
        return (
            isinstance(other, GruNetwork)
            and self.input_size == other.input_size
            and self.hidden_sizes == other.hidden_sizes
            and np.array_equal(self.params, other.params)
        )

    def __repr__(self):
        return f"GruNetwork(input_size={self.input_size}, hidden_sizes={list(self.hidden_sizes)})"


Gradients = GruNetwork


def init_network(input_size: int, hidden_sizes: Sequence[int], seed: int) -> GruNetwork:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    net = GruNetwork(input_size, hidden_sizes)
    rng = np.random.default_rng(seed)
    mats = [m for layer in net.layers for m in (layer.W_z, layer.U_z, layer.W_r, layer.U_r, layer.W_h, layer.U_h)]
    for m in mats:
        a = math.sqrt(6.0 / (m.shape[0] + m.shape[1]))
        m[...] = rng.uniform(-a, a, size=m.shape)
    a = math.sqrt(6.0 / (net.head_w.size + 1))
    net.head_w[...] = rng.uniform(-a, a, size=net.head_w.shape)
    return net


def flatten(net: GruNetwork) -> np.ndarray:
    return net.params.copy()


def unflatten(vector, input_size: int, hidden_sizes: Sequence[int]) -> GruNetwork:
    return GruNetwork(input_size, hidden_sizes, np.array(vector, dtype=np.float64))


# ---------------------------------------------------------------- forward


@dataclass
class CellCache:
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    h_cand: np.ndarray
    uh: np.ndarray  # U_h h_prev, needed for the reset-gate gradient
    h: np.ndarray


def _stacked(p: GruLayerParams):
    return np.concatenate([p.W_z, p.W_r, p.W_h]), np.concatenate([p.U_z, p.U_r, p.U_h]), np.concatenate([p.b_z, p.b_r, p.b_h])


def _step(xwb, h_prev, U_all, H):
    """``xwb`` is the input projection plus biases for all three gates."""
    hu = h_prev @ U_all.T
    zr = _sigmoid(xwb[..., :2 * H] + hu[..., :2 * H])
    z, r = zr[..., :H], zr[..., H:]
    uh = hu[..., 2 * H:]
    h_cand = np.tanh(xwb[..., 2 * H:] + r * uh)
    h = h_cand + z * (h_prev - h_cand)
    return z, r, uh, h_cand, h


def cell_forward(x_t, h_prev, params: GruLayerParams):
    """One GRU step. Accepts single vectors or row-batched matrices."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x_t.shape[-1] != params.input_size or h_prev.shape[-1] != params.hidden_size:
        raise ValueError(
            f"shape mismatch: x {x_t.shape}, h {h_prev.shape} for layer "
            f"({params.hidden_size} x {params.input_size})"
        )
    W, U, b = _stacked(params)
    z, r, uh, h_cand, h = _step(x_t @ W.T + b, h_prev, U, params.hidden_size)
    return h, CellCache(x_t, h_prev, z, r, h_cand, uh, h)


@dataclass
class LayerCache:
    """Time-major record of one layer's forward pass."""

    inputs: np.ndarray  # (T, B, in)
    hs: np.ndarray  # (T+1, B, H); hs[0] is the zero initial state
    z: np.ndarray  # (T, B, H)
    r: np.ndarray
    h_cand: np.ndarray
    uh: np.ndarray  # U_h h_prev, needed for the reset-gate gradient


@dataclass
class ForwardCache:
    layers: list[LayerCache]
    preds: np.ndarray

    def step(self, t: int, layer: int, row: int = 0) -> CellCache:
        lc = self.layers[layer]
        return CellCache(
            lc.inputs[t, row], lc.hs[t, row], lc.z[t, row], lc.r[t, row], lc.h_cand[t, row], lc.uh[t, row], lc.hs[t + 1, row]
        )


def forward_batch(x, net: GruNetwork):
    """Predictions for a (B, T) batch of scalar windows, plus the cache.

    A (B, T, input_size) array is accepted for multi-feature inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim == 2:
        x = x[:, :, None]
    if x.shape[2] != net.input_size:
        raise ValueError(f"input feature size {x.shape[2]} != network input size {net.input_size}")
    B, T, _ = x.shape
    caches = []
    inp = np.ascontiguousarray(x.transpose(1, 0, 2))
    for p in net.layers:
        H = p.hidden_size
        W, U, b = _stacked(p)
        xwb = inp @ W.T + b  # (T, B, 3H)
        hs = np.zeros((T + 1, B, H))
        zs, rs, hcs, uhs = (np.empty((T, B, H)) for _ in range(4))
        for t in range(T):
            zs[t], rs[t], uhs[t], hcs[t], hs[t + 1] = _step(xwb[t], hs[t], U, H)
        caches.append(LayerCache(inp, hs, zs, rs, hcs, uhs))
        inp = hs[1:]
    preds = inp[-1] @ net.head_w + net.head_b
    return preds, ForwardCache(caches, preds)


def forward(window, net: GruNetwork):
    """Prediction for a single window of ``r`` scalar inputs."""
    preds, cache = forward_batch(np.asarray(window, dtype=np.float64)[None, :], net)
    return float(preds[0]), cache


def predict(x, net: GruNetwork, chunk: int = 8192) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return np.zeros(0)
    return np.concatenate([forward_batch(x[i:i + chunk], net)[0] for i in range(0, len(x), chunk)])


# ---------------------------------------------------------------- loss / gradients


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.0
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0 or None")


def loss(preds, targets, net: GruNetwork, cfg: LossConfig = LossConfig()) -> float:
    """Mean half squared error plus ``lam * 0.5 * ||weights||^2`` (biases excluded)."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError("predictions and targets differ in shape")
    if preds.size == 0:
        raise EmptyInputError("empty batch")
    err = preds - targets
    value = 0.5 * float(np.mean(err * err))
    if cfg.lam:
        w = net.params[net.weight_mask()]
        value += cfg.lam * 0.5 * float(w @ w)
    return value


def backward(cache: ForwardCache, targets, net: GruNetwork, cfg: LossConfig = LossConfig()) -> GruNetwork:
    """Exact batch-averaged gradient of :func:`loss` by backpropagation through time."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != cache.preds.shape:
        raise ValueError(f"cache holds {cache.preds.shape[0]} predictions but {targets.size} targets were given")
    grad = GruNetwork(net.input_size, net.hidden_sizes)
    B = targets.size
    dpred = (cache.preds - targets) / B
    top = cache.layers[-1]
    grad.head_w[...] = top.hs[-1].T @ dpred
    grad.head_b = float(dpred.sum())

    # gradient flowing into the current layer's outputs h_1..h_T
    dout = np.zeros_like(top.hs[1:])
    dout[-1] = np.outer(dpred, net.head_w)
    for p, g, lc in zip(reversed(net.layers), reversed(grad.layers), reversed(cache.layers)):
        T = lc.z.shape[0]
        H = p.hidden_size
        W, U, _ = _stacked(p)
        da = np.empty((T, B, 3 * H))  # pre-activation grads seen by W and b
        du = np.empty((T, B, 3 * H))  # the same for U; candidate part carries the reset gate
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dh + dout[t]
            z, r, hc, uh = lc.z[t], lc.r[t], lc.h_cand[t], lc.uh[t]
            da_t, du_t = da[t], du[t]
            da_h = dh * (1.0 - z) * (1.0 - hc * hc)
            dz = dh * (lc.hs[t] - hc) * z * (1.0 - z)
            du_t[:, :H] = da_t[:, :H] = dz
            du_t[:, H:2 * H] = da_t[:, H:2 * H] = da_h * uh * r * (1.0 - r)
            da_t[:, 2 * H:] = da_h
            du_t[:, 2 * H:] = da_h * r
            dh = dh * z + du_t @ U
        flat_da = da.reshape(T * B, 3 * H)
        dW = flat_da.T @ lc.inputs.reshape(T * B, -1)
        dU = du.reshape(T * B, 3 * H).T @ lc.hs[:-1].reshape(T * B, H)
        db = flat_da.sum(axis=0)
        for k in range(3):
            sl = slice(k * H, (k + 1) * H)
            w_name, u_name, b_name = LAYER_FIELDS[3 * k:3 * k + 3]
            getattr(g, w_name)[...] = dW[sl]
            getattr(g, u_name)[...] = dU[sl]
            getattr(g, b_name)[...] = db[sl]
        dout = da @ W  # gradient w.r.t. the layer below's outputs

    if cfg.lam:
        mask = net.weight_mask()
        grad.params[mask] += cfg.lam * net.params[mask]
    if cfg.clip_norm is not None:
        norm = float(np.linalg.norm(grad.params))
        if norm > cfg.clip_norm:
            grad.params *= cfg.clip_norm / norm
    if not np.all(np.isfinite(grad.params)):
        raise NumericError("non-finite gradient")
    return grad


def sgd_step(net: GruNetwork, grads: GruNetwork, alpha: float) -> GruNetwork:
    if grads.params.shape != net.params.shape:
        raise ValueError("gradient shape does not match network")
    return net.like(net.params - alpha * grads.params)


def epoch_rng(seed_key, epoch: int) -> np.random.Generator:
    key = list(seed_key) if isinstance(seed_key, (tuple, list)) else [seed_key]
    return np.random.default_rng(key + [epoch])


def train_epochs(net, x, y, epochs, batch_size, alpha, cfg=LossConfig(), seed=0):
    """Mini-batch SGD; returns the new network and the mean batch loss per epoch.

    Samples are reshuffled once per epoch with a generator keyed on
    ``(seed..., epoch)``; the last batch of an epoch may be short.
    """
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch size must be >= 1")
    if len(y) == 0:
        raise EmptyInputError("no training samples")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    params = net.params.copy()
    work = net.like(params)
    trace = []
    for epoch in range(epochs):
        order = epoch_rng(seed, epoch).permutation(len(y))
        total = 0.0
        nb = 0
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            preds, cache = forward_batch(x[idx], work)
            total += loss(preds, y[idx], work, cfg)
            nb += 1
            g = backward(cache, y[idx], work, cfg)
            params -= alpha * g.params
        if not np.all(np.isfinite(params)):
            raise NumericError(f"parameters diverged in epoch {epoch}")
        trace.append(total / nb)
    return work, trace


def local_update(net, samples, epochs, batch_size, alpha, cfg=LossConfig(), seed=0) -> GruNetwork:
    """E epochs of mini-batch SGD on one organization's samples.

    ``samples`` is a :class:`~fedgru.data.WindowSet` (or any object with
    ``x`` and ``y`` arrays). ``seed`` may be an int or a tuple of ints.
    """
    return train_epochs(net, samples.x, samples.y, epochs, batch_size, alpha, cfg, seed)[0]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, members: Sequence[GruNetwork], normalizer, r: int, s: int, meta: dict | None = None) -> None:
    """Write a versioned JSON checkpoint; floats round-trip exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "window": {"r": r, "s": s},
        "normalizer": {"min": normalizer.min, "max": normalizer.max},
        "members": [
            {"input_size": m.input_size, "hidden_sizes": list(m.hidden_sizes), "params": m.params.tolist()}
            for m in members
        ],
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


@dataclass
class Checkpoint:
    members: list[GruNetwork]
    normalizer: object
    r: int
    s: int
    meta: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    from .data import Normalizer

    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(
            f"{path}: corrupted checkpoint (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} JSON): {exc}"
        ) from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {doc.get('version')!r} (this build reads v{CHECKPOINT_VERSION})"
        )
    try:
        members = [GruNetwork(m["input_size"], m["hidden_sizes"], np.array(m["params"], dtype=np.float64)) for m in doc["members"]]
        norm = Normalizer(float(doc["normalizer"]["min"]), float(doc["normalizer"]["max"]))
        r, s = int(doc["window"]["r"]), int(doc["window"]["s"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed v{CHECKPOINT_VERSION} checkpoint: {exc}") from None
    if not members:
        raise CheckpointError(f"{path}: checkpoint holds no models")
    return Checkpoint(members, norm, r, s, doc.get("meta", {}))
