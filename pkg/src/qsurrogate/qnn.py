"""Quantile neural networks trained with the pinball loss.

Two output heads are supported:

``qnn``
    affine output layer, one node per quantile level.
``iqnn``
    node 1 is affine; nodes 2..K pass through a ReLU and are cumulatively
    summed onto node 1, so the emitted quantiles can never cross.

The networks are small (one hidden ReLU layer by default) and trained here
with plain numpy: forward pass, exact backpropagation, and Adam / Adagrad /
RMSprop updates.  Inputs and targets are affinely scaled for training; the
inverse target transform is applied exactly once, in :meth:`QuantileNetwork.forward`.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, Diverged, FormatError, KindMismatch
from .parallel import pmap

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
KINDS = ("qnn", "iqnn")
OPTIMIZERS = ("adam", "adagrad", "rmsprop")


def default_tau(n: int = 50, lo: float = 0.01, hi: float = 0.99) -> np.ndarray:
    return np.linspace(lo, hi, n)


def _relu(z):
    return np.maximum(z, 0.0)


@dataclass
class QuantileNetwork:
    kind: str
    weights: list            # W[l] with shape (n_l, n_{l-1})
    biases: list             # b[l] with shape (n_l,)
    tau: np.ndarray
    input_shift: np.ndarray
    input_scale: np.ndarray
    target_shift: float = 0.0
    target_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float).ravel() for b in self.biases]
        self.tau = np.asarray(self.tau, dtype=float)
        self.input_shift = np.asarray(self.input_shift, dtype=float)
        self.input_scale = np.asarray(self.input_scale, dtype=float)
        self.target_shift = float(self.target_shift)
        self.target_scale = float(self.target_scale)
        if np.any(self.tau <= 0) or np.any(self.tau >= 1) or np.any(np.diff(self.tau) <= 0):
            raise ValueError("tau must be strictly increasing inside (0, 1)")
        if np.any(self.input_scale == 0) or self.target_scale == 0:
            raise ValueError("scale factors must be nonzero")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias vector per weight matrix")
        prev = self.n_inputs
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or W.shape[1] != prev or b.shape != (W.shape[0],):
                raise DimensionMismatch("layer dimensions do not chain")
            prev = W.shape[0]
        if prev != len(self.tau):
            raise DimensionMismatch(f"output layer has {prev} nodes for {len(self.tau)} quantile levels")
        if self.input_shift.shape != (self.n_inputs,) or self.input_scale.shape != (self.n_inputs,):
            raise DimensionMismatch("input scaling must have one entry per feature")

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_quantiles(self) -> int:
        return len(self.tau)

    @property
    def n_hidden_layers(self) -> int:
        return len(self.weights) - 1

    @property
    def hidden_widths(self) -> list[int]:
        return [W.shape[0] for W in self.weights[:-1]]

    # -- inference --------------------------------------------------------
    def scale_inputs(self, x):
        return (np.asarray(x, dtype=float) - self.input_shift) / self.input_scale

    def output_preactivation(self, x):
        """Output-layer preactivations (scaled target units), batch-shaped."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.shape[1] != self.n_inputs:
            raise DimensionMismatch(f"expected {self.n_inputs} features, got {X.shape[1]}")
        a = self.scale_inputs(X)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = _relu(a @ W.T + b)
        z = a @ self.weights[-1].T + self.biases[-1]
        return z[0] if single else z

    def head(self, z):
        """Map output preactivations to scaled quantiles."""
        z = np.asarray(z, dtype=float)
        if self.kind == "qnn":
            return z
        inc = np.concatenate([z[..., :1], _relu(z[..., 1:])], axis=-1)
        return np.cumsum(inc, axis=-1)

    def forward(self, x):
        """Quantile estimates in original target units (``(K,)`` or ``(N, K)``)."""
        return self.target_shift + self.target_scale * self.head(self.output_preactivation(x))

    __call__ = forward

    def quantile_at(self, x, level: float):
        """Linear interpolation of the quantile grid at ``level``."""
        q = np.atleast_2d(self.forward(x))
        out = np.array([np.interp(level, self.tau, row) for row in q])
        return out[0] if np.asarray(x).ndim == 1 else out

    def copy(self) -> "QuantileNetwork":
        return QuantileNetwork(self.kind, [W.copy() for W in self.weights],
                               [b.copy() for b in self.biases], self.tau.copy(),
                               self.input_shift.copy(), self.input_scale.copy(),
                               self.target_shift, self.target_scale, dict(self.meta))

    # -- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        return {"schema": SCHEMA_VERSION, "kind": self.kind, "tau": self.tau.tolist(),
                "layers": [{"weights": W.tolist(), "biases": b.tolist()}
                           for W, b in zip(self.weights, self.biases)],
                "input_shift": self.input_shift.tolist(), "input_scale": self.input_scale.tolist(),
                "target_shift": self.target_shift, "target_scale": self.target_scale,
                "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantileNetwork":
        if d.get("schema") != SCHEMA_VERSION:
            raise FormatError(f"unsupported network schema {d.get('schema')!r}")
        try:
            arrays = [np.asarray(layer["weights"], dtype=float) for layer in d["layers"]]
            arrays += [np.asarray(layer["biases"], dtype=float) for layer in d["layers"]]
            arrays += [np.asarray(d[k], dtype=float) for k in
                       ("tau", "input_shift", "input_scale", "target_shift", "target_scale")]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed network file: {exc}") from exc
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise FormatError("network file contains non-finite numbers")
        try:
            return cls(d["kind"], [l["weights"] for l in d["layers"]], [l["biases"] for l in d["layers"]],
                       d["tau"], d["input_shift"], d["input_scale"], d["target_shift"],
                       d["target_scale"], d.get("meta", {}))
        except (ValueError, DimensionMismatch) as exc:
            raise FormatError(f"inconsistent network file: {exc}") from exc


def save_network(net: QuantileNetwork, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict()), encoding="utf-8")


def load_network(path, expected_kind: str | None = None) -> QuantileNetwork:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    net = QuantileNetwork.from_dict(d)
    if expected_kind is not None and net.kind != expected_kind:
        raise KindMismatch(f"{path} holds a {net.kind} network, expected {expected_kind}")
    return net


# -- loss ------------------------------------------------------------------------

def pinball_loss(pred, target, tau) -> float:
    """Mean pinball loss over samples and quantile levels.

    ``pred`` is ``(N, K)``, ``target`` is ``(N,)`` and ``tau`` is ``(K,)``.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    target = np.asarray(target, dtype=float).ravel()
    tau = np.asarray(tau, dtype=float).ravel()
    if pred.shape != (len(target), len(tau)):
        raise DimensionMismatch(f"pred shape {pred.shape} does not match ({len(target)}, {len(tau)})")
    err = target[:, None] - pred
    return float(np.mean(np.where(err >= 0, tau * err, (tau - 1.0) * err)))


def _pinball_grad(pred, target, tau):
    """d loss / d pred for the mean pinball loss (subgradient ``-tau`` at zero error)."""
    err = target[:, None] - pred
    return np.where(err >= 0, -tau, 1.0 - tau) / pred.size


# -- gradients -------------------------------------------------------------------

def loss_and_grads(weights, biases, kind, X, y, tau, masks=None):
    """Pinball loss and its gradients for scaled inputs ``X`` and targets ``y``.

    ``masks`` (one per hidden layer) are multiplied onto the hidden
    activations; pass ``None`` for inference behaviour.
    """
    acts, pre = [X], []
    a = X
    n_hidden = len(weights) - 1
    for l in range(n_hidden):
        z = a @ weights[l].T + biases[l]
        pre.append(z)
        a = _relu(z)
        if masks is not None:
            a = a * masks[l]
        acts.append(a)
    z_out = a @ weights[-1].T + biases[-1]
    if kind == "qnn":
        q = z_out
    else:
        q = np.cumsum(np.concatenate([z_out[:, :1], _relu(z_out[:, 1:])], axis=1), axis=1)
    loss = pinball_loss(q, y, tau)

    g = _pinball_grad(q, y, tau)
    if kind == "iqnn":
        g = np.cumsum(g[:, ::-1], axis=1)[:, ::-1]
        g[:, 1:] *= (z_out[:, 1:] > 0)
    gW = [None] * len(weights)
    gb = [None] * len(weights)
    gW[-1] = g.T @ acts[-1]
    gb[-1] = g.sum(axis=0)
    delta = g @ weights[-1]
    for l in range(n_hidden - 1, -1, -1):
        if masks is not None:
            delta = delta * masks[l]
        delta = delta * (pre[l] > 0)
        gW[l] = delta.T @ acts[l]
        gb[l] = delta.sum(axis=0)
        delta = delta @ weights[l]
    return loss, gW, gb


# -- optimisers ------------------------------------------------------------------

class _Optimizer:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr
        self.t = 0

    def step(self, grads):
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            p -= self._update(i, g)


class Adam(_Optimizer):
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def _update(self, i, g):
        self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
        self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
        m_hat = self.m[i] / (1 - self.b1 ** self.t)
        v_hat = self.v[i] / (1 - self.b2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Adagrad(_Optimizer):
    def __init__(self, params, lr, eps=1e-10):
        super().__init__(params, lr)
        self.eps = eps
        self.s = [np.zeros_like(p) for p in params]

    def _update(self, i, g):
        self.s[i] += g * g
        return self.lr * g / (np.sqrt(self.s[i]) + self.eps)


class RMSprop(_Optimizer):
    def __init__(self, params, lr, decay=0.99, eps=1e-8):
        super().__init__(params, lr)
        self.decay, self.eps = decay, eps
        self.s = [np.zeros_like(p) for p in params]

    def _update(self, i, g):
        self.s[i] = self.decay * self.s[i] + (1 - self.decay) * g * g
        return self.lr * g / (np.sqrt(self.s[i]) + self.eps)


_OPTIMIZERS = {"adam": Adam, "adagrad": Adagrad, "rmsprop": RMSprop}


# -- training --------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    dropout: float = 0.0
    epochs: int = 300
    hidden_width: int = 64
    seed: int = 0
    validation_fraction: float = 0.2
    n_hidden_layers: int = 1
    patience: int | None = 30
    n_quantiles: int = 50

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0.0 <= self.dropout <= 0.30:
            raise ValueError("dropout must lie in [0, 0.30]")
        if not 0.0 < self.validation_fraction <= 0.5:
            raise ValueError("validation_fraction must lie in (0, 0.5]")
        if self.batch_size < 1 or self.hidden_width < 1 or self.epochs < 1 or self.n_hidden_layers < 0:
            raise ValueError("batch size, width and epochs must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainReport:
    final_train_loss: float
    final_validation_loss: float
    best_epoch: int
    loss_curve: list
    config: TrainConfig

    def to_dict(self):
        return asdict(self)


def _input_scaling(dataset):
    lower, upper = np.asarray(dataset.lower, dtype=float), np.asarray(dataset.upper, dtype=float)
    binary = np.asarray(dataset.binary, dtype=bool)
    shift = np.where(binary, 0.0, lower)
    width = upper - lower
    scale = np.where(binary | (width <= 0) | ~np.isfinite(width), 1.0, width)
    return shift, scale


def init_params(sizes, rng):
    """Uniform fan-in initialisation ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, fan_out))
    return weights, biases


def output_bias_init(kind, ys, tau, floor=1e-3):
    """Output biases that start the head at the unconditional quantiles of ``ys``.

    For the incremental head every increment starts strictly positive, so no
    increment neuron begins dead (a ReLU with zero gradient never recovers).
    """
    q = np.quantile(ys, tau)
    if kind == "qnn":
        return q
    return np.concatenate([q[:1], np.maximum(np.diff(q), floor)])


def split_indices(n, validation_fraction, rng):
    perm = rng.permutation(n)
    n_val = max(1, int(round(validation_fraction * n))) if n > 1 else 0
    return perm[n_val:], perm[:n_val]


def train(dataset, kind: str, config: TrainConfig | None = None, tau=None):
    """Fit a quantile network to ``dataset`` (anything with ``X``, ``y``,
    ``lower``, ``upper`` and ``binary``).

    Returns ``(network, report)``; the network is the snapshot with the lowest
    validation loss.
    """
    config = config or TrainConfig()
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    X = np.asarray(dataset.X, dtype=float)
    y = np.asarray(dataset.y, dtype=float)
    if len(y) == 0:
        raise ValueError("dataset is empty")
    tau = default_tau(config.n_quantiles) if tau is None else np.asarray(tau, dtype=float)
    rng = np.random.default_rng(config.seed)

    train_idx, val_idx = split_indices(len(y), config.validation_fraction, rng)
    if len(val_idx) == 0:
        val_idx = train_idx
    in_shift, in_scale = _input_scaling(dataset)
    t_shift = float(np.mean(y[train_idx]))
    t_scale = float(np.std(y[train_idx]))
    if not t_scale > 0:
        t_scale = 1.0
    Xs = (X - in_shift) / in_scale
    ys = (y - t_shift) / t_scale

    sizes = [X.shape[1]] + [config.hidden_width] * config.n_hidden_layers + [len(tau)]
    weights, biases = init_params(sizes, rng)
    # the head starts at the unconditional quantiles; hidden features are learned from there
    weights[-1][:] = 0.0
    biases[-1] = output_bias_init(kind, ys[train_idx], tau)
    opt = _OPTIMIZERS[config.optimizer](weights + biases, config.learning_rate)
    n_hidden = len(weights) - 1
    keep = 1.0 - config.dropout

    def val_loss():
        return loss_and_grads(weights, biases, kind, Xs[val_idx], ys[val_idx], tau)[0]

    best = (math.inf, -1, None)
    curve = []
    last_train = math.nan
    for epoch in range(config.epochs):
        order = rng.permutation(train_idx)
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            masks = None
            if config.dropout > 0:
                masks = [(rng.random((len(batch), config.hidden_width)) < keep) / keep
                         for _ in range(n_hidden)]
            loss, gW, gb = loss_and_grads(weights, biases, kind, Xs[batch], ys[batch], tau, masks)
            if not math.isfinite(loss):
                raise Diverged(epoch)
            opt.step(gW + gb)
            total += loss * len(batch)
            count += len(batch)
        last_train = total / count * t_scale
        vl = val_loss() * t_scale
        if not math.isfinite(vl):
            raise Diverged(epoch)
        curve.append(vl)
        if vl < best[0] - 1e-12:
            best = (vl, epoch, ([W.copy() for W in weights], [b.copy() for b in biases]))
        elif config.patience is not None and epoch - best[1] >= config.patience:
            break

    best_W, best_b = best[2]
    net = QuantileNetwork(kind, best_W, best_b, tau, in_shift, in_scale, t_shift, t_scale,
                          meta={"problem_name": getattr(dataset, "problem_name", None),
                                "train_config": asdict(config)})
    report = TrainReport(last_train, best[0], best[1], curve, config)
    return net, report


def evaluate_loss(net: QuantileNetwork, X, y) -> float:
    """Pinball loss of ``net`` in original target units."""
    return pinball_loss(net.forward(np.atleast_2d(X)), y, net.tau)


# -- hyper-parameter search ------------------------------------------------------

BATCH_SIZES = (64, 128, 256, 512)
WIDTHS = (32, 64, 128, 256)
LR_RANGE = (1e-5, 1e-1)
DROPOUT_RANGE = (0.0, 0.30)


def sample_config(rng: np.random.Generator, epochs: int = 300, seed: int = 0, **overrides) -> TrainConfig:
    """One random draw from the search space (learning rate and dropout uniform)."""
    cfg = TrainConfig(batch_size=int(rng.choice(BATCH_SIZES)),
                      learning_rate=float(rng.uniform(*LR_RANGE)),
                      optimizer=str(rng.choice(OPTIMIZERS)),
                      dropout=float(rng.uniform(*DROPOUT_RANGE)),
                      epochs=epochs, hidden_width=int(rng.choice(WIDTHS)), seed=seed)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class SearchResult:
    network: QuantileNetwork
    config: TrainConfig
    report: TrainReport
    trials: list            # (config, validation loss or None if failed)


def _run_trial(dataset, kind, tau, config):
    try:
        net, report = train(dataset, kind, config, tau)
    except Diverged as exc:
        log.warning("trial %s diverged at epoch %d", config, exc.epoch)
        return None
    return net, report


def hyperparameter_search(dataset, kind: str, n_trials: int, seed: int, epochs: int = 300,
                          workers: int = 1, tau=None, **overrides) -> SearchResult:
    """Random search; returns the trial with the lowest validation loss.

    All trials share the same train/validation split (the split is drawn from
    the trial seed, which is fixed to ``seed``); the configuration draws come
    from a generator seeded by ``seed`` as well.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919]))
    configs = [sample_config(rng, epochs=epochs, seed=seed, **overrides) for _ in range(n_trials)]
    outcomes = pmap(partial(_run_trial, dataset, kind, tau), configs, workers)
    trials = [(cfg, None if out is None else out[1].final_validation_loss)
              for cfg, out in zip(configs, outcomes)]
    ok = [i for i, out in enumerate(outcomes) if out is not None]
    if not ok:
        raise Diverged(-1, "every hyper-parameter trial diverged")
    best = min(ok, key=lambda i: (outcomes[i][1].final_validation_loss, i))
    net, report = outcomes[best]
    return SearchResult(net, configs[best], report, trials)
