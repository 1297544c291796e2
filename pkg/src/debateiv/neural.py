"""Fully-connected ReLU networks for nuisance regression, written on numpy.

Architecture per hidden layer: affine map, rectifier, then (optionally) batch
normalization of the rectified output. The output layer is affine followed by
one of four activations. First-layer products accept ``scipy.sparse`` input.

Conventions fixed here:

* initialization: weights uniform on ``±sqrt(6/fan_in)``, biases zero,
  batch-norm scale one and shift zero;
* weight decay is a loss penalty ``0.5 * lambda * sum ||W||^2`` on the weight
  matrices only (biases and batch-norm parameters are not penalized);
* batch-norm running moments are exponential averages with momentum 0.1,
  bias-corrected for the number of updates (the first update replaces the
  initial values); the running variance uses the unbiased batch variance;
* reported losses are data losses without the penalty, computed in eval mode.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from .errors import ConfigurationError, NumericalFailure

ACTIVATIONS = ("sigmoid", "scaled_sigmoid", "rectifier", "identity")
LOSSES = ("binary_cross_entropy", "mean_squared_error")
BN_EPS = 1e-5


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_layers: int = 1
    hidden_width: int = 16
    output_activation: str = "identity"
    loss: str = "mean_squared_error"
    batch_norm: bool = True
    use_bias: bool = True
    output_scale: float = 100.0  # only used by scaled_sigmoid

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_width < 1 or self.input_dim < 1:
            raise ConfigurationError("input_dim, hidden_layers and hidden_width must be >= 1")
        if self.output_activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown output activation {self.output_activation!r}")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if (self.loss == "binary_cross_entropy") != (self.output_activation == "sigmoid"):
            raise ConfigurationError("binary cross-entropy pairs with the sigmoid output only")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def replace(self, **changes) -> "MlpSpec":
        d = asdict(self)
        d.update(changes)
        return MlpSpec(**d)


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn_scale: list[np.ndarray]
    bn_shift: list[np.ndarray]
    running_mean: list[np.ndarray]
    running_var: list[np.ndarray]
    bn_updates: int = 0

    def trainable(self) -> list[np.ndarray]:
        """Arrays updated by the optimizer, in a fixed order."""
        return [*self.weights, *self.biases, *self.bn_scale, *self.bn_shift]

    def copy(self) -> "MlpParams":
        return copy.deepcopy(self)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 50_000
    weight_decay: float = 0.0
    max_iterations: int = 5_000
    patience: int = 5
    eval_every: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_iterations < 1:
            raise ConfigurationError("learning_rate, batch_size, max_iterations must be positive")
        if self.patience < 1 or self.eval_every < 1:
            raise ConfigurationError("patience and eval_every must be >= 1")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be nonnegative")

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)


@dataclass
class TrainReport:
    iterations: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_iteration: int = 0
    stopped_at: int = 0
    stopped_early: bool = False
    final_train_loss: float = math.nan
    final_val_loss: float = math.nan

    def to_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "train_loss", "val_loss"])
            for row in zip(self.iterations, self.train_loss, self.val_loss):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


# ---------------------------------------------------------------------------
# parameters

def layer_sizes(spec: MlpSpec) -> list[tuple[int, int]]:
    dims = [spec.input_dim] + [spec.hidden_width] * spec.hidden_layers + [1]
    return list(zip(dims[:-1], dims[1:]))


def init(spec: MlpSpec, seed: int) -> MlpParams:
    """Kaiming-uniform weights on ``±sqrt(6/fan_in)``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in layer_sizes(spec):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    h, w = spec.hidden_layers, spec.hidden_width
    return MlpParams(weights=weights, biases=biases,
                     bn_scale=[np.ones(w) for _ in range(h)], bn_shift=[np.zeros(w) for _ in range(h)],
                     running_mean=[np.zeros(w) for _ in range(h)],
                     running_var=[np.ones(w) for _ in range(h)])


def save_params(path: str | Path, spec: MlpSpec, params: MlpParams) -> None:
    """Write a self-describing ``.npz`` checkpoint (spec JSON stored inside)."""
    arrays = {"spec_json": np.array(spec.to_json()), "bn_updates": np.array(params.bn_updates)}
    for name in ("weights", "biases", "bn_scale", "bn_shift", "running_mean", "running_var"):
        for i, a in enumerate(getattr(params, name)):
            arrays[f"{name}_{i}"] = a
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path: str | Path) -> tuple[MlpSpec, MlpParams]:
    with np.load(path, allow_pickle=False) as data:
        spec = MlpSpec(**json.loads(str(data["spec_json"])))
        h = spec.hidden_layers

        def get(name, count):
            return [np.array(data[f"{name}_{i}"]) for i in range(count)]

        params = MlpParams(weights=get("weights", h + 1), biases=get("biases", h + 1),
                           bn_scale=get("bn_scale", h), bn_shift=get("bn_shift", h),
                           running_mean=get("running_mean", h), running_var=get("running_var", h),
                           bn_updates=int(data["bn_updates"]) if "bn_updates" in data else 0)
    return spec, params


def output_bias_for(spec: MlpSpec, y) -> float:
    """Output-layer bias at which the network predicts ``mean(y)`` from zero features."""
    m = float(np.mean(y))
    kind = spec.output_activation
    if kind in ("sigmoid", "scaled_sigmoid"):
        scale = spec.output_scale if kind == "scaled_sigmoid" else 1.0
        q = min(max(m / scale, 1e-6), 1 - 1e-6)
        return math.log(q / (1 - q))
    return m


def init_for_target(spec: MlpSpec, seed: int, y, inputs=None) -> MlpParams:
    """:func:`init`, then set the output bias so training starts at the target mean.

    Without ``inputs`` the bias is the link of ``mean(y)`` (exact for zero
    features). With ``inputs`` the bias is solved so that the mean initial
    prediction over those rows equals ``mean(y)``; this removes the offset
    that random output weights acting on non-negative hidden activations
    would otherwise add.
    """
    params = init(spec, seed)
    if not spec.use_bias:
        return params
    if inputs is None:
        params.biases[-1][:] = output_bias_for(spec, y)
        return params
    X = inputs if sp.issparse(inputs) else np.asarray(inputs, dtype=float)
    _check_input(spec, X)
    z0 = _forward(spec, params, X, spec.batch_norm, None)
    params.biases[-1][:] = _calibrated_bias(spec, z0, float(np.mean(y)))
    return params


def recalibrate_output_bias(params: MlpParams, spec: MlpSpec, inputs, y) -> MlpParams:
    """Copy of ``params`` whose output bias makes the mean eval-mode prediction on
    ``inputs`` equal ``mean(y)``; all other parameters are unchanged."""
    if not spec.use_bias:
        raise ConfigurationError("recalibration needs an output bias")
    X = inputs if sp.issparse(inputs) else np.asarray(inputs, dtype=float)
    _check_input(spec, X)
    out = copy.deepcopy(params)
    out.biases[-1][:] = 0.0
    z0 = _forward(spec, out, X, False, None)
    out.biases[-1][:] = _calibrated_bias(spec, z0, float(np.mean(y)))
    return out


def _calibrated_bias(spec: MlpSpec, z0: np.ndarray, m: float) -> float:
    """Bias ``b`` with ``mean(activation(z0 + b)) == m`` (clamped into the codomain)."""
    kind = spec.output_activation
    if kind == "identity":
        return m - float(np.mean(z0))
    if kind == "rectifier" and m <= 0:
        return -float(np.max(z0))
    if kind in ("sigmoid", "scaled_sigmoid"):
        scale = spec.output_scale if kind == "scaled_sigmoid" else 1.0
        m = min(max(m, 1e-6 * scale), (1 - 1e-6) * scale)
    lo, hi = -float(np.max(z0)) - 50.0, -float(np.min(z0)) + 50.0 + abs(m)

    def gap(b: float) -> float:
        return float(np.mean(_activate(spec, z0 + b))) - m

    return float(brentq(gap, lo, hi, xtol=1e-12))


# ---------------------------------------------------------------------------
# forward / backward

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    kind = spec.output_activation
    if kind == "sigmoid":
        return _sigmoid(z)
    if kind == "scaled_sigmoid":
        return spec.output_scale * _sigmoid(z)
    if kind == "rectifier":
        return np.maximum(z, 0.0)
    return z


def _activate_grad(spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    kind = spec.output_activation
    if kind in ("sigmoid", "scaled_sigmoid"):
        s = _sigmoid(z)
        return s * (1.0 - s) * (spec.output_scale if kind == "scaled_sigmoid" else 1.0)
    if kind == "rectifier":
        return (z > 0).astype(float)
    return np.ones_like(z)


def _check_input(spec: MlpSpec, X) -> None:
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"input has shape {X.shape}, network expects (*, {spec.input_dim})")


def _forward(spec: MlpSpec, params: MlpParams, X, train: bool, cache: list | None):
    R = X
    for i in range(spec.hidden_layers):
        a = R @ params.weights[i]
        if spec.use_bias:
            a = a + params.biases[i]
        h = np.maximum(a, 0.0)
        if spec.batch_norm:
            if train:
                mu = h.mean(axis=0)
                var = h.var(axis=0)
            else:
                mu, var = params.running_mean[i], params.running_var[i]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            hn = (h - mu) * inv_std
            out = params.bn_scale[i] * hn + params.bn_shift[i]
        else:
            mu = var = inv_std = hn = None
            out = h
        if cache is not None:
            cache.append((R, a, hn, inv_std, mu, var))
        R = out
    z = R @ params.weights[-1]
    if spec.use_bias:
        z = z + params.biases[-1]
    if cache is not None:
        cache.append((R,))
    return z[:, 0]


def forward(params: MlpParams, inputs, spec: MlpSpec, mode: str = "eval") -> np.ndarray:
    """Predictions for ``inputs`` (dense array or sparse matrix).

    ``mode="train"`` normalizes with batch moments (without touching the
    running moments); ``mode="eval"`` uses the running moments.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    X = inputs if sp.issparse(inputs) else np.asarray(inputs, dtype=float)
    _check_input(spec, X)
    return _activate(spec, _forward(spec, params, X, mode == "train", None))


def data_loss(spec: MlpSpec, z: np.ndarray, y: np.ndarray) -> float:
    """Mean loss given output-layer pre-activations ``z``."""
    if spec.loss == "binary_cross_entropy":
        return float(np.mean(np.logaddexp(0.0, z) - y * z))
    pred = _activate(spec, z)
    return float(np.mean((pred - y) ** 2))


def evaluate(params: MlpParams, inputs, y, spec: MlpSpec) -> float:
    """Eval-mode data loss (no penalty)."""
    X = inputs if sp.issparse(inputs) else np.asarray(inputs, dtype=float)
    _check_input(spec, X)
    z = _forward(spec, params, X, False, None)
    return data_loss(spec, z, np.asarray(y, dtype=float))


def penalty(params: MlpParams, weight_decay: float) -> float:
    return 0.5 * weight_decay * sum(float(np.sum(W * W)) for W in params.weights)


def loss_and_gradient(params: MlpParams, X, y, spec: MlpSpec, weight_decay: float = 0.0,
                      mode: str = "train") -> tuple[float, list[np.ndarray], list]:
    """Penalized loss and gradients w.r.t. ``params.trainable()``.

    Batch normalization runs in train mode (batch moments) unless
    ``mode="eval"``. Returns ``(loss, gradients, batch_moments)`` where
    ``batch_moments`` lists ``(mean, var)`` per hidden layer for the caller
    to fold into running averages.
    """
    X = X if sp.issparse(X) else np.asarray(X, dtype=float)
    _check_input(spec, X)
    y = np.asarray(y, dtype=float)
    n = y.size
    if n == 0:
        raise ValueError("empty batch")
    cache: list = []
    train = mode == "train"
    z = _forward(spec, params, X, train, cache)
    loss = data_loss(spec, z, y) + penalty(params, weight_decay)
    if not math.isfinite(loss):
        raise NumericalFailure("non-finite loss", loss=loss)
    if spec.loss == "binary_cross_entropy":
        dz = (_sigmoid(z) - y) / n
    else:
        dz = 2.0 * (_activate(spec, z) - y) / n * _activate_grad(spec, z)
    h = spec.hidden_layers
    gW = [None] * (h + 1)
    gb = [None] * (h + 1)
    g_scale = [None] * h
    g_shift = [None] * h
    (R_last,) = cache[-1]
    dz = dz[:, None]
    gW[h] = R_last.T @ dz + weight_decay * params.weights[h]
    gb[h] = dz.sum(axis=0) if spec.use_bias else np.zeros_like(params.biases[h])
    dR = dz @ params.weights[h].T
    moments = []
    for i in range(h - 1, -1, -1):
        R_in, a, hn, inv_std, mu, var = cache[i]
        if spec.batch_norm:
            g_scale[i] = np.sum(dR * hn, axis=0)
            g_shift[i] = dR.sum(axis=0)
            dhn = dR * params.bn_scale[i]
            if train:
                m = dhn.shape[0]
                dh = inv_std / m * (m * dhn - dhn.sum(axis=0) - hn * np.sum(dhn * hn, axis=0))
            else:
                dh = dhn * inv_std
            moments.append((mu, var))
        else:
            g_scale[i] = np.zeros_like(params.bn_scale[i])
            g_shift[i] = np.zeros_like(params.bn_shift[i])
            dh = dR
        da = dh * (a > 0)
        gW[i] = np.asarray(R_in.T @ da) + weight_decay * params.weights[i]
        gb[i] = da.sum(axis=0) if spec.use_bias else np.zeros_like(params.biases[i])
        if i > 0:
            dR = da @ params.weights[i].T
    moments.reverse()
    return loss, [*gW, *gb, *g_scale, *g_shift], moments


# ---------------------------------------------------------------------------
# training

class _Adam:
    def __init__(self, arrays: Sequence[np.ndarray], cfg: TrainConfig):
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0
        self.cfg = cfg

    def step(self, arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            a -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.epsilon)


def _rows(X, idx):
    return X[idx]


def train(train_data: tuple, val_data: tuple, spec: MlpSpec, config: TrainConfig,
          params: MlpParams | None = None) -> tuple[MlpParams, TrainReport]:
    """Adam on mini-batches with early stopping on validation loss.

    ``train_data`` and ``val_data`` are ``(X, y)`` pairs. Every
    ``eval_every`` iterations (and at the final iteration) the eval-mode data
    losses are recorded; training stops once validation loss has not improved
    for ``patience`` consecutive evaluations, and the parameters from the best
    evaluation are returned.
    """
    Xtr, ytr = train_data
    Xva, yva = val_data
    Xtr = Xtr.tocsr() if sp.issparse(Xtr) else np.asarray(Xtr, dtype=float)
    Xva = Xva.tocsr() if sp.issparse(Xva) else np.asarray(Xva, dtype=float)
    ytr = np.asarray(ytr, dtype=float)
    yva = np.asarray(yva, dtype=float)
    n = ytr.size
    if n < 2 or yva.size < 1:
        raise ValueError("need at least two training rows and one validation row")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init(spec, int(rng.integers(2**31)))
    else:
        params = params.copy()
    arrays = params.trainable()
    opt = _Adam(arrays, config)
    batch = min(config.batch_size, n)
    n_batches = max(1, n // batch)
    report = TrainReport()
    best = (math.inf, params.copy(), 0)
    stale = 0
    queue: list[np.ndarray] = []
    it = 0
    while it < config.max_iterations:
        if not queue:
            perm = rng.permutation(n)
            queue = list(np.array_split(perm, n_batches)) if batch < n else [perm]
        idx = np.sort(queue.pop(0))
        try:
            _, grads, moments = loss_and_gradient(params, _rows(Xtr, idx), ytr[idx], spec,
                                                  config.weight_decay)
        except NumericalFailure as exc:
            raise NumericalFailure(str(exc), iteration=it, report=report) from exc
        opt.step(arrays, grads)
        if spec.batch_norm:
            # exponential average with momentum 0.1, bias-corrected like
            # Adam's moments so early checkpoints are not pulled toward the
            # (0, 1) initial values: effective rate (mom) / (1 - (1-mom)^k)
            params.bn_updates += 1
            mom = config.bn_momentum / (1.0 - (1.0 - config.bn_momentum) ** params.bn_updates)
            m = idx.size
            for i, (mu, var) in enumerate(moments):
                params.running_mean[i] *= 1.0 - mom
                params.running_mean[i] += mom * mu
                params.running_var[i] *= 1.0 - mom
                params.running_var[i] += mom * var * (m / (m - 1) if m > 1 else 1.0)
        it += 1
        if it % config.eval_every == 0 or it == config.max_iterations:
            tr = evaluate(params, Xtr, ytr, spec)
            va = evaluate(params, Xva, yva, spec)
            if not (math.isfinite(tr) and math.isfinite(va)):
                raise NumericalFailure("non-finite evaluation loss", iteration=it, report=report)
            report.iterations.append(it)
            report.train_loss.append(tr)
            report.val_loss.append(va)
            if va < best[0]:
                best = (va, params.copy(), it)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    report.stopped_early = True
                    break
    report.stopped_at = it
    final = best[1]
    report.best_iteration = best[2]
    report.final_val_loss = best[0]
    report.final_train_loss = evaluate(final, Xtr, ytr, spec)
    return final, report


# ---------------------------------------------------------------------------
# architecture search

@dataclass
class TuningTrace:
    depths: list[int] = field(default_factory=list)
    depth_train_loss: list[float] = field(default_factory=list)
    chosen_depth: int = 0
    weight_decays: list[float] = field(default_factory=list)
    decay_val_loss: list[float] = field(default_factory=list)
    chosen_weight_decay: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def choose_depth(depths: Sequence[int], train_losses: Sequence[float], rel_tol: float = 0.01) -> int:
    """Deepest depth before the first one whose training loss fails to improve.

    Improvement means a relative decrease of more than ``rel_tol``.
    """
    if len(depths) == 0:
        raise ConfigurationError("no candidate depths")
    for i in range(1, len(depths)):
        if not train_losses[i] < train_losses[i - 1] * (1.0 - rel_tol):
            return int(depths[i - 1])
    return int(depths[-1])


def decay_grid(start: float = 0.001, factor: float = 10.0, count: int = 8) -> list[float]:
    """Logarithmic weight-decay grid ``start, start*factor, ...``."""
    return [start * factor ** i for i in range(count)]


def tune_architecture(train_data: tuple, val_data: tuple, base_spec: MlpSpec,
                      candidate_depths: Sequence[int], config: TrainConfig,
                      weight_decays: Sequence[float] | None = None,
                      rel_tol: float = 0.01) -> tuple[MlpSpec, float, TuningTrace]:
    """Pick depth by training loss, then weight decay by validation loss.

    Depths are tried in ascending order (without weight decay) and the search
    stops at the first depth that does not improve the training loss. Weight
    decay is then increased along ``weight_decays`` (default
    :func:`decay_grid`) at the chosen depth until the validation loss stops
    improving; the value with the lowest validation loss is returned.
    """
    depths = list(candidate_depths)
    if not depths:
        raise ConfigurationError("no candidate depths")
    if depths != sorted(depths):
        raise ConfigurationError("candidate depths must be ascending")
    grid = decay_grid() if weight_decays is None else list(weight_decays)
    trace = TuningTrace()
    for i, d in enumerate(depths):
        _, rep = train(train_data, val_data, base_spec.replace(hidden_layers=d),
                       config.replace(weight_decay=0.0))
        trace.depths.append(d)
        trace.depth_train_loss.append(rep.final_train_loss)
        if i > 0 and not trace.depth_train_loss[i] < trace.depth_train_loss[i - 1] * (1 - rel_tol):
            break
    trace.chosen_depth = choose_depth(trace.depths, trace.depth_train_loss, rel_tol)
    spec = base_spec.replace(hidden_layers=trace.chosen_depth)
    best = (math.inf, 0.0)
    for lam in grid:
        _, rep = train(train_data, val_data, spec, config.replace(weight_decay=lam))
        trace.weight_decays.append(float(lam))
        trace.decay_val_loss.append(rep.final_val_loss)
        if rep.final_val_loss < best[0]:
            best = (rep.final_val_loss, float(lam))
        else:
            break
    trace.chosen_weight_decay = best[1]
    return spec, best[1], trace
