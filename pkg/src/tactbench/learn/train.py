"""Mini-batch training with BCE, k-fold cross validation and gradient checking."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..dataset import SplitSpec, TooSmallError, make_splits
from .layers import Layer, NonFiniteTensor, bce_logit_grad, bce_loss, sigmoid
from .model import FusionModel, ModelConfig


class DivergenceDetected(FloatingPointError):
    pass


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.01
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    folds: int = 3
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class SGDMomentum:
    def __init__(self, params: dict, lr: float, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict):
        for k, p in params.items():
            v = self.vel[k]
            v *= self.momentum
            v += grads[k]
            p -= (self.lr * v).astype(p.dtype)


class Adam:
    def __init__(self, params: dict, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= (self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(p.dtype)


def make_optimizer(params, tc: TrainConfig):
    if tc.optimizer == "adam":
        return Adam(params, tc.lr)
    return SGDMomentum(params, tc.lr, tc.momentum)


def _take(inputs: dict, idx) -> dict:
    return {m: v[idx] for m, v in inputs.items()}


def train_model(model: FusionModel, inputs: dict, labels: np.ndarray, tc: TrainConfig,
                seed: int | None = None) -> list[float]:
    """Train in place; returns the mean training loss of each epoch."""
    labels = np.asarray(labels, dtype=np.float64)
    n = len(labels)
    rng = np.random.default_rng(tc.seed if seed is None else seed)
    params = model.param_dict()
    opt = make_optimizer(params, tc)
    history = []
    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        total = 0.0
        for a in range(0, n, tc.batch_size):
            idx = order[a:a + tc.batch_size]
            model.zero_grad()
            try:
                p = model.forward(_take(inputs, idx))
            except NonFiniteTensor as exc:
                raise DivergenceDetected(f"epoch {epoch}: {exc}") from None
            y = labels[idx]
            loss = bce_loss(p, y)
            if not np.isfinite(loss):
                raise DivergenceDetected(f"epoch {epoch}: loss is {loss}")
            total += loss * len(idx)
            # batch mean -> per-sample weights keep the last short batch unbiased
            model.backward(bce_logit_grad(p, y))
            opt.step(params, model.grad_dict())
        history.append(total / max(n, 1))
    return history


def accuracy(p, y) -> float:
    p = np.asarray(p)
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptyDatasetError("cannot score an empty set")
    return float(np.mean((p >= 0.5).astype(int) == y))


def evaluate(model: FusionModel, inputs: dict, labels) -> float:
    """Fraction of hard predictions (threshold 0.5) that match the labels."""
    if len(labels) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    return accuracy(model.predict(inputs), labels)


@dataclass
class Metrics:
    """Per-fold accuracies on the held-out test split.

    ``std`` is the population standard deviation over folds.
    """

    fold_test_accuracies: list
    fold_val_accuracies: list
    final_test_accuracy: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_test_accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_test_accuracies))


@dataclass
class KFoldResult:
    params: dict                 # final model, retrained on the whole training pool
    fold_params: list
    metrics: Metrics
    splits: object
    loss_history: list = field(default_factory=list)


def train_kfold(inputs: dict, labels, model_cfg: ModelConfig, tc: TrainConfig) -> KFoldResult:
    labels = np.asarray(labels)
    try:
        splits = make_splits(labels, SplitSpec(tc.test_fraction, tc.folds, tc.seed))
    except TooSmallError:
        raise
    test_in, test_y = _take(inputs, splits.test), labels[splits.test]
    fold_params, test_acc, val_acc, hist = [], [], [], []
    for f, (tr, va) in enumerate(splits.folds):
        model = FusionModel(model_cfg)
        hist.append(train_model(model, _take(inputs, tr), labels[tr], tc, seed=tc.seed + 1 + f))
        val_acc.append(evaluate(model, _take(inputs, va), labels[va]))
        test_acc.append(evaluate(model, test_in, test_y))
        fold_params.append(model.get_params())
    final = FusionModel(model_cfg)
    hist.append(train_model(final, _take(inputs, splits.pool), labels[splits.pool], tc, seed=tc.seed))
    metrics = Metrics(test_acc, val_acc, evaluate(final, test_in, test_y))
    return KFoldResult(final.get_params(), fold_params, metrics, splits, hist)


def model_from_params(cfg: ModelConfig, params: dict) -> FusionModel:
    model = FusionModel(cfg)
    model.set_params(params)
    return model


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def _rel_err(a, n, floor) -> float:
    """||a - n|| / (||a|| + ||n||) over one tensor's probes."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))


def _param_probe(shape, per_param, rng):
    size = int(np.prod(shape))
    if per_param is None or size <= per_param:
        return np.arange(size)
    return np.sort(rng.choice(size, per_param, replace=False))


def _as_dtype(obj, dtype):
    """Deep copy of a layer or model with every parameter cast to ``dtype``."""
    twin = copy.deepcopy(obj)
    for name, arr, layer in twin.named_params():
        layer.params[name.rsplit(".", 1)[-1]] = arr.astype(dtype)
    return twin


def _central_differences(objective, params: dict, probes: dict, eps: float, retries: int = 3,
                         rel_tol: float = 1e-7) -> dict:
    """Central differences at the probed entries.

    A step that straddles a ReLU kink gives a different slope than half that
    step, while on a smooth piece both agree up to roundoff. On disagreement
    the probe is repeated with a ten times smaller step, up to ``retries`` times.
    """
    out = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        unit = float(np.finfo(arr.dtype).eps)
        vals = []
        for i in probes[name]:
            old = flat[i]
            h = eps
            for _ in range(retries + 1):
                f = []
                for step in (h, -h, 0.5 * h, -0.5 * h):
                    flat[i] = old + step
                    f.append(objective())
                flat[i] = old
                full = (f[0] - f[1]) / (2 * h)
                half = (f[2] - f[3]) / h
                noise = 64 * unit * max(abs(v) for v in f) / h
                if abs(full - half) <= noise + rel_tol * abs(full):
                    break
                h /= 10
            vals.append(full)
        out[name] = np.array(vals)
    return out


def grad_check_layer(layer: Layer, x: np.ndarray, eps: float = 1e-3, seed: int = 0,
                     per_param: int | None = None, check_input: bool = True,
                     reference_dtype=np.float64, floor: float = 1e-8) -> float:
    """Max over tensors of the relative error between analytic and central-difference gradients.

    The error of a tensor is ``||a - n|| / (||a|| + ||n||)`` over its probed
    entries, so near-zero entries do not dominate. The objective is a fixed random projection of the layer output. The
    analytic gradient comes from ``layer`` at its own precision; the
    finite differences are taken on a copy cast to ``reference_dtype``
    (``None`` keeps the layer's precision).
    """
    rng = np.random.default_rng(seed)
    out = layer.forward(x)
    proj = rng.standard_normal(out.shape)
    layer.zero_grad()
    layer.forward(x)
    dx = layer.backward(proj.astype(out.dtype))
    analytic = {name: lay.grads[name.rsplit(".", 1)[-1]].copy() for name, _, lay in layer.named_params()}

    ref = layer if reference_dtype is None else _as_dtype(layer, reference_dtype)
    xr = x.astype(reference_dtype or x.dtype, copy=True)
    params = {name: arr for name, arr, _ in ref.named_params()}
    if check_input:
        params["input"] = xr
        analytic["input"] = dx
    probes = {name: _param_probe(arr.shape, per_param, rng) for name, arr in params.items()}

    def f():
        return float(np.sum(ref.forward(xr).astype(np.float64) * proj))

    numeric = _central_differences(f, params, probes, eps)
    return max(_rel_err(analytic[k].reshape(-1)[probes[k]], numeric[k], floor) for k in params)


def jitter_biases(model, scale: float = 0.05, seed: int = 0) -> None:
    """Set every bias to small random values, in place.

    Zero-initialised biases put units over all-zero patches exactly on the
    ReLU kink, where the function has no derivative and central differences
    return the mean of the two one-sided slopes. Jittering moves the check to
    a generic point.
    """
    rng = np.random.default_rng(seed)
    for name, arr in model.param_dict().items():
        if name.endswith(".b"):
            arr[...] = rng.normal(0.0, scale, arr.shape).astype(arr.dtype)


def grad_check_model(model: FusionModel, inputs: dict, labels, eps: float = 1e-3, seed: int = 0,
                     per_param: int | None = 4, reference_dtype=np.float64, floor: float = 1e-8) -> float:
    """The same check for the fused model under BCE, probing ``per_param`` entries of every tensor."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels, dtype=np.float64)
    model.zero_grad()
    p = model.forward(inputs)
    model.backward(bce_logit_grad(p, labels))
    analytic = {k: v.copy() for k, v in model.grad_dict().items()}

    ref = model if reference_dtype is None else _as_dtype(model, reference_dtype)
    ref_inputs = {m: v.astype(reference_dtype or v.dtype) for m, v in inputs.items()}
    params = ref.param_dict()
    probes = {name: _param_probe(arr.shape, per_param, rng) for name, arr in params.items()}

    def f():
        return bce_loss(ref.forward(ref_inputs), labels)

    numeric = _central_differences(f, params, probes, eps)
    return max(_rel_err(analytic[k].reshape(-1)[probes[k]], numeric[k], floor) for k in params)
