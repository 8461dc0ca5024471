"""Learned gradient lookup.

A small fully connected network maps one difference-image sample
(u, v, R, G, B) to the local surface gradient (Gx, Gy) in mm/px. The
forward pass, backpropagation, and the Adam loop are written out by hand
on numpy arrays; there is no autograd dependency, which keeps training
bit-reproducible for a fixed seed.

Feature normalization (per-feature shift/scale) is computed on the
training split only and stored inside the model. Targets are divided by
a single pooled scale during optimization; reported losses are in raw
mm/px units so histories are comparable across datasets.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

_BETA1 = 0.9
_BETA2 = 0.999
_ADAM_EPS = 1e-8

_PLATEAU_DELTA = 1e-6
_PLATEAU_EPOCHS = 10


@dataclass(frozen=True)
class MlpModel:
    """Trained network plus the constants needed to evaluate it."""

    weights: tuple
    biases: tuple
    shift: np.ndarray
    scale: np.ndarray
    out_scale: float
    hidden_activation: str = "tanh"

    def __post_init__(self):
        if self.hidden_activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must pair up")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("layer shape mismatch")
        for wa, wb in zip(self.weights[:-1], self.weights[1:]):
            if wa.shape[1] != wb.shape[0]:
                raise ValueError("layer shapes do not chain")
        if self.shift.shape != (self.weights[0].shape[0],):
            raise ValueError("normalization width mismatch")
        if self.scale.shape != self.shift.shape:
            raise ValueError("normalization width mismatch")
        ok = (np.isfinite(self.shift).all() and np.isfinite(self.scale).all()
              and np.isfinite(self.out_scale) and (self.scale != 0.0).all())
        if not ok:
            raise ValueError("normalization constants must be finite and nonzero")

    @property
    def layers(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    seed: int = 0
    val_fraction: float = 0.1
    hidden_sizes: tuple = (64, 64)
    min_learning_rate: float = 1e-5

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("learning rate, batch size, and epochs must be positive")
        if not 0.0 <= self.min_learning_rate <= self.learning_rate:
            raise ValueError("min_learning_rate must be in [0, learning_rate]")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        if any(h <= 0 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be positive")


@dataclass(frozen=True)
class TrainResult:
    model: MlpModel
    train_loss: np.ndarray
    val_loss: np.ndarray
    lr: np.ndarray


def _act(z, kind):
    return np.tanh(z) if kind == "tanh" else z


def _act_grad(a, kind):
    # derivative expressed through the activation value itself
    return 1.0 - a * a if kind == "tanh" else np.ones_like(a)


def _forward(weights, biases, x, kind):
    """Return the list of layer activations, input first, output last."""
    acts = [x]
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = acts[-1] @ w + b
        acts.append(z if i == last else _act(z, kind))
    return acts


def _backward(weights, acts, residual_grad, kind):
    """Parameter gradients for a loss whose d(loss)/d(output) is given."""
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    delta = residual_grad
    for i in range(len(weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i].T) * _act_grad(acts[i], kind)
    return grads_w, grads_b


def _loss_and_grads(weights, biases, x, y, kind):
    acts = _forward(weights, biases, x, kind)
    resid = acts[-1] - y
    loss = float(np.mean(resid * resid))
    gw, gb = _backward(weights, acts, resid / (resid.shape[0]), kind)
    return loss, gw, gb


def _init_params(sizes, rng):
    # Glorot uniform, biases zero
    weights, biases = [], []
    for nin, nout in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (nin + nout))
        weights.append(rng.uniform(-lim, lim, (nin, nout)))
        biases.append(np.zeros(nout))
    return weights, biases


def train(dataset, config: TrainConfig | None = None) -> TrainResult:
    """Fit the gradient lookup on dataset rows (u,v,R,G,B,Gx,Gy,contact).

    Deterministic for a fixed config: one rng stream drives the
    train/validation split, the Glorot initialization, and every epoch's
    batch order. Loss histories are mean squared error on (Gx, Gy) in
    mm/px; the validation entry is NaN when val_fraction is zero, and the
    learning rate halves when the monitored loss stops improving by more
    than 1e-6 for 10 epochs.
    """
    cfg = config or TrainConfig()
    rows = np.asarray(getattr(dataset, "rows", dataset), dtype=np.float64)
    if rows.size == 0:
        raise ValueError("empty dataset")
    if rows.ndim != 2 or rows.shape[1] < 7:
        raise ValueError("expected rows with columns u,v,R,G,B,Gx,Gy[,contact]")
    x_all = rows[:, 0:5]
    y_all = rows[:, 5:7]

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(rows))
    n_val = int(round(len(rows) * cfg.val_fraction))
    if n_val >= len(rows):
        raise ValueError("validation split leaves no training rows")
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    shift = x_all[train_idx].mean(axis=0)
    scale = x_all[train_idx].std(axis=0)
    scale[scale == 0.0] = 1.0
    out_scale = float(y_all[train_idx].std())
    if not np.isfinite(out_scale):
        out_scale = 1.0

    xn = (x_all - shift) / scale
    # zero target variance means every label is identical; the scaled output
    # out_scale * net(x) is then the exact constant predictor, and the
    # normalized targets are defined as zero
    yn = y_all / out_scale if out_scale else np.zeros_like(y_all)
    xt, yt = xn[train_idx], yn[train_idx]
    xv, yv = xn[val_idx], yn[val_idx]

    sizes = [5, *cfg.hidden_sizes, 2]
    weights, biases = _init_params(sizes, rng)
    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]

    raw = out_scale * out_scale  # normalized MSE -> mm/px units
    # with out_scale 0 the predictor is constant zero, so the true raw-unit
    # loss is the constant mean square of the labels, not norm * 0
    raw_floor = float(np.mean(y_all ** 2)) if out_scale == 0.0 else 0.0
    lr = cfg.learning_rate
    step = 0
    best = np.inf
    stale = 0
    hist_train, hist_val, hist_lr = [], [], []

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(xt))
        for bi, lo in enumerate(range(0, len(xt), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            loss, gw, gb = _loss_and_grads(weights, biases, xt[idx], yt[idx],
                                           "tanh")
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} batch {bi}")
            step += 1
            c1 = 1.0 - _BETA1 ** step
            c2 = 1.0 - _BETA2 ** step
            for p, g, m, v in zip(weights + biases, gw + gb,
                                  m_w + m_b, v_w + v_b):
                m *= _BETA1
                m += (1.0 - _BETA1) * g
                v *= _BETA2
                v += (1.0 - _BETA2) * g * g
                p -= lr * (m / c1) / (np.sqrt(v / c2) + _ADAM_EPS)

        pred_t = _forward(weights, biases, xt, "tanh")[-1]
        norm_train = float(np.mean((pred_t - yt) ** 2))
        if n_val:
            pred_v = _forward(weights, biases, xv, "tanh")[-1]
            norm_val = float(np.mean((pred_v - yv) ** 2))
        else:
            norm_val = np.nan
        hist_train.append(norm_train * raw + raw_floor)
        hist_val.append(norm_val * raw + raw_floor)
        hist_lr.append(lr)

        # plateau detection runs on the optimizer's own normalized objective;
        # the improvement threshold is relative so it works at any loss scale
        monitored = norm_val if n_val else norm_train
        if monitored < best * (1.0 - _PLATEAU_DELTA):
            best = monitored
            stale = 0
        else:
            stale += 1
            if stale >= _PLATEAU_EPOCHS:
                lr = max(lr * 0.5, cfg.min_learning_rate)
                stale = 0

    model = MlpModel(weights=tuple(w.copy() for w in weights),
                     biases=tuple(b.copy() for b in biases),
                     shift=shift, scale=scale, out_scale=out_scale)
    return TrainResult(model=model, train_loss=np.array(hist_train),
                       val_loss=np.array(hist_val), lr=np.array(hist_lr))


_PREDICT_CHUNK = 4096


def _row_stable_matmul(x, w):
    # BLAS picks different kernels for different batch shapes, which flips
    # low bits between a 1-row and an n-row call. Reduce explicitly so each
    # output row is computed identically regardless of batch size.
    return (x[:, :, None] * w[None, :, :]).sum(axis=1)


def _predict_forward(model, xn):
    a = xn
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = _row_stable_matmul(a, w) + b
        a = z if i == last else _act(z, model.hidden_activation)
    return a


def predict(model: MlpModel, u, v, r, g, b):
    """Evaluate the lookup; scalars or broadcastable arrays in, (Gx, Gy) out.

    Pure: a batch call and the per-row calls produce bit-identical values.
    """
    parts = np.broadcast_arrays(*[np.asarray(p, dtype=np.float64)
                                  for p in (u, v, r, g, b)])
    x = np.stack([p.ravel() for p in parts], axis=1)
    if not np.isfinite(x).all():
        raise ValueError("non-finite input")
    xn = (x - model.shift) / model.scale
    out = np.concatenate([_predict_forward(model, xn[lo:lo + _PREDICT_CHUNK])
                          for lo in range(0, len(xn), _PREDICT_CHUNK)]) \
        if len(xn) else np.zeros((0, 2))
    out = out * model.out_scale
    shape = parts[0].shape
    gx = out[:, 0].reshape(shape)
    gy = out[:, 1].reshape(shape)
    if shape == ():
        return float(gx), float(gy)
    return gx, gy


def gradient_check(model: MlpModel, rows, step: float = 1e-5) -> float:
    """Max relative mismatch between backprop and central finite differences.

    The objective is the internal normalized-unit MSE on the given rows.
    Relative error uses max(|analytic| + |numeric|, 1e-3) as denominator so
    near-zero entries compare on an absolute scale instead of blowing up.
    """
    rows = np.asarray(getattr(rows, "rows", rows), dtype=np.float64)
    if rows.ndim != 2 or len(rows) < 1:
        raise ValueError("need at least one row")
    x = (rows[:, 0:5] - model.shift) / model.scale
    if model.out_scale:
        y = rows[:, 5:7] / model.out_scale
    else:
        y = np.zeros((len(rows), 2))
    kind = model.hidden_activation

    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    _, gw, gb = _loss_and_grads(weights, biases, x, y, kind)

    def loss_at():
        out = _forward(weights, biases, x, kind)[-1]
        return float(np.mean((out - y) ** 2))

    worst = 0.0
    for params, grads in ((weights, gw), (biases, gb)):
        for p, g in zip(params, grads):
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for k in range(flat.size):
                keep = flat[k]
                flat[k] = keep + step
                hi = loss_at()
                flat[k] = keep - step
                lo = loss_at()
                flat[k] = keep
                fd = (hi - lo) / (2.0 * step)
                denom = max(abs(gflat[k]) + abs(fd), 1e-3)
                worst = max(worst, abs(gflat[k] - fd) / denom)
    return worst


def lipschitz_bound(model: MlpModel) -> float:
    """Upper bound on |f(a)-f(b)| / |a-b| over normalized inputs."""
    bound = abs(model.out_scale)
    for w in model.weights:
        bound *= np.linalg.norm(w, 2)
    return float(bound)


def _encode(a):
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode()


def _decode(s, shape):
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).copy()


def to_json(model: MlpModel) -> str:
    doc = {
        "layers": model.layers,
        "weights": [_encode(w) for w in model.weights],
        "biases": [_encode(b) for b in model.biases],
        "norm": {"shift": _encode(model.shift), "scale": _encode(model.scale)},
        "out_scale": model.out_scale,
        "hidden_activation": model.hidden_activation,
    }
    return json.dumps(doc, indent=1)


def from_json(text: str) -> MlpModel:
    doc = json.loads(text)
    sizes = doc["layers"]
    weights = tuple(_decode(s, (sizes[i], sizes[i + 1]))
                    for i, s in enumerate(doc["weights"]))
    biases = tuple(_decode(s, (sizes[i + 1],))
                   for i, s in enumerate(doc["biases"]))
    return MlpModel(weights=weights, biases=biases,
                    shift=_decode(doc["norm"]["shift"], (sizes[0],)),
                    scale=_decode(doc["norm"]["scale"], (sizes[0],)),
                    out_scale=float(doc["out_scale"]),
                    hidden_activation=doc.get("hidden_activation", "tanh"))


def save_model(model: MlpModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_json(model))


def load_model(path) -> MlpModel:
    with open(path) as fh:
        return from_json(fh.read())
