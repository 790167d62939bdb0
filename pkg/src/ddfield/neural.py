"""Fully connected field network, written from scratch on numpy.

Forward pass, reverse-mode gradients with respect to both weights and inputs,
row-wise weight normalization (W = g * V / |V|), inverted dropout, Adam, the
clamped absolute-difference loss, the training loop, and checkpoint I/O.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DDFN"
CHECKPOINT_VERSION = 1

N_INPUTS = 5  # x, y, z, scaled azimuth, scaled polar


def encode_inputs(positions: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Pack (B,3) positions and (B,2) angles into (B,5) network inputs.

    Positions are used as-is (meshes are normalized into [-1,1]^3); angles are
    rescaled from [0,2pi) x [0,pi] onto [-1,1].
    """
    positions = np.atleast_2d(positions)
    angles = np.atleast_2d(angles)
    out = np.empty((len(positions), N_INPUTS))
    out[:, :3] = positions
    out[:, 3] = angles[:, 0] / np.pi - 1.0
    out[:, 4] = 2.0 * angles[:, 1] / np.pi - 1.0
    return out


@dataclass
class MlpModel:
    """Weight-normalized MLP: ReLU hidden layers, identity output.

    Every layer stores a direction matrix V (out, in), a gain vector g and a
    bias b; the effective weight is W = g * V / |V| row-wise. Dropout (train
    mode only) zeroes hidden activations with probability `dropout`; the
    output layer never has dropout. `dropout` is a training-time setting and
    is not part of the checkpoint format.
    """

    widths: tuple[int, ...]
    v: list[np.ndarray]
    g: list[np.ndarray]
    b: list[np.ndarray]
    dropout: float = 0.0

    @property
    def n_layers(self) -> int:
        return len(self.v)

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in (V, g, b) per-layer order."""
        out = []
        for i in range(self.n_layers):
            out += [self.v[i], self.g[i], self.b[i]]
        return out

    def effective_weights(self) -> list[np.ndarray]:
        ws = []
        for v, g in zip(self.v, self.g):
            norms = np.linalg.norm(v, axis=1)
            ws.append(g[:, None] * v / norms[:, None])
        return ws


def init_model(hidden_layers: int = 4, hidden_width: int = 128,
               seed: int = 0, dropout: float = 0.0) -> MlpModel:
    """He-style init; g is set to the row norm of V so that W == V initially.

    The output head starts near zero: the clamp loss has no gradient outside
    its band, so initial predictions must sit inside it to be trainable.
    """
    widths = (N_INPUTS,) + (hidden_width,) * hidden_layers + (1,)
    rng = np.random.default_rng([seed, 0])
    vs, gs, bs = [], [], []
    for i in range(len(widths) - 1):
        fan_in = widths[i]
        last = i == len(widths) - 2
        scale = 0.02 * np.sqrt(1.0 / fan_in) if last else np.sqrt(2.0 / fan_in)
        v = rng.normal(0.0, scale, size=(widths[i + 1], widths[i]))
        vs.append(v)
        gs.append(np.linalg.norm(v, axis=1))
        bs.append(np.zeros(widths[i + 1]))
    return MlpModel(widths=widths, v=vs, g=gs, b=bs, dropout=dropout)


def clamp(x, delta: float):
    """min(delta, max(-delta, x)); miss targets enter as +inf and clamp to delta."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    return np.minimum(delta, np.maximum(-delta, x))


def _forward_cached(model: MlpModel, inputs: np.ndarray, train: bool,
                    rng: np.random.Generator | None):
    """Forward pass keeping per-layer caches for the backward pass."""
    hs = [inputs]         # layer inputs (post-dropout of the previous layer)
    zs = []               # pre-activations
    masks = []            # dropout masks on hidden activations
    h = inputs
    ws = model.effective_weights()
    last = model.n_layers - 1
    for i, w in enumerate(ws):
        z = h @ w.T + model.b[i]
        zs.append(z)
        if i == last:
            h = z
            masks.append(None)
        else:
            h = np.maximum(z, 0.0)
            if train and model.dropout > 0.0:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng")
                keep = 1.0 - model.dropout
                mask = (rng.random(h.shape) < keep) / keep
                h = h * mask
                masks.append(mask)
            else:
                masks.append(None)
        hs.append(h)
    return h[:, 0], hs, zs, masks, ws


_EVAL_CHUNK = 262_144  # rows per inference slab, keeps activations modest


def forward_batch(model: MlpModel, inputs: np.ndarray, train: bool = False,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Predictions for (B,5) inputs. Eval mode is deterministic.

    Eval mode streams without layer caches, so very large batches stay cheap."""
    inputs = np.atleast_2d(inputs)
    if train:
        pred, *_ = _forward_cached(model, inputs, train, rng)
        return pred
    ws = model.effective_weights()
    last = model.n_layers - 1
    out = np.empty(len(inputs))
    for lo in range(0, len(inputs), _EVAL_CHUNK):
        h = inputs[lo:lo + _EVAL_CHUNK]
        for i, w in enumerate(ws):
            h = h @ w.T + model.b[i]
            if i != last:
                np.maximum(h, 0.0, out=h)
        out[lo:lo + _EVAL_CHUNK] = h[:, 0]
    return out


def forward(model: MlpModel, position, direction, train: bool = False,
            rng: np.random.Generator | None = None) -> float:
    """Scalar prediction for one oriented point.

    `direction` is an (azimuth, polar) pair in radians (anything indexable).
    """
    angles = np.asarray([direction[0], direction[1]], dtype=np.float64)
    inputs = encode_inputs(np.asarray(position, dtype=np.float64)[None, :],
                           angles[None, :])
    return float(forward_batch(model, inputs, train=train, rng=rng)[0])


def _weight_norm_grads(model: MlpModel, i: int, d_w: np.ndarray):
    """Gradients through W = g * V/|V| for layer i given dL/dW."""
    v = model.v[i]
    norms = np.linalg.norm(v, axis=1)
    vhat = v / norms[:, None]
    d_g = np.einsum("oi,oi->o", d_w, vhat)
    d_v = (model.g[i] / norms)[:, None] * (d_w - d_g[:, None] * vhat)
    return d_v, d_g


def loss(model: MlpModel, inputs: np.ndarray, targets: np.ndarray,
         miss: np.ndarray, delta: float, train: bool = False,
         rng: np.random.Generator | None = None):
    """Mean clamped absolute error and its gradients.

    Returns (loss, grads) where grads is a flat list matching
    model.parameters() order. Miss targets are treated as +inf, so their
    clamped value is delta. The clamp subgradient is zero at the kink and
    outside the band.
    """
    inputs = np.atleast_2d(inputs)
    n = len(inputs)
    if n == 0:
        raise ValueError("empty batch")
    pred, hs, zs, masks, ws = _forward_cached(model, inputs, train, rng)
    target_c = np.where(miss, delta, clamp(np.where(miss, 0.0, targets), delta))
    pred_c = clamp(pred, delta)
    diff = pred_c - target_c
    value = float(np.mean(np.abs(diff)))

    # d|diff|/d pred, zero outside the clamp band and at the kink
    inside = np.abs(pred) < delta
    d_pred = np.sign(diff) * inside / n

    grads: list[np.ndarray] = []
    d_h = d_pred[:, None]  # gradient wrt the current layer output
    last = model.n_layers - 1
    layer_grads: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = [None] * (last + 1)
    for i in range(last, -1, -1):
        if i == last:
            d_z = d_h
        else:
            d_a = d_h
            if masks[i] is not None:
                d_a = d_a * masks[i]
            d_z = d_a * (zs[i] > 0.0)
        d_w = d_z.T @ hs[i]
        d_b = d_z.sum(axis=0)
        d_v, d_g = _weight_norm_grads(model, i, d_w)
        layer_grads[i] = (d_v, d_g, d_b)
        if i > 0:
            d_h = d_z @ ws[i]
    for d_v, d_g, d_b in layer_grads:
        grads += [d_v, d_g, d_b]
    return value, grads


def input_gradient_batch(model: MlpModel, inputs: np.ndarray) -> np.ndarray:
    """(B,5) gradient of the scalar output w.r.t. the raw inputs (eval mode)."""
    inputs = np.atleast_2d(inputs)
    ws = model.effective_weights()
    last = model.n_layers - 1
    out = np.empty((len(inputs), N_INPUTS))
    for lo in range(0, len(inputs), _EVAL_CHUNK):
        h = inputs[lo:lo + _EVAL_CHUNK]
        alive = []  # per-layer ReLU activity masks
        for i, w in enumerate(ws):
            h = h @ w.T + model.b[i]
            if i != last:
                mask = h > 0.0
                alive.append(mask)
                h = h * mask
        d_h = np.ones((len(h), 1))
        for i in range(last, -1, -1):
            d_z = d_h if i == last else d_h * alive[i]
            d_h = d_z @ ws[i]
        out[lo:lo + _EVAL_CHUNK] = d_h
    return out


def input_gradient(model: MlpModel, position, direction) -> np.ndarray:
    """Gradient of the prediction w.r.t. the 5 raw inputs at one point.

    The first three components are the spatial gradient that feeds the
    surface-normal formula.
    """
    angles = np.asarray([direction[0], direction[1]], dtype=np.float64)
    inputs = encode_inputs(np.asarray(position, dtype=np.float64)[None, :],
                           angles[None, :])
    return input_gradient_batch(model, inputs)[0]


@dataclass
class AdamState:
    """First/second-moment accumulators plus hyperparameters."""

    m: list[np.ndarray]
    s: list[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-4,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   s=[np.zeros_like(p) for p in params],
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: AdamState) -> list[np.ndarray]:
    """One bias-corrected Adam update, in place; returns the params."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter/gradient/state shape mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, s in zip(params, grads, state.m, state.s):
        if p.shape != g.shape:
            raise ValueError("parameter/gradient shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        s *= b2
        s += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(s / c2) + state.eps)
    return params


@dataclass
class TrainConfig:
    delta: float = 0.1
    lr: float = 1e-4
    batch_size: int = 256
    iterations: int = 2000
    dropout: float = 0.0
    hidden_layers: int = 4
    hidden_width: int = 128
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def train(dataset, config: TrainConfig, model: MlpModel | None = None):
    """Train on a dataset exposing positions/angles/target/miss arrays.

    Mini-batches are drawn from seeded shuffles, dropout runs in train mode,
    loss is the clamped absolute error, the optimizer is Adam. Deterministic
    for a fixed seed and thread count. Returns (model, history) with history
    an (iterations, 2) array of (iteration, loss).

    Raises NumericError when the loss goes non-finite.
    """
    n = len(dataset.positions)
    if n == 0:
        raise DataError("empty training dataset")
    inputs = encode_inputs(dataset.positions, dataset.angles)
    targets = np.asarray(dataset.target, dtype=np.float64)
    miss = np.asarray(dataset.miss, dtype=bool)

    if model is None:
        model = init_model(config.hidden_layers, config.hidden_width,
                           seed=config.seed, dropout=config.dropout)
        # start just inside the clamp band: miss supervision is then almost
        # satisfied and near-surface targets pull predictions down from there
        model.b[-1][:] = 0.9 * config.delta
    else:
        model.dropout = config.dropout
    params = model.parameters()
    state = AdamState.for_params(params, lr=config.lr)
    rng_shuffle = np.random.default_rng([config.seed, 1])
    rng_dropout = np.random.default_rng([config.seed, 2])

    history = np.empty((config.iterations, 2))
    order = rng_shuffle.permutation(n)
    cursor = 0
    for it in range(config.iterations):
        if cursor + config.batch_size > n:
            order = rng_shuffle.permutation(n)
            cursor = 0
        take = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        value, grads = loss(model, inputs[take], targets[take], miss[take],
                            config.delta, train=True, rng=rng_dropout)
        if not np.isfinite(value):
            stats = (f"batch size {len(take)}, miss fraction "
                     f"{float(miss[take].mean()):.3f}, finite-target mean "
                     f"{float(targets[take][~miss[take]].mean()) if (~miss[take]).any() else 0.0:.4f}")
            raise NumericError(f"non-finite loss at iteration {it}: {stats}")
        adam_step(params, grads, state)
        history[it, 0] = it
        history[it, 1] = value
        if config.log_every and (it + 1) % config.log_every == 0:
            log.info("iter %d loss %.6f", it + 1, value)
    return model, history


def save_model(model: MlpModel, delta: float, path) -> None:
    """Checkpoint: magic, version, layer count, widths, delta, then per layer
    the flattened float64 V, g, b (little-endian throughout)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(model.widths)))
        fh.write(struct.pack(f"<{len(model.widths)}I", *model.widths))
        fh.write(struct.pack("<d", delta))
        for i in range(model.n_layers):
            fh.write(np.ascontiguousarray(model.v[i], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(model.g[i], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(model.b[i], dtype="<f8").tobytes())


def load_model(path):
    """Read a checkpoint; the file's layer widths are authoritative.

    Returns (model, delta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a DDFN checkpoint")
    off = 4
    try:
        version, n_widths = struct.unpack_from("<II", blob, off)
        off += 8
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        widths = struct.unpack_from(f"<{n_widths}I", blob, off)
        off += 4 * n_widths
        (delta,) = struct.unpack_from("<d", blob, off)
        off += 8
    except struct.error as exc:
        raise DataError(f"{path}: truncated checkpoint header") from exc
    vs, gs, bs = [], [], []
    for i in range(len(widths) - 1):
        n_out, n_in = widths[i + 1], widths[i]
        need = (n_out * n_in + 2 * n_out) * 8
        if off + need > len(blob):
            raise DataError(f"{path}: truncated checkpoint (layer {i})")
        v = np.frombuffer(blob, dtype="<f8", count=n_out * n_in,
                          offset=off).reshape(n_out, n_in).copy()
        off += n_out * n_in * 8
        g = np.frombuffer(blob, dtype="<f8", count=n_out, offset=off).copy()
        off += n_out * 8
        b = np.frombuffer(blob, dtype="<f8", count=n_out, offset=off).copy()
        off += n_out * 8
        vs.append(v)
        gs.append(g)
        bs.append(b)
    if off != len(blob):
        raise DataError(f"{path}: {len(blob) - off} trailing bytes in checkpoint")
    return MlpModel(widths=tuple(widths), v=vs, g=gs, b=bs), float(delta)
