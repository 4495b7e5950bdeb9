"""Locally quadratic ensemble value function.

``V(x) = -y^T L(x) L(x)^T y`` with ``y`` the goal-centred features of ``x`` and
``L`` the mean of ``N`` lower-triangular network outputs (softplus diagonal plus
a small floor). Continuous joints enter as ``(sin, cos)`` differences so the
form respects angle periodicity; everything else enters raw.

Gradients are written out by hand (reverse mode through a small MLP); weights
are stacked over the ensemble so every layer is one batched matmul.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

DIAG_FLOOR = 1e-3
MAGIC = b"RFVICKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt or mismatched checkpoint."""


@dataclass(frozen=True)
class NetworkShape:
    state_dim: int
    hidden_widths: tuple[int, ...] = (96, 96)
    ensemble_size: int = 4
    activation: str = "tanh"

    def __post_init__(self):
        if not self.hidden_widths:
            raise ValueError("hidden_widths must be nonempty")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")


def _tanh(z):
    h = np.tanh(z, out=z)

    def deriv():
        d = h * h
        return np.subtract(1.0, d, out=d)

    return h, deriv


def _softplus_act(z):
    h = np.logaddexp(0.0, z)
    return h, lambda: _sigmoid(z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


_ACTIVATIONS = {"tanh": _tanh, "softplus": _softplus_act}


@dataclass(eq=False)
class ValueParams:
    weights: list[np.ndarray]  # (N, fan_in, fan_out) per layer
    biases: list[np.ndarray]  # (N, fan_out) per layer
    x_des: np.ndarray
    wrap_mask: np.ndarray
    input_scale: np.ndarray  # per feature
    activation: str = "tanh"
    meta: dict = field(default_factory=dict)

    @property
    def ensemble_size(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(w.shape[2] for w in self.weights[:-1])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays) -> "ValueParams":
        arrays = list(arrays)
        return ValueParams(
            weights=[a.copy() for a in arrays[0::2]],
            biases=[a.copy() for a in arrays[1::2]],
            x_des=self.x_des.copy(),
            wrap_mask=self.wrap_mask.copy(),
            input_scale=self.input_scale.copy(),
            activation=self.activation,
            meta=dict(self.meta),
        )

    def copy(self) -> "ValueParams":
        return self.with_arrays(self.arrays())

    def astype(self, dtype) -> "ValueParams":
        """Copy with network weights cast to ``dtype`` (features and output stay float64)."""
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])


def feature_dim(wrap_mask) -> int:
    wrap_mask = np.asarray(wrap_mask, dtype=bool)
    return int(len(wrap_mask) + wrap_mask.sum())


def _feature_layout(wrap_mask):
    """(source state index, kind) per feature; kind 0 raw, 1 sin, 2 cos."""
    src, kind = [], []
    for i, wrapped in enumerate(np.asarray(wrap_mask, dtype=bool)):
        if wrapped:
            src += [i, i]
            kind += [1, 2]
        else:
            src.append(i)
            kind.append(0)
    return np.array(src), np.array(kind)


def default_input_scale(wrap_mask, state_domain=None) -> np.ndarray:
    """Unit scale for trig features, inverse half-width of the domain for raw ones."""
    src, kind = _feature_layout(wrap_mask)
    scale = np.ones(len(src))
    if state_domain is not None:
        half = 0.5 * (np.asarray(state_domain)[:, 1] - np.asarray(state_domain)[:, 0])
        raw = kind == 0
        scale[raw] = 1.0 / half[src[raw]]
    return scale


def init_params(
    shape: NetworkShape,
    seed: int,
    x_des=None,
    wrap_mask=None,
    input_scale=None,
) -> ValueParams:
    """Fan-in scaled uniform initialisation from a seeded generator."""
    n = shape.state_dim
    x_des = np.zeros(n) if x_des is None else np.asarray(x_des, dtype=float)
    wrap_mask = np.zeros(n, bool) if wrap_mask is None else np.asarray(wrap_mask, dtype=bool)
    d = feature_dim(wrap_mask)
    scale = np.ones(d) if input_scale is None else np.asarray(input_scale, dtype=float)
    if scale.shape != (d,):
        raise ValueError(f"input_scale must have {d} entries")
    rng = np.random.default_rng(seed)
    widths = [d, *shape.hidden_widths, d * (d + 1) // 2]
    N = shape.ensemble_size
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(N, fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=(N, fan_out)))
    return ValueParams(weights, biases, x_des, wrap_mask, scale, shape.activation)


# --------------------------------------------------------------------------
# forward / backward


def _features(psi: ValueParams, x):
    src, kind = _feature_layout(psi.wrap_mask)
    xs = x[:, src]
    xd = psi.x_des[src]
    y = np.where(kind == 0, xs - xd, 0.0)
    y = np.where(kind == 1, np.sin(xs) - np.sin(xd), y)
    y = np.where(kind == 2, np.cos(xs) - np.cos(xd), y)
    dy = np.where(kind == 0, 1.0, np.where(kind == 1, np.cos(xs), -np.sin(xs)))
    return y, dy, src


def _tril(d):
    rows, cols = np.tril_indices(d)
    return rows, cols, rows == cols


def _forward(psi: ValueParams, x):
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    y, dy, src = _features(psi, x2)
    # the network runs in the dtype of its weights (float32 for fast rollouts)
    inp = (y * psi.input_scale).astype(psi.weights[0].dtype, copy=False)
    act = _ACTIVATIONS[psi.activation]
    hs, derivs = [inp], []
    h = inp
    for w, b in zip(psi.weights[:-1], psi.biases[:-1]):
        z = np.matmul(h, w)
        z += b[:, None, :]
        h, dact = act(z)
        hs.append(h)
        derivs.append(dact)
    raw = np.matmul(h, psi.weights[-1])
    raw += psi.biases[-1][:, None, :]  # (N, B, P)
    raw = raw.astype(float, copy=False)
    d = psi.feature_dim
    rows, cols, diag = _tril(d)
    ent = raw.copy()
    ent[..., diag] = np.logaddexp(0.0, raw[..., diag]) + DIAG_FLOOR
    Lbar = np.zeros((x2.shape[0], d, d))
    Lbar[:, rows, cols] = ent.mean(axis=0)
    s = np.einsum("bji,bj->bi", Lbar, y)
    V = -np.sum(s * s, axis=-1)
    cache = dict(y=y, dy=dy, src=src, hs=hs, derivs=derivs, raw=raw, Lbar=Lbar, s=s, lead=lead)
    return V, cache


def _backprop(psi: ValueParams, cache, coef, want_params: bool, want_input: bool):
    """Backpropagate ``sum_b coef_b * V_b`` through the ensemble network."""
    y, s, raw = cache["y"], cache["s"], cache["raw"]
    N = psi.ensemble_size
    rows, cols, diag = _tril(psi.feature_dim)
    # dV/dLbar = -2 y s^T restricted to the lower triangle
    gL = -2.0 * (coef[:, None] * y)[:, rows] * s[:, cols]
    g = np.broadcast_to(gL / N, raw.shape).copy()
    g[..., diag] *= _sigmoid(raw[..., diag])
    g = g.astype(psi.weights[0].dtype, copy=False)
    hs, derivs = cache["hs"], cache["derivs"]
    gW, gb = [None] * len(psi.weights), [None] * len(psi.weights)
    for k in range(len(psi.weights) - 1, -1, -1):
        h_prev = hs[k]
        if want_params:
            if h_prev.ndim == 2:
                gW[k] = np.matmul(h_prev.T, g)
            else:
                gW[k] = np.matmul(h_prev.transpose(0, 2, 1), g)
            gb[k] = g.sum(axis=1)
        if k == 0 and not want_input:
            break
        g = np.matmul(g, psi.weights[k].transpose(0, 2, 1))
        if k > 0:
            g *= derivs[k - 1]()
    grads = None
    if want_params:
        grads = []
        for w, b in zip(gW, gb):
            grads += [w, b]
    g_y = None
    if want_input:
        g_net = g.sum(axis=0, dtype=float) * psi.input_scale
        g_direct = -2.0 * coef[:, None] * np.einsum("bij,bj->bi", cache["Lbar"], s)
        g_y = g_direct + g_net
    return grads, g_y


def _to_state_gradient(psi, cache, g_y):
    n = len(psi.wrap_mask)
    out = np.zeros((g_y.shape[0], n))
    contrib = g_y * cache["dy"]
    for f, i in enumerate(cache["src"]):
        out[:, i] += contrib[:, f]
    return out


def value_forward(psi: ValueParams, x) -> np.ndarray:
    V, cache = _forward(psi, x)
    return V.reshape(cache["lead"])


def value_and_gradient(psi: ValueParams, x):
    """``V(x)`` and the exact input gradient ``dV/dx`` in one pass."""
    V, cache = _forward(psi, x)
    _, g_y = _backprop(psi, cache, np.ones_like(V), want_params=False, want_input=True)
    grad = _to_state_gradient(psi, cache, g_y)
    lead = cache["lead"]
    return V.reshape(lead), grad.reshape(lead + (-1,))


def value_input_gradient(psi: ValueParams, x) -> np.ndarray:
    return value_and_gradient(psi, x)[1]


def cholesky_factor(psi: ValueParams, x) -> np.ndarray:
    """Ensemble-mean lower-triangular factor ``L(x)``, shape (..., d, d)."""
    _, cache = _forward(psi, x)
    d = psi.feature_dim
    return cache["Lbar"].reshape(cache["lead"] + (d, d))


# --------------------------------------------------------------------------
# fitting


def _loss_terms(err, p, delta):
    if p == 2:
        return err * err, 2.0 * err
    if p == 1:
        a = np.abs(err)
        loss = np.where(a <= delta, 0.5 * err * err / delta, a - 0.5 * delta)
        return loss, np.clip(err / delta, -1.0, 1.0)
    raise ValueError("p must be 1 or 2")


def loss_and_gradient(psi: ValueParams, x, target, p: int = 1, delta: float = 1e-2):
    """Mean l_p loss (Huber-smoothed for p=1) and its parameter gradient."""
    V, cache = _forward(psi, x)
    target = np.asarray(target, dtype=float).reshape(-1)
    loss, dloss = _loss_terms(V - target, p, delta)
    coef = dloss / len(V)
    grads, _ = _backprop(psi, cache, coef, want_params=True, want_input=False)
    return float(loss.mean()), grads


def dataset_loss(psi: ValueParams, x, target, p: int = 1, delta: float = 1e-2, chunk: int = 8192) -> float:
    x = np.asarray(x, dtype=float)
    target = np.asarray(target, dtype=float)
    total = 0.0
    for i in range(0, len(x), chunk):
        V = value_forward(psi, x[i : i + chunk])
        total += float(_loss_terms(V - target[i : i + chunk], p, delta)[0].sum())
    return total / len(x)


@dataclass
class FitConfig:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    p: int = 1
    huber_delta: float = 1e-2
    seed: int = 0
    dtype: str = "float64"  # arithmetic of the optimisation steps


@dataclass
class FitResult:
    params: ValueParams
    loss_before: float
    loss_after: float
    n_rejected: int
    reverted: bool


class Adam:
    def __init__(self, arrays, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def fit(psi: ValueParams, x, target, config: FitConfig | None = None) -> FitResult:
    """Minibatch Adam on the l_p loss of the ensemble-mean value.

    Non-finite targets are dropped and counted. If the full-dataset loss ends
    above where it started, the input parameters are returned unchanged.
    """
    config = config or FitConfig()
    x = np.asarray(x, dtype=float)
    target = np.asarray(target, dtype=float).reshape(-1)
    ok = np.isfinite(target) & np.all(np.isfinite(x), axis=-1)
    n_rejected = int((~ok).sum())
    x, target = x[ok], target[ok]
    if len(x) == 0:
        raise ValueError("no finite samples to fit")
    before = dataset_loss(psi, x, target, config.p, config.huber_delta)
    work = psi.astype(np.dtype(config.dtype))
    arrays = work.arrays()
    opt = Adam(arrays, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(x), config.batch_size):
            idx = order[i : i + config.batch_size]
            _, grads = loss_and_gradient(work, x[idx], target[idx], config.p, config.huber_delta)
            opt.step(arrays, grads)
    work = work.astype(np.float64)
    after = dataset_loss(work, x, target, config.p, config.huber_delta)
    if after > before:
        return FitResult(psi.copy(), before, before, n_rejected, True)
    return FitResult(work, before, after, n_rejected, False)


# --------------------------------------------------------------------------
# checkpoints
#
# Layout (all little-endian):
#   8 bytes   magic b"RFVICKPT"
#   uint16    format version
#   uint32    header length H
#   H bytes   UTF-8 JSON header (shapes, activation, x_des, wrap_mask, input_scale, meta)
#   payload   float64 arrays W_1, b_1, ..., W_k, b_k in C order
#   uint32    CRC32 of the payload


def dumps(psi: ValueParams) -> bytes:
    header = {
        "format": "rfvi-value-params",
        "activation": psi.activation,
        "shapes": [list(a.shape) for a in psi.arrays()],
        "x_des": [float(v) for v in psi.x_des],
        "wrap_mask": [bool(v) for v in psi.wrap_mask],
        "input_scale": [float(v) for v in psi.input_scale],
        "meta": psi.meta,
    }
    head = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in psi.arrays())
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HI", FORMAT_VERSION, len(head)))
    out.write(head)
    out.write(payload)
    out.write(struct.pack("<I", zlib.crc32(payload)))
    return out.getvalue()


def loads(blob: bytes) -> ValueParams:
    if len(blob) < 14 or blob[:8] != MAGIC:
        raise CheckpointError("not an rfvi checkpoint (bad magic)")
    version, hlen = struct.unpack("<HI", blob[8:14])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[14 : 14 + hlen].decode())
        shapes = [tuple(s) for s in header["shapes"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = blob[14 + hlen : -4]
    expected = sum(int(np.prod(s)) for s in shapes) * 8
    if len(payload) != expected or len(blob) < 14 + hlen + 4:
        raise CheckpointError("checkpoint payload size does not match its header")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint payload checksum mismatch")
    arrays, offset = [], 0
    for s in shapes:
        count = int(np.prod(s))
        arrays.append(np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(s).astype(float))
        offset += count * 8
    return ValueParams(
        weights=arrays[0::2],
        biases=arrays[1::2],
        x_des=np.array(header["x_des"], dtype=float),
        wrap_mask=np.array(header["wrap_mask"], dtype=bool),
        input_scale=np.array(header["input_scale"], dtype=float),
        activation=header["activation"],
        meta=header.get("meta", {}),
    )


def save_checkpoint(psi: ValueParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(psi))


def load_checkpoint(path) -> ValueParams:
    with open(path, "rb") as fh:
        return loads(fh.read())
