"""Small float64 differentiable core: GRU, linear/softmax head, weight norm.

Parameters live in flat ``dict[str, ndarray]`` objects.  Every weight matrix
``M`` is stored weight-normalized as ``M.v`` (direction) and ``M.g`` (one
scale per output row); biases are plain.  :class:`GruNet` provides the
forward pass (recording a :class:`GradientTape`), reverse-mode gradients
through the whole unrolled sequence, and forward-mode Jacobian-vector
products (used for Fisher-vector products).
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DivergenceError, InvalidArgument, NumericalFailure, ProtocolViolation

Params = dict  # name -> np.ndarray

GATES = ("z", "r", "h")
MATRICES = tuple(f"W_{g}" for g in GATES) + tuple(f"U_{g}" for g in GATES) + ("W_out",)


sigmoid = expit  # logistic function, accurate in both tails


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def linear_softmax_head(h: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if h.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise InvalidArgument(f"head shapes {h.shape}, {weights.shape}, {bias.shape} disagree")
    return softmax(h @ weights.T + bias)


class Categorical:
    """Batched categorical distributions over the last axis of ``probs``."""

    def __init__(self, probs: np.ndarray):
        self.probs = np.asarray(probs, dtype=np.float64)

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "Categorical":
        return cls(softmax(logits))

    def sample(self, rng: np.random.Generator) -> int | np.ndarray:
        """Inverse CDF on one uniform draw per distribution."""
        return self.inverse_cdf(rng.random(self.probs.shape[:-1]))

    def inverse_cdf(self, u) -> int | np.ndarray:
        cdf = np.cumsum(self.probs, axis=-1)
        u = np.asarray(u) * cdf[..., -1]
        idx = (cdf <= u[..., None]).sum(axis=-1)
        idx = np.minimum(idx, self.probs.shape[-1] - 1)
        return int(idx) if idx.ndim == 0 else idx

    def log_prob(self, action) -> np.ndarray:
        action = np.asarray(action)
        return np.log(np.take_along_axis(self.probs, action[..., None], axis=-1)[..., 0])

    def entropy(self) -> np.ndarray:
        p = self.probs
        return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)

    def kl(self, other: "Categorical") -> np.ndarray:
        p, q = self.probs, other.probs
        if np.any((p > 0) & (q <= 0)):
            raise DivergenceError("KL divergence is infinite: q has zero mass where p is positive")
        safe_p = np.where(p > 0, p, 1.0)
        safe_q = np.where(p > 0, q, 1.0)
        return np.sum(np.where(p > 0, p * (np.log(safe_p) - np.log(safe_q)), 0.0), axis=-1)


# ---------------------------------------------------------------------------
# Weight normalization


@dataclass
class WeightNormParam:
    v: np.ndarray
    g: np.ndarray

    @property
    def weight(self) -> np.ndarray:
        return weight_norm(self.v, self.g)


def weight_norm(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", v, v))
    if np.any(norms <= 0):
        raise InvalidArgument("weight-norm direction rows must be non-zero")
    return (g / norms)[:, None] * v


def weight_norm_backward(v, g, grad_w):
    norms = np.sqrt(np.einsum("ij,ij->i", v, v))
    s = np.einsum("ij,ij->i", grad_w, v)
    dg = s / norms
    dv = (g / norms)[:, None] * (grad_w - v * (s / norms**2)[:, None])
    return dv, dg


def weight_norm_jvp(v, g, dv, dg):
    norms = np.sqrt(np.einsum("ij,ij->i", v, v))
    s = np.einsum("ij,ij->i", v, dv)
    return (dg / norms)[:, None] * v + (g / norms)[:, None] * (dv - v * (s / norms**2)[:, None])


# ---------------------------------------------------------------------------
# GRU


@dataclass
class GruParams:
    """Effective (already weight-normalized) GRU weights."""

    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    @property
    def hidden(self) -> int:
        return self.U_z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]


def _gru_step_full(x, h, p: GruParams):
    z = sigmoid(x @ p.W_z.T + h @ p.U_z.T + p.b_z)
    r = sigmoid(x @ p.W_r.T + h @ p.U_r.T + p.b_r)
    rh = r * h
    ht = np.tanh(x @ p.W_h.T + rh @ p.U_h.T + p.b_h)
    h_new = (1.0 - z) * h + z * ht
    return h_new, z, r, rh, ht


def gru_step(x: np.ndarray, h: np.ndarray, params: GruParams) -> np.ndarray:
    """z = s(W_z x + U_z h + b_z); r = s(W_r x + U_r h + b_r);
    h~ = tanh(W_h x + U_h (r*h) + b_h); h' = (1 - z) h + z h~."""
    if x.shape[-1] != params.input_dim or h.shape[-1] != params.hidden:
        raise InvalidArgument(
            f"gru_step got x[..., {x.shape[-1]}], h[..., {h.shape[-1]}] for "
            f"input {params.input_dim}, hidden {params.hidden}"
        )
    return _gru_step_full(x, h, params)[0]


class GradientTape:
    """Activations recorded by :meth:`GruNet.forward`; consumed by backward/jvp."""

    def __init__(self):
        self.recorded = False

    def record(self, **values):
        self.__dict__.update(values)
        self.recorded = True
        return self


class GruNet:
    """GRU core followed by a linear output layer.

    ``out_dim`` is the number of actions for a policy (logits) or 1 for a
    value function.
    """

    def __init__(self, input_dim: int, hidden: int, out_dim: int):
        self.input_dim = input_dim
        self.hidden = hidden
        self.out_dim = out_dim

    # -- parameters ---------------------------------------------------------

    def shapes(self) -> dict[str, tuple[int, ...]]:
        D, H, O = self.input_dim, self.hidden, self.out_dim
        shapes = {}
        for gate in GATES:
            shapes[f"W_{gate}.v"], shapes[f"W_{gate}.g"] = (H, D), (H,)
            shapes[f"U_{gate}.v"], shapes[f"U_{gate}.g"] = (H, H), (H,)
            shapes[f"b_{gate}"] = (H,)
        shapes["W_out.v"], shapes["W_out.g"] = (O, H), (O,)
        shapes["b_out"] = (O,)
        return shapes

    def init_params(self, rng: np.random.Generator, zero_head: bool = False) -> Params:
        """Orthogonal hidden-to-hidden, Xavier-uniform elsewhere, zero biases.

        Scales start at the row norms of the drawn directions, so the initial
        effective weights equal the raw draws.  ``zero_head`` zeroes the
        output scales (uniform initial policy).
        """
        D, H, O = self.input_dim, self.hidden, self.out_dim
        params: Params = {}

        def xavier(fan_out, fan_in):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_out, fan_in))

        for gate in GATES:
            params[f"W_{gate}.v"] = xavier(H, D)
            params[f"U_{gate}.v"] = orthogonal(rng, H)
            params[f"b_{gate}"] = np.zeros(H)
        params["W_out.v"] = xavier(O, H)
        params["b_out"] = np.zeros(O)
        for name in MATRICES:
            v = params[f"{name}.v"]
            params[f"{name}.g"] = np.sqrt(np.einsum("ij,ij->i", v, v))
        if zero_head:
            params["W_out.g"] = np.zeros(O)
        return {k: params[k] for k in self.shapes()}

    def zero_params(self) -> Params:
        """All scales and biases zero (effective weights zero); directions fixed non-zero."""
        params = {}
        for name, shape in self.shapes().items():
            if name.endswith(".v"):
                v = np.zeros(shape)
                np.fill_diagonal(v, 1.0)
                v[:, 0] += 1.0
                params[name] = v
            else:
                params[name] = np.zeros(shape)
        return params

    def effective(self, params: Params) -> tuple[GruParams, np.ndarray, np.ndarray]:
        w = {name: weight_norm(params[f"{name}.v"], params[f"{name}.g"]) for name in MATRICES}
        gru = GruParams(
            w["W_z"], w["W_r"], w["W_h"], w["U_z"], w["U_r"], w["U_h"],
            params["b_z"], params["b_r"], params["b_h"],
        )
        return gru, w["W_out"], params["b_out"]

    # -- evaluation ---------------------------------------------------------

    def step(self, eff, x: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gru, W_out, b_out = eff
        h_new = gru_step(x, h, gru)
        return h_new, h_new @ W_out.T + b_out

    def forward(self, params: Params, X: np.ndarray, h0: np.ndarray | None = None) -> GradientTape:
        """Run over time-major inputs ``X[T, B, D]``; ``tape.out`` is ``[T, B, O]``."""
        if X.ndim != 3 or X.shape[2] != self.input_dim:
            raise InvalidArgument(f"expected inputs [T, B, {self.input_dim}], got {X.shape}")
        eff = self.effective(params)
        gru, W_out, b_out = eff
        T, B, _ = X.shape
        H = self.hidden
        hs = np.empty((T + 1, B, H))
        hs[0] = 0.0 if h0 is None else h0
        z, r, rh, ht = (np.empty((T, B, H)) for _ in range(4))
        out = np.empty((T, B, self.out_dim))
        for t in range(T):
            hs[t + 1], z[t], r[t], rh[t], ht[t] = _gru_step_full(X[t], hs[t], gru)
            out[t] = hs[t + 1] @ W_out.T + b_out
        return GradientTape().record(X=X, hs=hs, z=z, r=r, rh=rh, ht=ht, out=out, eff=eff)

    def backward(self, params: Params, tape: GradientTape, d_out: np.ndarray, d_h_last: np.ndarray | None = None) -> Params:
        """Gradients of ``sum(d_out * tape.out)`` (plus ``d_h_last . h_T``) w.r.t. ``params``."""
        if not getattr(tape, "recorded", False):
            raise ProtocolViolation("backward called before a forward pass was recorded")
        gru, W_out, _ = tape.eff
        X, hs, z, r, rh, ht = tape.X, tape.hs, tape.z, tape.r, tape.rh, tape.ht
        T, B, H = z.shape
        grads_w = {}
        grads_w["W_out"] = np.tensordot(d_out, hs[1:], axes=((0, 1), (0, 1)))
        d_b_out = d_out.sum(axis=(0, 1))
        dH = d_out @ W_out
        da = {g: np.empty((T, B, H)) for g in GATES}
        dh_next = np.zeros((B, H)) if d_h_last is None else d_h_last.copy()
        for t in range(T - 1, -1, -1):
            dh = dH[t] + dh_next
            h = hs[t]
            dz = dh * (ht[t] - h)
            dah = dh * z[t] * (1.0 - ht[t] ** 2)
            drh = dah @ gru.U_h
            dar = drh * h * r[t] * (1.0 - r[t])
            daz = dz * z[t] * (1.0 - z[t])
            dh_next = dh * (1.0 - z[t]) + drh * r[t] + dar @ gru.U_r + daz @ gru.U_z
            da["h"][t], da["r"][t], da["z"][t] = dah, dar, daz
        grads: Params = {}
        for g in GATES:
            grads_w[f"W_{g}"] = np.tensordot(da[g], X, axes=((0, 1), (0, 1)))
            rec_in = rh if g == "h" else hs[:-1]
            grads_w[f"U_{g}"] = np.tensordot(da[g], rec_in, axes=((0, 1), (0, 1)))
            grads[f"b_{g}"] = da[g].sum(axis=(0, 1))
        grads["b_out"] = d_b_out
        for name in MATRICES:
            grads[f"{name}.v"], grads[f"{name}.g"] = weight_norm_backward(
                params[f"{name}.v"], params[f"{name}.g"], grads_w[name]
            )
        return {k: grads[k] for k in params}

    def jvp(self, params: Params, tape: GradientTape, tangent: Params) -> np.ndarray:
        """Directional derivative of ``tape.out`` along ``tangent``; shape ``[T, B, O]``."""
        if not getattr(tape, "recorded", False):
            raise ProtocolViolation("jvp called before a forward pass was recorded")
        gru, W_out, _ = tape.eff
        dw = {
            name: weight_norm_jvp(params[f"{name}.v"], params[f"{name}.g"], tangent[f"{name}.v"], tangent[f"{name}.g"])
            for name in MATRICES
        }
        X, hs, z, r, rh, ht = tape.X, tape.hs, tape.z, tape.r, tape.rh, tape.ht
        T, B, H = z.shape
        xin = {g: X @ dw[f"W_{g}"].T + tangent[f"b_{g}"] for g in GATES}
        d_out = np.empty((T, B, self.out_dim))
        dh = np.zeros((B, H))
        for t in range(T):
            h = hs[t]
            dz = z[t] * (1.0 - z[t]) * (xin["z"][t] + dh @ gru.U_z.T + h @ dw["U_z"].T)
            dr = r[t] * (1.0 - r[t]) * (xin["r"][t] + dh @ gru.U_r.T + h @ dw["U_r"].T)
            drh = dr * h + r[t] * dh
            dht = (1.0 - ht[t] ** 2) * (xin["h"][t] + drh @ gru.U_h.T + rh[t] @ dw["U_h"].T)
            dh = dz * (ht[t] - h) + (1.0 - z[t]) * dh + z[t] * dht
            d_out[t] = dh @ W_out.T + hs[t + 1] @ dw["W_out"].T + tangent["b_out"]
        return d_out


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


# ---------------------------------------------------------------------------
# Flat-vector helpers


def flatten(params: Params) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in params])


def unflatten(vector: np.ndarray, like: Params) -> Params:
    total = sum(v.size for v in like.values())
    if total != vector.size:
        raise InvalidArgument(f"vector of size {vector.size} does not match parameters of size {total}")
    out, offset = {}, 0
    for k, v in like.items():
        out[k] = vector[offset : offset + v.size].reshape(v.shape)
        offset += v.size
    return out


def add_scaled(params: Params, direction: Params, scale: float) -> Params:
    return {k: params[k] + scale * direction[k] for k in params}


def global_norm(grads: Params) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Params, max_norm: float) -> Params:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def check_finite(what: str, *arrays) -> None:
    for a in arrays:
        values = a.values() if isinstance(a, dict) else [a]
        for v in values:
            if not np.all(np.isfinite(v)):
                raise NumericalFailure(f"non-finite values in {what}")


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: Params = {}
        self.v: Params = {}
        self.t = 0

    def step(self, params: Params, grads: Params) -> Params:
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            out[k] = params[k] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout: b"MRLCKPT1" | u64 manifest length | manifest JSON | float64 LE blobs.
# The manifest lists every array with its shape and byte offset (relative to
# the start of the blob section) plus free-form metadata.

CHECKPOINT_MAGIC = b"MRLCKPT1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "dtype": "float64-le", "arrays": entries, "metadata": metadata or {}}
    ).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise InvalidArgument(f"{path} is not a checkpoint file")
    (length,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + length])
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidArgument(f"unsupported checkpoint version {manifest.get('format_version')}")
    base = 16 + length
    arrays = {}
    for entry in manifest["arrays"]:
        start = base + entry["offset"]
        arr = np.frombuffer(raw[start : start + entry["nbytes"]], dtype="<f8").astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return arrays, manifest["metadata"]
