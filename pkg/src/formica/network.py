"""Permutation-equivariant bid-density network with hand-written gradients.

Architecture (tanh everywhere except the output layer)::

    e_j    = tanh(tanh(f_j W1 + b1) W2 + b2)          per-task encoder, 5 -> 64 -> 64
    c      = mean_j e_j                               set context, 64
    logits = tanh([e_j, c] W3 + b3) W4 + b4           decoder, 128 -> 64 -> B
    rho_j  = softmax(logits_j)

The context mean is accumulated with ``math.fsum`` per column, which is
correctly rounded and therefore independent of task order: permuting the
input rows permutes the output rows bit for bit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Scenario, characteristic_length
from .scenario import make_rng

__all__ = [
    "N_FEATURES",
    "FORMAT_VERSION",
    "NetParams",
    "ForwardTrace",
    "featurize",
    "init",
    "forward",
    "backward_logits",
    "backward_ce",
    "backward_vjp",
    "cross_entropy",
    "save",
    "load",
]

N_FEATURES = 5
HIDDEN = 64
FORMAT_VERSION = 1
_MAGIC = b"FORMICA\x00"
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")


@dataclass
class NetParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    W4: np.ndarray
    b4: np.ndarray
    lam: float = 0.0
    version: int = FORMAT_VERSION

    @property
    def n_bins(self) -> int:
        return self.W4.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def dims(self) -> dict:
        return {n: list(getattr(self, n).shape) for n in PARAM_NAMES}

    def copy(self) -> "NetParams":
        return NetParams(*(a.copy() for a in self.arrays()), lam=self.lam, version=self.version)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec) -> "NetParams":
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = [], 0
        for a in self.arrays():
            out.append(vec[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        if pos != vec.size:
            raise ValueError("flat vector has the wrong length")
        return NetParams(*out, lam=self.lam, version=self.version)

    def axpy(self, alpha: float, grad: "NetParams") -> "NetParams":
        """``self + alpha * grad`` over the network weights (``lam`` carried over)."""
        return NetParams(*(a + alpha * g for a, g in zip(self.arrays(), grad.arrays())),
                         lam=self.lam, version=self.version)


@dataclass
class ForwardTrace:
    feats: np.ndarray
    a1: np.ndarray
    e: np.ndarray
    u: np.ndarray
    a3: np.ndarray
    rho: np.ndarray = field(repr=False)


def featurize(scenario: Scenario) -> np.ndarray:
    """``[x/W, y/H, R/mean(R), 1/ell, log N]`` for every task, shape (T, 5)."""
    T = scenario.n_tasks
    if T < 1:
        raise ValueError("need at least one task to featurize")
    W, H = scenario.workspace.width, scenario.workspace.height
    r = scenario.rewards
    out = np.empty((T, N_FEATURES))
    out[:, 0] = scenario.task_pos[:, 0] / W
    out[:, 1] = scenario.task_pos[:, 1] / H
    out[:, 2] = r / (math.fsum(r) / T)
    out[:, 3] = 1.0 / characteristic_length(scenario)
    out[:, 4] = math.log(scenario.n_robots)
    return out


def init(seed: int, n_bins: int = 64) -> NetParams:
    """Fan-in scaled uniform weights ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero biases."""
    rng = make_rng(seed)
    shapes = [(N_FEATURES, HIDDEN), (HIDDEN, HIDDEN), (2 * HIDDEN, HIDDEN), (HIDDEN, n_bins)]
    arrays = []
    for fan_in, fan_out in shapes:
        bound = 1.0 / math.sqrt(fan_in)
        arrays.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        arrays.append(np.zeros(fan_out))
    return NetParams(*arrays)


def _pool_mean(e: np.ndarray) -> np.ndarray:
    T = e.shape[0]
    return np.array([math.fsum(col) for col in e.T]) / T


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def forward(params: NetParams, feats) -> tuple[np.ndarray, ForwardTrace]:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != params.W1.shape[0]:
        raise ValueError(f"expected features of shape (T, {params.W1.shape[0]}), got {feats.shape}")
    a1 = np.tanh(feats @ params.W1 + params.b1)
    e = np.tanh(a1 @ params.W2 + params.b2)
    c = _pool_mean(e)
    u = np.concatenate([e, np.broadcast_to(c, e.shape)], axis=1)
    a3 = np.tanh(u @ params.W3 + params.b3)
    logits = a3 @ params.W4 + params.b4
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite activations in density network")
    rho = _softmax(logits)
    return rho, ForwardTrace(feats=feats, a1=a1, e=e, u=u, a3=a3, rho=rho)


def backward_logits(params: NetParams, trace: ForwardTrace, dlogits) -> NetParams:
    """Parameter gradient given the cotangent on the logits, shape (T, B)."""
    dlogits = np.asarray(dlogits, dtype=np.float64)
    T = trace.feats.shape[0]
    dW4 = trace.a3.T @ dlogits
    db4 = dlogits.sum(axis=0)
    dpre3 = (dlogits @ params.W4.T) * (1.0 - trace.a3 ** 2)
    dW3 = trace.u.T @ dpre3
    db3 = dpre3.sum(axis=0)
    du = dpre3 @ params.W3.T
    de = du[:, :HIDDEN] + du[:, HIDDEN:].sum(axis=0) / T
    dpre2 = de * (1.0 - trace.e ** 2)
    dW2 = trace.a1.T @ dpre2
    db2 = dpre2.sum(axis=0)
    dpre1 = (dpre2 @ params.W2.T) * (1.0 - trace.a1 ** 2)
    dW1 = trace.feats.T @ dpre1
    db1 = dpre1.sum(axis=0)
    return NetParams(dW1, db1, dW2, db2, dW3, db3, dW4, db4, lam=0.0)


def cross_entropy(rho, target) -> float:
    """``-(1/T) sum_j sum_b target log rho``."""
    rho = np.asarray(rho)
    return float(-np.sum(np.asarray(target) * np.log(rho)) / rho.shape[0])


def backward_ce(params: NetParams, trace: ForwardTrace, target) -> NetParams:
    target = np.asarray(target, dtype=np.float64)
    T = target.shape[0]
    # softmax + CE: d/dlogits = rho * sum(target) - target, scaled by 1/T
    dlogits = (trace.rho * target.sum(axis=1, keepdims=True) - target) / T
    return backward_logits(params, trace, dlogits)


def backward_vjp(params: NetParams, trace: ForwardTrace, upstream) -> NetParams:
    """Gradient of ``sum(upstream * rho)`` with respect to the parameters."""
    up = np.asarray(upstream, dtype=np.float64)
    rho = trace.rho
    dlogits = rho * (up - np.sum(up * rho, axis=1, keepdims=True))
    return backward_logits(params, trace, dlogits)


# --- checkpoints ---------------------------------------------------------

def save(params: NetParams, path) -> None:
    """Magic, little-endian u32 header length, JSON header, then ``<f8`` arrays row-major."""
    header = json.dumps({
        "format_version": params.version,
        "B": params.n_bins,
        "dims": params.dims(),
        "lam": params.lam,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load(path) -> NetParams:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC) or len(data) < len(_MAGIC) + 4:
        raise ValueError(f"{path}: not a density-network checkpoint")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        header = json.loads(data[pos:pos + hlen])
    except ValueError:
        raise ValueError(f"{path}: corrupt checkpoint header") from None
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    dims = header["dims"]
    arrays = []
    for name in PARAM_NAMES:
        shape = tuple(dims[name])
        n = int(np.prod(shape)) * 8
        if pos + n > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        arrays.append(np.frombuffer(data, dtype="<f8", count=n // 8, offset=pos).astype(np.float64).reshape(shape))
        pos += n
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    params = NetParams(*arrays, lam=float(header["lam"]), version=header["format_version"])
    expected = {"W1": (N_FEATURES, HIDDEN), "W2": (HIDDEN, HIDDEN), "W3": (2 * HIDDEN, HIDDEN)}
    if any(params.dims()[k] != list(v) for k, v in expected.items()) or params.n_bins != header["B"] \
            or params.W4.shape[0] != HIDDEN or params.b4.shape != (params.n_bins,):
        raise ValueError(f"{path}: layer shapes do not match the network architecture")
    return params
