"""Dense networks with hand-written reverse-mode gradients and Adam.

Everything is float64 and functional: ``forward`` returns a cache that
``backward`` consumes, and ``adam_step`` returns updated copies. A layer is
linear -> optional layer norm -> activation; that stack covers every network
in this project (effect models, policy, critic, discriminator, inverse
model). No general autodiff graph, no convolutions.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .common import StructuralError

LN_EPS = 1e-5

ACTIVATIONS = ("tanh", "elu", "identity")


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "elu":
        return np.where(z > 0.0, z, np.expm1(z))
    if name == "identity":
        return z
    raise StructuralError(f"unknown activation {name!r}")


def _activate_deriv(name: str, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    # Derivative w.r.t. the pre-activation, expressed via the output where
    # that is cheaper (tanh' = 1 - y^2, elu' = y + 1 on the negative branch).
    if name == "tanh":
        return 1.0 - out * out
    if name == "elu":
        return np.where(z > 0.0, 1.0, out + 1.0)
    if name == "identity":
        return np.ones_like(z)
    raise StructuralError(f"unknown activation {name!r}")


def layer_norm(x: np.ndarray) -> np.ndarray:
    """Normalize a vector (or batch of vectors) to mean 0, variance 1.

    Zero-variance inputs map to zeros through the epsilon floor.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise StructuralError("layer_norm needs dim >= 2")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def _layer_norm_fwd(u: np.ndarray):
    mu = u.mean(axis=-1, keepdims=True)
    var = u.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    y = (u - mu) * inv
    return y, inv


def _layer_norm_bwd(g: np.ndarray, y: np.ndarray, inv: np.ndarray) -> np.ndarray:
    # For y = (u - mean(u)) * inv:  du = inv * (g - mean(g) - y * mean(g*y))
    gm = g.mean(axis=-1, keepdims=True)
    gym = (g * y).mean(axis=-1, keepdims=True)
    return inv * (g - gm - y * gym)


@dataclass
class DenseNet:
    """A stack of (linear, optional layer norm, activation) layers."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    layer_norm_flags: list[bool]

    def __post_init__(self):
        n = len(self.weights)
        if not (len(self.biases) == len(self.activations) == len(self.layer_norm_flags) == n):
            raise StructuralError("layer lists must have equal length")
        for k in range(n - 1):
            if self.weights[k + 1].shape[1] != self.weights[k].shape[0]:
                raise StructuralError(
                    f"layer {k} out dim {self.weights[k].shape[0]} does not chain "
                    f"into layer {k + 1} in dim {self.weights[k + 1].shape[1]}"
                )
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != b.shape[0]:
                raise StructuralError("bias dim must match weight out dim")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise StructuralError("non-finite parameters")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def with_params(self, params: list[np.ndarray]) -> "DenseNet":
        ws = [params[2 * k] for k in range(len(self.weights))]
        bs = [params[2 * k + 1] for k in range(len(self.weights))]
        return DenseNet(ws, bs, list(self.activations), list(self.layer_norm_flags))

    def copy(self) -> "DenseNet":
        return DenseNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
            list(self.layer_norm_flags),
        )

    def n_params(self) -> int:
        return sum(p.size for p in self.params())


def init_dense(
    sizes: list[int],
    activations: list[str],
    rng: np.random.Generator,
    layer_norm_flags: list[bool] | None = None,
) -> DenseNet:
    """Glorot-uniform weights (U +- sqrt(6/(fan_in+fan_out))), zero biases."""
    if len(activations) != len(sizes) - 1:
        raise StructuralError("need one activation per layer")
    if layer_norm_flags is None:
        layer_norm_flags = [False] * (len(sizes) - 1)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return DenseNet(ws, bs, list(activations), list(layer_norm_flags))


def forward(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Evaluate the net on ``x`` (shape (in,) or (batch, in)).

    Returns (output, cache); the cache is what ``backward`` needs and is
    only valid for this ``(net, x)`` pair.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != net.in_dim:
        raise StructuralError(f"input dim {x.shape[1]} != net in dim {net.in_dim}")
    cache = []
    h = x
    for w, b, act, ln in zip(net.weights, net.biases, net.activations, net.layer_norm_flags):
        u = h @ w.T + b
        if ln:
            z, inv = _layer_norm_fwd(u)
        else:
            z, inv = u, None
        out = _activate(act, z)
        cache.append((h, z, inv, out))
        h = out
    if squeeze:
        return h[0], cache
    return h, cache


def backward(net: DenseNet, cache: list, output_grad: np.ndarray):
    """Exact reverse-mode gradients for a prior ``forward`` call.

    ``output_grad`` has the output's shape; per-sample contributions are
    summed into the parameter gradients. Returns (param_grads, input_grad)
    with param_grads ordered as ``net.params()``.
    """
    if len(cache) != len(net.weights):
        raise StructuralError("cache does not match net")
    g = np.asarray(output_grad, dtype=np.float64)
    squeeze = g.ndim == 1
    if squeeze:
        g = g[None, :]
    if g.shape[1] != net.out_dim or g.shape[0] != cache[-1][3].shape[0]:
        raise StructuralError("output_grad shape does not match cache")
    w_grads = [None] * len(net.weights)
    b_grads = [None] * len(net.weights)
    for k in reversed(range(len(net.weights))):
        h, z, inv, out = cache[k]
        gz = g * _activate_deriv(net.activations[k], z, out)
        if net.layer_norm_flags[k]:
            gu = _layer_norm_bwd(gz, z, inv)
        else:
            gu = gz
        w_grads[k] = gu.T @ h
        b_grads[k] = gu.sum(axis=0)
        g = gu @ net.weights[k]
    grads = []
    for wg, bg in zip(w_grads, b_grads):
        grads.append(wg)
        grads.append(bg)
    if squeeze:
        return grads, g[0]
    return grads, g


@dataclass
class AdamState:
    """Adam moments for a flat list of parameter arrays.

    ``l2_weight`` is decoupled L2 applied as a gradient addition
    (l2_weight * param), so losses stay pure likelihoods in the logs.
    """

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float
    l2_weight: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: list[np.ndarray], lr: float, l2_weight: float = 0.0) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        step=0,
        lr=lr,
        l2_weight=l2_weight,
    )


def adam_step(
    state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]
) -> tuple[list[np.ndarray], AdamState]:
    if len(params) != len(state.m) or len(grads) != len(params):
        raise StructuralError("adam state / params / grads length mismatch")
    for k, g in enumerate(grads):
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in array {k} at adam step {state.step + 1}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.l2_weight != 0.0:
            g = g + state.l2_weight * p
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g * g
        m_hat = m_new / (1.0 - b1**t)
        v_hat = v_new / (1.0 - b2**t)
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m_new)
        new_v.append(v_new)
    return new_params, replace(state, m=new_m, v=new_v, step=t)


# ---------------------------------------------------------------------------
# Checkpoint format: header line "FORMNET v1", one JSON metadata line
# (named nets: layer sizes / activations / layer-norm flags, named extra
# arrays, free-form meta), then raw little-endian float64 in declaration
# order (per net: W then b per layer; then each extra array).
# ---------------------------------------------------------------------------

MAGIC = "FORMNET v1"


def _net_meta(net: DenseNet) -> dict:
    return {
        "sizes": [net.in_dim] + [w.shape[0] for w in net.weights],
        "activations": list(net.activations),
        "layer_norm": list(net.layer_norm_flags),
    }


def save_checkpoint(
    path,
    nets: dict[str, DenseNet],
    arrays: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    arrays = arrays or {}
    record = {
        "nets": [{"name": name, **_net_meta(net)} for name, net in nets.items()],
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays.items()],
        "meta": meta or {},
    }
    buf = io.BytesIO()
    buf.write((MAGIC + "\n").encode())
    buf.write((json.dumps(record, sort_keys=True) + "\n").encode())
    for net in nets.values():
        for p in net.params():
            buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    for a in arrays.values():
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, DenseNet], dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.readline().decode().rstrip("\n")
        if magic != MAGIC:
            raise StructuralError(f"bad checkpoint header {magic!r} in {path}")
        record = json.loads(f.readline().decode())
        blob = f.read()
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += n * 8
        return arr.astype(np.float64)

    nets = {}
    for entry in record["nets"]:
        sizes = entry["sizes"]
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            ws.append(take((fan_out, fan_in)))
            bs.append(take((fan_out,)))
        nets[entry["name"]] = DenseNet(ws, bs, entry["activations"], entry["layer_norm"])
    arrays = {e["name"]: take(tuple(e["shape"])) for e in record["arrays"]}
    if offset != len(blob):
        raise StructuralError(f"trailing bytes in checkpoint {path}")
    return nets, arrays, record["meta"]
