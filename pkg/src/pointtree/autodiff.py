"""Minimal reverse-mode differentiation over the op set the tree encoder needs.

Define-by-run tape over float64 numpy arrays (rank <= 3, laid out as
batch x items x features).  Ops: dense linear map, bias add, ReLU,
componentwise max of two tensors, concatenation, item gather, item mean,
per-sample 3x3 point transform, fixed affine standardization, and
softmax cross-entropy.  Every forward op validates finiteness; backward
visits the tape in exact reverse topological order, so gradients are
bitwise reproducible for identical graphs.
"""
from __future__ import annotations

import struct
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NonFiniteValue, ShapeMismatch
from .rng import make_rng

# Minimum |pre-activation| distance from a ReLU/max kink for a point to be
# considered safe for finite-difference checking.
KINK_TOL = 1e-5

_kink_tracker: Optional[List[float]] = None


class Tensor:
    """A float64 value node on the tape."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "name")

    def __init__(self, data, parents: Tuple["Tensor", ...] = (),
                 backward_fn: Optional[Callable[[np.ndarray], None]] = None,
                 name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 3:
            raise ShapeMismatch(f"rank {self.data.ndim} exceeds the supported rank 3")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValue(f"non-finite values entering tensor {name or ''}")
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"


def _result(data: np.ndarray, parents, backward_fn, name=None) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"op {name or backward_fn.__qualname__} produced NaN/Inf")
    return Tensor(data, parents=tuple(parents), backward_fn=backward_fn)


def _note_kinks(distances: np.ndarray) -> None:
    if _kink_tracker is not None and distances.size:
        _kink_tracker.append(float(np.min(distances)))


class track_kinks:
    """Context manager recording how close any ReLU/max input came to a kink."""

    def __enter__(self):
        global _kink_tracker
        self._saved = _kink_tracker
        _kink_tracker = []
        return self

    def __exit__(self, *exc):
        global _kink_tracker
        self._log, _kink_tracker = _kink_tracker, self._saved
        return False

    @property
    def min_distance(self) -> float:
        return min(self._log) if self._log else np.inf


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T with w of shape (out_features, in_features)."""
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[1]:
        raise ShapeMismatch(f"linear: x {x.data.shape} incompatible with w {w.data.shape}")
    out = x.data @ w.data.T

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g @ w.data)
        _accumulate(w, g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.data.shape[-1]))

    return _result(out, (x, w), backward, "linear")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeMismatch(f"add_bias: x {x.data.shape} incompatible with b {b.data.shape}")
    out = x.data + b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g)
        _accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _result(out, (x, b), backward, "add_bias")


def relu(x: Tensor) -> Tensor:
    _note_kinks(np.abs(x.data))
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _result(out, (x,), backward, "relu")


def pointwise_max(x: Tensor, y: Tensor) -> Tensor:
    """Componentwise maximum; ties route the gradient to the first argument."""
    if x.data.shape != y.data.shape:
        raise ShapeMismatch(f"pointwise_max: {x.data.shape} vs {y.data.shape}")
    _note_kinks(np.abs(x.data - y.data))
    take_x = x.data >= y.data
    out = np.where(take_x, x.data, y.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * take_x)
        _accumulate(y, g * ~take_x)

    return _result(out, (x, y), backward, "pointwise_max")


def concat(x: Tensor, y: Tensor) -> Tensor:
    """Concatenate along the feature (last) axis."""
    if x.data.shape[:-1] != y.data.shape[:-1]:
        raise ShapeMismatch(f"concat: {x.data.shape} vs {y.data.shape}")
    out = np.concatenate([x.data, y.data], axis=-1)
    nx = x.data.shape[-1]

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g[..., :nx])
        _accumulate(y, g[..., nx:])

    return _result(out, (x, y), backward, "concat")


def gather_items(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows along the items (second-to-last) axis; rows may repeat."""
    if x.data.ndim < 2:
        raise ShapeMismatch("gather_items needs an items axis")
    idx = np.asarray(indices, dtype=np.int64)
    lead = (slice(None),) * (x.data.ndim - 2)
    out = x.data[lead + (idx,)]

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, lead + (idx,), g)
        _accumulate(x, gx)

    return _result(out, (x,), backward, "gather_items")


def mean_items(x: Tensor) -> Tensor:
    """Average over the items axis."""
    if x.data.ndim < 2:
        raise ShapeMismatch("mean_items needs an items axis")
    count = x.data.shape[-2]
    out = x.data.mean(axis=-2)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.repeat(np.expand_dims(g / count, -2), count, axis=-2))

    return _result(out, (x,), backward, "mean_items")


def transform_points(x: Tensor, matrices: Tensor) -> Tensor:
    """Apply a per-sample 3x3 matrix (flattened to 9) to every point row."""
    if x.data.ndim != 3 or x.data.shape[-1] != 3:
        raise ShapeMismatch(f"transform_points expects (batch, n, 3), got {x.data.shape}")
    if matrices.data.shape != (x.data.shape[0], 9):
        raise ShapeMismatch(f"matrices must be (batch, 9), got {matrices.data.shape}")
    m = matrices.data.reshape(-1, 3, 3)
    out = np.einsum("bni,bji->bnj", x.data, m)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.einsum("bnj,bji->bni", g, m))
        _accumulate(matrices, np.einsum("bnj,bni->bji", g, x.data).reshape(-1, 9))

    return _result(out, (x, matrices), backward, "transform_points")


def standardize(x: Tensor, mean: np.ndarray, std: np.ndarray) -> Tensor:
    """Fixed per-feature affine normalization (constants, no gradient to them)."""
    out = (x.data - mean) / std

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g / std)

    return _result(out, (x,), backward, "standardize")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the last axis (plain ndarray)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_xent(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer targets.

    Accepts (batch, classes) or (batch, items, classes); targets match the
    leading shape.
    """
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != logits.data.shape[:-1]:
        raise ShapeMismatch(f"targets {t.shape} do not match logits {logits.data.shape}")
    flat = logits.data.reshape(-1, logits.data.shape[-1])
    tf = t.reshape(-1)
    logp = log_softmax(flat)
    rows = np.arange(flat.shape[0])
    out = -logp[rows, tf].mean()

    def backward(g: np.ndarray) -> None:
        grad = np.exp(logp)
        grad[rows, tf] -= 1.0
        _accumulate(logits, (g * grad / flat.shape[0]).reshape(logits.data.shape))

    return _result(np.asarray(out), (logits,), backward, "softmax_xent")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen: set = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; gradients accumulate per use."""
    if loss.data.ndim != 0:
        raise ShapeMismatch(f"backward expects a scalar loss, got {loss.data.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


class ParamStore:
    """Named parameter registry with checkpoint serialization."""

    MAGIC = b"PTW1"

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def register(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.array(values, dtype=np.float64), name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> List[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def copy_values(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_values(self, values: Dict[str, np.ndarray]) -> None:
        for name, array in values.items():
            t = self._params[name]
            if t.data.shape != array.shape:
                raise ShapeMismatch(f"{name}: checkpoint shape {array.shape} "
                                    f"!= parameter shape {t.data.shape}")
            t.data = np.array(array, dtype=np.float64)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            for name, t in self._params.items():
                encoded = name.encode("utf-8")
                fh.write(struct.pack("<I", len(encoded)))
                fh.write(encoded)
                fh.write(struct.pack("<I", t.data.ndim))
                fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
                fh.write(t.data.astype("<f8").tobytes())

    @classmethod
    def read(cls, path) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        with open(path, "rb") as fh:
            if fh.read(4) != cls.MAGIC:
                raise ValueError(f"{path} is not a parameter checkpoint")
            while True:
                head = fh.read(4)
                if not head:
                    break
                (name_len,) = struct.unpack("<I", head)
                name = fh.read(name_len).decode("utf-8")
                (rank,) = struct.unpack("<I", fh.read(4))
                dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
                count = int(np.prod(dims)) if dims else 1
                values = np.frombuffer(fh.read(8 * count), dtype="<f8")
                out[name] = values.reshape(dims).copy()
        return out


class Adam:
    """Adam over a ParamStore; reads .grad left by backward()."""

    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self._m = {k: np.zeros_like(t.data) for k, t in store.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in store.items()}

    def step(self) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name, t in self.store.items():
            if t.grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * t.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * t.grad ** 2
            t.data = t.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for _, t in self.store.items():
            t.grad = None


def grad_check(f: Callable[[Tensor], Tensor], point: np.ndarray,
               eps: float = 1e-6, seed: int = 0, max_jitter: int = 50) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` builds a scalar loss from the given tensor.  The evaluation point is
    jittered until no ReLU/max pre-activation sits within KINK_TOL of a kink,
    so the finite differences probe a locally smooth function.
    """
    base = np.asarray(point, dtype=np.float64)
    x = base
    for attempt in range(max_jitter):
        with track_kinks() as kinks:
            probe = Tensor(x.copy(), name="grad_check_point")
            loss = f(probe)
        if loss.data.ndim != 0:
            raise ShapeMismatch("grad_check needs a scalar-valued function")
        if kinks.min_distance > KINK_TOL:
            break
        x = base + make_rng(seed, attempt).normal(scale=1e-3, size=base.shape)
    backward(loss)
    analytic = np.zeros_like(x) if probe.grad is None else probe.grad

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = float(f(Tensor(bumped.reshape(x.shape))).data)
        bumped[i] = flat[i] - eps
        lo = float(f(Tensor(bumped.reshape(x.shape))).data)
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
