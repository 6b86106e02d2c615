"""
Dense tensors with eager reverse-mode differentiation.

A Tensor is a float numpy array (row-major). A Graph evaluates every
operation immediately, caches the output on a node, and keeps a
vector-Jacobian closure so that backward() can walk the nodes in reverse
creation order. Node ids are plain integers; creation order is a valid
topological order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

GELU_K = float(np.sqrt(2.0 / np.pi))
GELU_C = 0.044715


@dataclass(frozen=True)
class LayerNormStats:
    """Per-token statistics of a LayerNorm call. std is sqrt(var + eps)."""

    mean: np.ndarray
    std: np.ndarray


@dataclass
class Node:
    kind: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    vjp: Optional[VJP] = None


# ---------------------------------------------------------------------------
# Array kernels (no graph)
# ---------------------------------------------------------------------------


def _is_scalar(t: np.ndarray) -> bool:
    return t.size == 1


def _check_broadcast(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum(), dtype=g.dtype)


def _gelu_parts(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    inner = GELU_K * (x + GELU_C * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * GELU_K * (1.0 + 3.0 * GELU_C * x**2)
    return y, dy


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product of a [m×k] and b [k×n]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_lastdim(t: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max-subtraction."""
    if t.ndim == 0 or t.shape[-1] < 1:
        raise DimensionError(f"softmax_lastdim: last extent must be >= 1, got shape {t.shape}")
    shifted = t - t.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(
    t: Tensor, gain: Tensor, bias: Tensor, eps: float
) -> Tuple[Tensor, LayerNormStats]:
    """
    Normalize each token (row) of t with population variance.

    Args:
        t: Array of shape (n_tokens, d)
        gain: Array of shape (d,)
        bias: Array of shape (d,)
        eps: Added to the variance before the square root

    Returns:
        Tuple of (normalized tokens, per-token mean and std)
    """
    if t.ndim != 2 or t.shape[1] < 1:
        raise DimensionError(f"layer_norm: expected (n_tokens, d) with d >= 1, got {t.shape}")
    d = t.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}"
        )
    if eps < 0:
        raise ContractError(f"layer_norm: eps must be non-negative, got {eps}")
    mean = t.mean(axis=-1, keepdims=True)
    centered = t - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    std = np.sqrt(var + t.dtype.type(eps))
    xhat = centered / std
    out = xhat * gain + bias
    return out, LayerNormStats(mean=mean[:, 0].copy(), std=std[:, 0].copy())


def _ew_add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return a + b


def _ew_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return a * b


def _ew_scale(a: Tensor, s: float) -> Tensor:
    return a * a.dtype.type(s)


def _ew_clamp_nonneg(a: Tensor) -> Tensor:
    return np.maximum(a, a.dtype.type(0))


def _ew_gelu(a: Tensor) -> Tensor:
    return _gelu_parts(a)[0]


ELEMENTWISE_KINDS: Dict[str, Callable[..., Tensor]] = {
    "add": _ew_add,
    "mul": _ew_mul,
    "scale": _ew_scale,
    "clamp_nonneg": _ew_clamp_nonneg,
    "gelu": _ew_gelu,
}


def elementwise(kind: str, *args) -> Tensor:
    """Apply a pointwise op by name ('add', 'mul', 'scale', 'clamp_nonneg', 'gelu')."""
    if kind not in ELEMENTWISE_KINDS:
        raise ContractError(f"Unknown elementwise kind: {kind}")
    return ELEMENTWISE_KINDS[kind](*args)


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


class Graph:
    """
    Eagerly evaluated computation graph.

    Every method takes node ids and returns the id of a new node. Values
    are cast to the graph dtype (float32 unless asked otherwise) and must
    stay finite.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: List[Node] = []
        self.marked: Set[int] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, kind: str, inputs: Sequence[int], value, vjp: Optional[VJP]) -> int:
        value = np.asarray(value, dtype=self.dtype)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{kind} produced non-finite values")
        self.nodes.append(Node(kind, tuple(inputs), value, vjp))
        return len(self.nodes) - 1

    def value(self, node: int) -> np.ndarray:
        return self.nodes[node].value

    def shape(self, node: int) -> Tuple[int, ...]:
        return self.nodes[node].value.shape

    def constant(self, value) -> int:
        return self._push("constant", (), np.array(value, dtype=self.dtype, copy=True), None)

    def mark(self, node: int) -> int:
        """Request that backward() materialize the gradient of this node."""
        self.marked.add(node)
        return node

    # -- algebra -----------------------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        return self._push("matmul", (a, b), matmul(av, bv), lambda g: (g @ bv.T, av.T @ g))

    def transpose(self, a: int) -> int:
        av = self.value(a)
        if av.ndim != 2:
            raise DimensionError(f"transpose expects a matrix, got {av.shape}")
        return self._push("transpose", (a,), av.T, lambda g: (g.T,))

    def reshape(self, a: int, shape: Sequence[int]) -> int:
        av = self.value(a)
        try:
            out = av.reshape(tuple(shape))
        except ValueError as e:
            raise DimensionError(f"reshape: {av.shape} -> {tuple(shape)}: {e}") from e
        return self._push("reshape", (a,), out, lambda g: (g.reshape(av.shape),))

    def add(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        return self._push(
            "add",
            (a, b),
            _ew_add(av, bv),
            lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
        )

    def mul(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        return self._push(
            "mul",
            (a, b),
            _ew_mul(av, bv),
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def scale(self, a: int, s: float) -> int:
        av = self.value(a)
        factor = self.dtype.type(s)
        return self._push("scale", (a,), av * factor, lambda g: (g * factor,))

    def clamp_nonneg(self, a: int) -> int:
        av = self.value(a)
        # gradient at exactly 0 is 0
        mask = (av > 0).astype(self.dtype)
        return self._push("clamp_nonneg", (a,), _ew_clamp_nonneg(av), lambda g: (g * mask,))

    def gelu(self, a: int) -> int:
        y, dy = _gelu_parts(self.value(a))
        return self._push("gelu", (a,), y, lambda g: (g * dy,))

    def elementwise(self, kind: str, *args) -> int:
        ops = {
            "add": self.add,
            "mul": self.mul,
            "scale": self.scale,
            "clamp_nonneg": self.clamp_nonneg,
            "gelu": self.gelu,
        }
        if kind not in ops:
            raise ContractError(f"Unknown elementwise kind: {kind}")
        return ops[kind](*args)

    def softmax_lastdim(self, a: int) -> int:
        y = softmax_lastdim(self.value(a))
        return self._push(
            "softmax", (a,), y, lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
        )

    def layer_norm(self, a: int, gain: int, bias: int, eps: float) -> Tuple[int, LayerNormStats]:
        xv, gv, bv = self.value(a), self.value(gain), self.value(bias)
        out, stats = layer_norm(xv, gv, bv, eps)
        std = stats.std[:, None]
        xhat = (xv - stats.mean[:, None]) / std

        def vjp(g):
            g_xhat = g * gv
            gx = (
                g_xhat
                - g_xhat.mean(axis=-1, keepdims=True)
                - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
            ) / std
            return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

        return self._push("layer_norm", (a, gain, bias), out, vjp), stats

    # -- structure ---------------------------------------------------------

    def gather_rows(self, a: int, index: Sequence[int]) -> int:
        av = self.value(a)
        idx = np.asarray(index, dtype=np.intp).reshape(-1)
        if av.ndim != 2:
            raise DimensionError(f"gather_rows expects a matrix, got {av.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= av.shape[0]):
            raise ContractError(f"gather_rows: index out of range for {av.shape[0]} rows")

        def vjp(g):
            ga = np.zeros_like(av)
            np.add.at(ga, idx, g)
            return (ga,)

        return self._push("gather_rows", (a,), av[idx], vjp)

    def slice_cols(self, a: int, start: int, stop: int) -> int:
        av = self.value(a)
        if av.ndim != 2 or not 0 <= start < stop <= av.shape[1]:
            raise DimensionError(f"slice_cols [{start}:{stop}] invalid for {av.shape}")

        def vjp(g):
            ga = np.zeros_like(av)
            ga[:, start:stop] = g
            return (ga,)

        return self._push("slice_cols", (a,), av[:, start:stop], vjp)

    def _concat(self, nodes: Sequence[int], axis: int, kind: str) -> int:
        values = [self.value(n) for n in nodes]
        if not values or any(v.ndim != 2 for v in values):
            raise DimensionError(f"{kind} expects one or more matrices")
        try:
            out = np.concatenate(values, axis=axis)
        except ValueError as e:
            raise DimensionError(f"{kind}: {e}") from e
        bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
        return self._push(kind, nodes, out, lambda g: np.split(g, bounds, axis=axis))

    def concat_rows(self, nodes: Sequence[int]) -> int:
        return self._concat(nodes, 0, "concat_rows")

    def concat_cols(self, nodes: Sequence[int]) -> int:
        return self._concat(nodes, 1, "concat_cols")

    def mean_rows(self, a: int) -> int:
        av = self.value(a)
        n = av.shape[0]
        return self._push(
            "mean_rows",
            (a,),
            av.mean(axis=0, keepdims=True),
            lambda g: (np.broadcast_to(g / n, av.shape).copy(),),
        )

    def sum_all(self, a: int) -> int:
        av = self.value(a)
        return self._push(
            "sum_all", (a,), np.array([av.sum()]), lambda g: (np.full(av.shape, g[0], av.dtype),)
        )

    def pick(self, a: int, index: int) -> int:
        """Select one element (flat row-major index) as a [1] scalar."""
        av = self.value(a)
        if not 0 <= index < av.size:
            raise ContractError(f"pick: index {index} out of range for size {av.size}")

        def vjp(g):
            ga = np.zeros(av.size, dtype=av.dtype)
            ga[index] = g[0]
            return (ga.reshape(av.shape),)

        return self._push("pick", (a,), av.reshape(-1)[index : index + 1], vjp)

    def add_bias(self, a: int, bias: int) -> int:
        """Add a [d] bias to every row of a [N×d] matrix as ones[N×1]·bias[1×d]."""
        n = self.shape(a)[0]
        d = self.shape(bias)[0]
        ones = self.constant(np.ones((n, 1)))
        return self.add(a, self.matmul(ones, self.reshape(bias, (1, d))))

    # -- differentiation ---------------------------------------------------

    def backward(self, output: int) -> Dict[int, np.ndarray]:
        """
        Reverse-mode pass from a scalar node.

        Returns:
            Gradient for every marked node; marked nodes with no path to the
            output get zeros of their own shape.
        """
        if self.shape(output) != (1,):
            raise ContractError(f"backward needs a [1] output, got shape {self.shape(output)}")
        if not self.marked:
            raise ContractError("backward called with no marked nodes")

        grads: Dict[int, np.ndarray] = {output: np.ones((1,), dtype=self.dtype)}
        for nid in range(output, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or node.vjp is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None:
                    continue
                gi = np.asarray(gi, dtype=self.dtype)
                grads[inp] = grads[inp] + gi if inp in grads else gi

        return {
            nid: grads.get(nid, np.zeros(self.shape(nid), dtype=self.dtype))
            for nid in sorted(self.marked)
        }


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x: Tensor, eps: float = 1e-3) -> Tensor:
    """
    Central-difference gradient of a scalar function, evaluated in float64.

    Args:
        f: Function of one array returning a scalar
        x: Point at which to differentiate
        eps: Step size

    Returns:
        Array of the same shape as x
    """
    if eps <= 0:
        raise ContractError(f"finite_diff_grad: eps must be positive, got {eps}")
    base = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(base.copy()))
        flat[i] = orig - eps
        down = float(f(base.copy()))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest |a - n| / max(|a|, |n|) over entries where either side exceeds floor."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise DimensionError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    mask = (np.abs(a) > floor) | (np.abs(n) > floor)
    if not mask.any():
        return 0.0
    denom = np.maximum(np.abs(a), np.abs(n))[mask]
    return float(np.max(np.abs(a - n)[mask] / denom))
