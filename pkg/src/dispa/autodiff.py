"""Minimal reverse-mode automatic differentiation over dense 2-D arrays.

Every value is a float64 matrix. Operations record onto the :class:`Tape` of
their tracked inputs; when no input is tracked the op runs eagerly and
returns an untracked constant, which doubles as an inference mode.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "tape", "node_id", "requires_grad")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int = -1, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar for readability in model code.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    @property
    def T(self) -> "Tensor":
        return transpose(self)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of operations; node ids are recording positions."""

    def __init__(self) -> None:
        self._parents: list[tuple[Tensor, ...]] = []
        self._backward: list[BackwardFn | None] = []
        self._shapes: list[tuple[int, int]] = []
        self.params: dict[str, Tensor] = {}
        # Sign/region masks of every kinked op, consumed by grad_check.
        self.regimes: list[np.ndarray] = []
        self.min_kink_distance = math.inf

    def __len__(self) -> int:
        return len(self._backward)

    def param(self, name: str, value) -> Tensor:
        """Register a trainable leaf under ``name``."""
        if name in self.params:
            raise KeyError(f"parameter {name!r} already on tape")
        t = Tensor(value, requires_grad=True)
        _check_finite(t.data, f"param {name}")
        t.tape = self
        t.node_id = self._append((), None, t.shape)
        self.params[name] = t
        return t

    def _append(self, parents: tuple[Tensor, ...], fn: BackwardFn | None, shape) -> int:
        self._parents.append(parents)
        self._backward.append(fn)
        self._shapes.append(shape)
        return len(self._backward) - 1

    def note_kink(self, regime: np.ndarray, distance: float) -> None:
        self.regimes.append(regime)
        if distance < self.min_kink_distance:
            self.min_kink_distance = distance


def constant(value) -> Tensor:
    return Tensor(value)


def _check_finite(arr: np.ndarray, what: str) -> None:
    # One reduction catches NaN/Inf; the exact test only runs on overflow.
    if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} produced a non-finite value")


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _result(name: str, data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    tape = _tape_of(*parents)
    if tape is None:
        out.tape, out.node_id = None, -1
    else:
        out.tape = tape
        out.node_id = tape._append(parents, fn, data.shape)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_ok(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


# --------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _result("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a 1-row or 1-column operand broadcasts."""
    if not _broadcast_ok(a.shape, b.shape):
        raise ValueError(f"add shape mismatch {a.shape} + {b.shape}")
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ValueError(f"sub shape mismatch {a.shape} - {b.shape}")
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with the same broadcasting as :func:`add`."""
    if not _broadcast_ok(a.shape, b.shape):
        raise ValueError(f"mul shape mismatch {a.shape} * {b.shape}")
    A, B = a.data, b.data
    return _result("mul", A * B, (a, b),
                   lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    return _result("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def concat_cols(xs: Sequence[Tensor]) -> Tensor:
    rows = {x.shape[0] for x in xs}
    if len(rows) != 1:
        raise ValueError("concat_cols needs equal row counts")
    widths = np.cumsum([0] + [x.shape[1] for x in xs])

    def back(g):
        return tuple(g[:, widths[k]:widths[k + 1]] for k in range(len(xs)))

    return _result("concat_cols", np.concatenate([x.data for x in xs], axis=1), tuple(xs), back)


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    cols = {x.shape[1] for x in xs}
    if len(cols) != 1:
        raise ValueError("concat_rows needs equal column counts")
    heights = np.cumsum([0] + [x.shape[0] for x in xs])

    def back(g):
        return tuple(g[heights[k]:heights[k + 1]] for k in range(len(xs)))

    return _result("concat_rows", np.concatenate([x.data for x in xs], axis=0), tuple(xs), back)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[1]:
        raise ValueError(f"bad column slice [{start}:{stop}] of {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _result("slice_cols", a.data[:, start:stop].copy(), (a,), back)


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean over rows: (n, k) -> (1, k)."""
    n = a.shape[0]
    return _result("mean_rows", a.data.mean(axis=0, keepdims=True), (a,),
                   lambda g: (np.repeat(g / n, n, axis=0),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result("sum_all", a.data.sum().reshape(1, 1), (a,), lambda g: (np.full(shape, g[0, 0]),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    if a.tape is not None:
        a.tape.note_kink(mask, float(np.abs(x).min()) if x.size else math.inf)
    return _result("relu", np.where(mask, x, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _check_finite
        y = np.exp(a.data)
    return _result("exp", y, (a,), lambda g: (g * y,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    if a.tape is not None:
        a.tape.note_kink(inside, float(np.minimum(np.abs(x - lo), np.abs(x - hi)).min()))
    return _result("clamp", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    return _result("softmax_rows", y, (a,),
                   lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def diff_softmax_attention(
    q: Tensor, k: Tensor, v: Tensor, lam: Tensor, temperature: float
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Fused differential attention over 2d-wide projections.

    With ``q = [q1 | q2]``, ``k = [k1 | k2]``, ``v = [v1 | v2]`` (each half d
    wide) and c = ``temperature``, computes
    ``(softmax(c q1 k1^T) - lam * softmax(c q2 k2^T)) (v1 + v2)`` and also
    returns both softmax maps. It equals a composition of slice_cols, matmul,
    transpose, scale, softmax_rows, mul, sub and add but records one node,
    which matters because it runs once per (cell, drug) pair.
    """
    if lam.shape != (1, 1):
        raise ValueError("lam must be a (1, 1) tensor")
    width = q.shape[1]
    if width % 2 or k.shape[1] != width or v.shape[1] != width:
        raise ValueError(f"attention widths must be equal and even: q{q.shape} k{k.shape} v{v.shape}")
    if v.shape[0] != k.shape[0]:
        raise ValueError(f"value rows {v.shape[0]} != key rows {k.shape[0]}")
    d = width // 2
    c = temperature
    Q, K, V = q.data, k.data, v.data
    Q1, Q2, K1, K2 = Q[:, :d], Q[:, d:], K[:, :d], K[:, d:]
    Vsum = V[:, :d] + V[:, d:]
    L = float(lam.data[0, 0])

    def _softmax(x):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    s1 = _softmax(c * (Q1 @ K1.T))
    s2 = _softmax(c * (Q2 @ K2.T))
    net = s1 - L * s2
    out = net @ Vsum

    def back(g):
        g_net = g @ Vsum.T
        g_half = net.T @ g
        g_lam = np.array([[-float((g_net * s2).sum())]])
        g_l1 = c * s1 * (g_net - (g_net * s1).sum(axis=1, keepdims=True))
        g_s2 = -L * g_net
        g_l2 = c * s2 * (g_s2 - (g_s2 * s2).sum(axis=1, keepdims=True))
        g_q = np.concatenate([g_l1 @ K1, g_l2 @ K2], axis=1)
        g_k = np.concatenate([g_l1.T @ Q1, g_l2.T @ Q2], axis=1)
        return (g_q, g_k, np.concatenate([g_half, g_half], axis=1), g_lam)

    return _result("diff_softmax_attention", out, (q, k, v, lam), back), s1, s2


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in backward."""
    idx = np.asarray(index, dtype=int)
    n = a.shape[0]

    def back(g):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _result("take_rows", a.data[idx], (a,), back)


def batched_diff_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    lam: Tensor,
    *,
    q_rows: int,
    k_rows: int,
    q_index: np.ndarray,
    k_index: np.ndarray,
    k_mask: np.ndarray,
    temperature: float,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """:func:`diff_softmax_attention` for many pairs at once, mean-pooled over queries.

    ``q`` stacks blocks of ``q_rows`` query rows and ``k``/``v`` stack blocks
    of ``k_rows`` key rows; pair b attends query block ``q_index[b]`` over key
    block ``k_index[b]``. ``k_mask[j]`` marks the real rows of key block j
    (padding rows get zero weight). Returns the (B, d) row means of the
    per-pair outputs and both (B, q_rows, k_rows) softmax maps.
    """
    if lam.shape != (1, 1):
        raise ValueError("lam must be a (1, 1) tensor")
    width = q.shape[1]
    if width % 2 or k.shape[1] != width or v.shape != k.shape:
        raise ValueError(f"attention widths must be equal and even: q{q.shape} k{k.shape} v{v.shape}")
    if q.shape[0] % q_rows or k.shape[0] % k_rows:
        raise ValueError("stacked rows are not a multiple of the block size")
    qi = np.asarray(q_index, dtype=int)
    ki = np.asarray(k_index, dtype=int)
    mask = np.asarray(k_mask, dtype=bool)[ki][:, None, :]
    if not mask.any(axis=2).all():
        raise ValueError("every key block needs at least one unmasked row")
    d = width // 2
    c = temperature
    n_q_blocks = q.shape[0] // q_rows
    n_k_blocks = k.shape[0] // k_rows
    Q = q.data.reshape(n_q_blocks, q_rows, width)[qi]
    K = k.data.reshape(n_k_blocks, k_rows, width)[ki]
    V = v.data.reshape(n_k_blocks, k_rows, width)[ki]
    Q1, Q2, K1, K2 = Q[..., :d], Q[..., d:], K[..., :d], K[..., d:]
    Vsum = V[..., :d] + V[..., d:]
    K1t, K2t = K1.transpose(0, 2, 1), K2.transpose(0, 2, 1)
    L = float(lam.data[0, 0])

    def _softmax(x):
        x = np.where(mask, x, -np.inf)
        e = np.exp(x - x.max(axis=2, keepdims=True))
        return e / e.sum(axis=2, keepdims=True)

    s1 = _softmax(c * (Q1 @ K1t))
    s2 = _softmax(c * (Q2 @ K2t))
    net = s1 - L * s2
    out = (net @ Vsum).mean(axis=1)

    def back(g):
        g3 = np.broadcast_to(g[:, None, :] / q_rows, (g.shape[0], q_rows, d))
        g_net = g3 @ Vsum.transpose(0, 2, 1)
        g_half = net.transpose(0, 2, 1) @ g3
        g_lam = np.array([[-float((g_net * s2).sum())]])
        g_l1 = c * s1 * (g_net - (g_net * s1).sum(axis=2, keepdims=True))
        g_s2 = -L * g_net
        g_l2 = c * s2 * (g_s2 - (g_s2 * s2).sum(axis=2, keepdims=True))
        gQ = np.zeros((n_q_blocks, q_rows, width))
        np.add.at(gQ, qi, np.concatenate([g_l1 @ K1, g_l2 @ K2], axis=2))
        gK = np.zeros((n_k_blocks, k_rows, width))
        np.add.at(gK, ki, np.concatenate([g_l1.transpose(0, 2, 1) @ Q1, g_l2.transpose(0, 2, 1) @ Q2], axis=2))
        gV = np.zeros((n_k_blocks, k_rows, width))
        np.add.at(gV, ki, np.concatenate([g_half, g_half], axis=2))
        return (gQ.reshape(q.shape), gK.reshape(k.shape), gV.reshape(v.shape), g_lam)

    return _result("batched_diff_attention", out, (q, k, v, lam), back), s1, s2


def layer_norm_rows(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization without affine parameters."""
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    sigma = np.sqrt(x.var(axis=1, keepdims=True) + eps)
    xhat = (x - mu) / sigma

    def back(g):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).mean(axis=1, keepdims=True)
        return ((g - gm - xhat * gx) / sigma,)

    return _result("layer_norm_rows", xhat, (a,), back)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape or pred.shape[1] != 1:
        raise ValueError(f"mse expects matching (n, 1) shapes, got {pred.shape} and {target.shape}")
    diff = pred.data - target.data
    n = diff.shape[0]
    value = np.array([[float((diff * diff).sum() / n)]])

    def back(g):
        d = g[0, 0] * 2.0 * diff / n
        return (d, -d)

    return _result("mse", value, (pred, target), back)


# --------------------------------------------------------------------------
# backward / gradient check


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` for every parameter on its tape.

    Parameters the loss does not depend on get zero arrays.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ValueError("loss is not recorded on a tape")
    grads: list[np.ndarray | None] = [None] * len(tape)
    grads[loss.node_id] = np.ones((1, 1))
    for node in range(loss.node_id, -1, -1):
        g = grads[node]
        fn = tape._backward[node]
        if g is None or fn is None:
            continue
        for parent, pg in zip(tape._parents[node], fn(g)):
            if parent.tape is None or pg is None:
                continue
            pid = parent.node_id
            if grads[pid] is None:
                grads[pid] = np.array(pg, dtype=np.float64, copy=True)
            else:
                grads[pid] += pg
    out = {}
    for name, t in tape.params.items():
        g = grads[t.node_id]
        out[name] = np.zeros(t.shape) if g is None else g
    return out


ScalarFn = Callable[[Tape, Mapping[str, Tensor]], Tensor]


def grad_check(
    f: ScalarFn,
    point: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    *,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float | None:
    """Max relative error between backward() and central differences.

    ``f(tape, inputs)`` builds a scalar from tensors registered on ``tape``.
    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Returns None when the point sits exactly on a kink (ReLU at 0, clamp at a
    bound); coordinates whose +-eps probe crosses a kink are left out.
    ``max_coords`` samples that many coordinates per input.
    """

    def run(values: Mapping[str, np.ndarray], grads: bool = False):
        tape = Tape()
        tensors = {k: tape.param(k, v) for k, v in values.items()}
        out = f(tape, tensors)
        return out.item(), tape, backward(out) if grads and out.tape is not None else None

    _, base_tape, analytic = run(point, grads=True)
    if base_tape.min_kink_distance == 0.0:
        return None
    if analytic is None:
        analytic = {k: np.zeros_like(np.atleast_2d(v), dtype=float) for k, v in point.items()}
    base_regime = [r.copy() for r in base_tape.regimes]

    def same_regime(tape: Tape) -> bool:
        return len(tape.regimes) == len(base_regime) and all(
            np.array_equal(a, b) for a, b in zip(tape.regimes, base_regime)
        )

    worst = 0.0
    for name, value in point.items():
        arr = np.array(np.atleast_2d(value), dtype=float)
        coords = list(np.ndindex(arr.shape))
        if max_coords is not None and len(coords) > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            pick = gen.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for idx in coords:
            vals = dict(point)
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += eps
            minus[idx] -= eps
            vals[name] = plus
            fp, tp, _ = run(vals)
            vals[name] = minus
            fm, tm, _ = run(vals)
            if not (same_regime(tp) and same_regime(tm)):
                continue
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[name][idx])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
