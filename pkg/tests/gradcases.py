"""Gradient-check cases shared by the autodiff tests and the acceptance suite.

Each case maps a seed to ``(f, point)``: ``f(tape, tensors)`` builds a scalar
and ``point`` holds the input arrays. Non-scalar ops are reduced with a fixed
random weighting so every output entry reaches the gradient.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from dispa import autodiff as ad
from dispa.model import ModelConfig, init_params, predict_tensor


def _weighted(out: ad.Tensor, rng: np.random.Generator) -> ad.Tensor:
    return ad.sum_all(ad.mul(out, ad.constant(rng.normal(size=out.shape))))


def _unary(op, shape=(3, 4), shift=0.0):
    def build(seed):
        rng = np.random.default_rng(seed)
        point = {"a": rng.normal(size=shape) + shift}
        return (lambda tape, t: _weighted(op(t["a"]), np.random.default_rng(seed + 1000))), point
    return build


def _binary(op, sa, sb):
    def build(seed):
        rng = np.random.default_rng(seed)
        point = {"a": rng.normal(size=sa), "b": rng.normal(size=sb)}
        wseed = seed + 2000
        return (lambda tape, t: _weighted(op(t["a"], t["b"]), np.random.default_rng(wseed))), point
    return build


def _diff_attention(seed):
    rng = np.random.default_rng(seed)
    point = {"q": rng.normal(size=(3, 4)), "k": rng.normal(size=(5, 4)), "v": rng.normal(size=(5, 4)),
             "lam": np.array([[0.3 + 0.4 * rng.random()]])}

    def f(tape, t):
        out, _, _ = ad.diff_softmax_attention(t["q"], t["k"], t["v"], t["lam"], 0.7)
        return _weighted(out, np.random.default_rng(seed + 3000))
    return f, point


def _batched_attention(seed):
    rng = np.random.default_rng(seed)
    # Two query blocks of 3 rows, three key blocks of 4 rows with padding.
    point = {"q": rng.normal(size=(6, 4)), "k": rng.normal(size=(12, 4)), "v": rng.normal(size=(12, 4)),
             "lam": np.array([[0.2 + 0.5 * rng.random()]])}
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1], [1, 0, 0, 0]], dtype=bool)

    def f(tape, t):
        out, _, _ = ad.batched_diff_attention(
            t["q"], t["k"], t["v"], t["lam"], q_rows=3, k_rows=4,
            q_index=np.array([0, 1, 1, 0]), k_index=np.array([0, 2, 1, 0]), k_mask=mask, temperature=0.8)
        return _weighted(out, np.random.default_rng(seed + 4000))
    return f, point


def _take_rows(seed):
    rng = np.random.default_rng(seed)
    point = {"a": rng.normal(size=(4, 3))}
    idx = np.array([0, 2, 2, 3, 0, 1])
    return (lambda tape, t: _weighted(ad.take_rows(t["a"], idx), np.random.default_rng(seed + 5000))), point


def _mse(seed):
    rng = np.random.default_rng(seed)
    point = {"p": rng.normal(size=(5, 1)), "y": rng.normal(size=(5, 1))}
    return (lambda tape, t: ad.mse(t["p"], t["y"])), point


def _concat(op, shapes):
    def build(seed):
        rng = np.random.default_rng(seed)
        point = {f"x{i}": rng.normal(size=s) for i, s in enumerate(shapes)}
        return (lambda tape, t: _weighted(op([t[f"x{i}"] for i in range(len(shapes))]),
                                          np.random.default_rng(seed + 6000))), point
    return build


OP_CASES: dict[str, Callable[[int], tuple]] = {
    "matmul": _binary(ad.matmul, (3, 4), (4, 2)),
    "add": _binary(ad.add, (3, 4), (3, 4)),
    "add_broadcast": _binary(ad.add, (3, 4), (1, 4)),
    "sub": _binary(ad.sub, (3, 4), (1, 4)),
    "mul": _binary(ad.mul, (3, 4), (3, 4)),
    "mul_broadcast": _binary(ad.mul, (3, 4), (3, 1)),
    "scale": _unary(lambda a: ad.scale(a, -1.7)),
    "transpose": _unary(ad.transpose),
    "concat_cols": _concat(ad.concat_cols, [(3, 2), (3, 1), (3, 3)]),
    "concat_rows": _concat(ad.concat_rows, [(2, 3), (1, 3)]),
    "slice_cols": _unary(lambda a: ad.slice_cols(a, 1, 3)),
    "mean_rows": _unary(ad.mean_rows),
    "sum_all": _unary(ad.sum_all),
    "relu": _unary(ad.relu),
    "exp": _unary(ad.exp),
    "clamp": _unary(lambda a: ad.clamp(a, -0.5, 0.5)),
    "softmax_rows": _unary(ad.softmax_rows),
    "layer_norm_rows": _unary(ad.layer_norm_rows),
    "take_rows": _take_rows,
    "diff_softmax_attention": _diff_attention,
    "batched_diff_attention": _batched_attention,
    "mse": _mse,
}


def composite_case(seed: int, layer_norm: bool = False):
    """Full predict -> MSE composite over every model parameter."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_pathways=4, max_genes=5, embed_dim=8, d_a=6, d=4, layer_norm=layer_norm)
    E_path, E_drug, E_sub = rng.normal(size=(4, 5)), rng.normal(size=(1, 8)), rng.normal(size=(3, 8))
    point = init_params(cfg, seed)
    target = ad.constant([[rng.normal()]])

    def f(tape, t):
        return ad.mse(predict_tensor(t, E_path, E_drug, E_sub, cfg), target)
    return f, point


GRAD_SEEDS = (0, 1, 2, 3, 4)
GRAD_TOL = 1e-4
