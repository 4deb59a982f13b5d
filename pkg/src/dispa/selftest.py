"""Fast built-in oracle checks behind ``dispa selftest``.

Each check recomputes a value with an independent method or compares with a
hand-derived constant. The full property suites live in the test tree; this
is the subset that runs in a few seconds without test dependencies.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from dispa import autodiff as ad
from dispa.analysis import SpatialField, bh_fdr, morans_i, wilcoxon_one_sided
from dispa.chem.brics import find_cleavable_bonds, fragment
from dispa.chem.smiles import parse_smiles
from dispa.model import ModelConfig, diff_attention, init_params, predict_tensor
from dispa.pathways import ResponseTable
from dispa.training import SplitSpec, make_split, metric_pcc, metric_rmse, metric_scc

Check = Callable[[], tuple[bool, str]]


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def check_gradients() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    cfg = ModelConfig(n_pathways=3, max_genes=4, embed_dim=8, d_a=4)
    point = {k: v for k, v in init_params(cfg, 0).items()}
    E_path, E_drug, E_sub = rng.normal(size=(3, 4)), rng.normal(size=(1, 8)), rng.normal(size=(3, 8))

    def f(tape, t):
        y = predict_tensor(t, E_path, E_drug, E_sub, cfg)
        return ad.mse(y, ad.constant([[0.7]]))

    err = ad.grad_check(f, point, max_coords=4, rng=rng)
    return err is not None and err < 1e-4, f"max relative error {err}"


def check_attention_reduction() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    cfg = ModelConfig(n_pathways=4, max_genes=3, embed_dim=8, d_a=5, d=3)
    p = {k: ad.constant(v) for k, v in init_params(cfg, 1).items()}
    q, k = rng.normal(size=(4, 5)), rng.normal(size=(6, 5))
    out, comp = diff_attention(q, k, k, p, "p2s", cfg, lam=0.0)
    W_Q, W_K, W_V = (p[f"p2s.{w}"].data for w in ("W_Q", "W_K", "W_V"))
    Q, K, V = (q @ W_Q)[:, :3], (k @ W_K)[:, :3], k @ W_V
    ref = _softmax(Q @ K.T / math.sqrt(3)) @ (V[:, :3] + V[:, 3:])
    gap = float(np.abs(out.data - ref).max())
    _, comp = diff_attention(q, k, k, p, "p2s", cfg)
    rows = float(np.abs(comp.net.sum(axis=1) - (1 - comp.lam)).max())
    return gap < 1e-12 and rows < 1e-9, f"reference gap {gap:.2e}, row-sum gap {rows:.2e}"


def check_fragmenter() -> tuple[bool, str]:
    amide = find_cleavable_bonds(parse_smiles("CC(=O)NC"))
    aspirin = sorted(f.smiles for f in fragment(parse_smiles("CC(=O)Oc1ccccc1C(=O)O")))
    want = sorted(["CC=O", "O", "c1ccccc1", "C(=O)O"])
    ring = find_cleavable_bonds(parse_smiles("C1CC1"))
    ok = len(amide) == 1 and aspirin == want and ring == []
    return ok, f"amide cuts {len(amide)}, aspirin {aspirin}"


def check_statistics() -> tuple[bool, str]:
    u, p = wilcoxon_one_sided([1, 2], [3, 4])
    q = bh_fdr([0.01, 0.04])
    grid = np.array([1.0, 0.0, 0.0, 1.0])
    w = np.array([[0, 1, 1, 0], [1, 0, 0, 1], [1, 0, 0, 1], [0, 1, 1, 0]], dtype=float) / 2
    m = morans_i(SpatialField(["a", "b", "c", "d"], grid, w), n_perm=99)
    ok = u == 0 and abs(p - 1 / 6) < 1e-12 and np.allclose(q, [0.02, 0.04]) and abs(m.i + 1) < 1e-12
    return ok, f"wilcoxon p {p:.6f}, BH {q.tolist()}, Moran I {m.i}"


def check_metrics() -> tuple[bool, str]:
    r = metric_rmse([0, 0], [3, 4])
    s = metric_scc([1, 2, 3], [1, 3, 2])
    c = metric_pcc([1, 2, 3, 4], [3, 5, 7, 9])
    ok = abs(r - math.sqrt(12.5)) < 1e-12 and abs(s - 0.5) < 1e-12 and abs(c - 1) < 1e-12
    return ok, f"rmse {r:.6f}, scc {s}, pcc {c}"


def check_splits() -> tuple[bool, str]:
    cells = [f"C{i}" for i in range(10) for _ in range(8)]
    drugs = [f"D{j}" for _ in range(10) for j in range(8)]
    table = ResponseTable(cells, drugs, np.zeros(len(cells)))
    sizes = make_split(table, SplitSpec("random", seed=3)).sizes()
    s = make_split(table, SplitSpec("disjoint", seed=3))
    sides = [{cells[i] for i in part} for part in (s.train, s.val, s.test)]
    dsides = [{drugs[i] for i in part} for part in (s.train, s.val, s.test)]
    disjoint = all(not (a & b) for x in (sides, dsides) for i, a in enumerate(x) for b in x[i + 1:])
    ok = (sizes["train"], sizes["val"], sizes["test"]) == (48, 16, 16) and disjoint
    return ok, f"random sizes {sizes}, disjoint sides separated: {disjoint}"


CHECKS: dict[str, Check] = {
    "gradients": check_gradients,
    "attention-reduction": check_attention_reduction,
    "fragmenter": check_fragmenter,
    "statistics": check_statistics,
    "metrics": check_metrics,
    "splits": check_splits,
}


def run_all(emit: Callable[[str], None] = print) -> bool:
    passed = True
    for name, check in CHECKS.items():
        try:
            ok, detail = check()
        except Exception as err:  # report and keep going
            ok, detail = False, f"{type(err).__name__}: {err}"
        passed &= ok
        emit(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return passed
