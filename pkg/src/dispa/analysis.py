"""Attention export, substructure alignment, group-selective drugs and
spatial autocorrelation."""

from __future__ import annotations

import csv
import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from dispa.chem.brics import fragment_fingerprint
from dispa.chem.smiles import parse_smiles
from dispa.model import AttentionRecord

EXACT_LIMIT = 12  # pooled sample size up to which Wilcoxon p is enumerated


class AnalysisError(ValueError):
    pass


# --------------------------------------------------------------------------
# attention export


def export_attention(records: Sequence[AttentionRecord], path: str | Path) -> None:
    """Write records as JSON (``.json``) or long-format CSV (anything else).

    CSV rows: view, cell_id, drug_id, row, col, first, second, net, lambda.
    Path2Sub rows index pathways and columns substructures; Drug2Path has a
    single row and one column per pathway.
    """
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps([r.to_dict() for r in records], indent=1) + "\n")
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "cell_id", "drug_id", "row", "col", "first", "second", "net", "lambda"])
        for r in records:
            first, second = r.path2sub_components
            for i, j in np.ndindex(r.path2sub_net.shape):
                w.writerow(["path2sub", r.cell_id, r.drug_id, i, j, repr(float(first[i, j])),
                            repr(float(second[i, j])), repr(float(r.path2sub_net[i, j])), repr(r.lambda_path2sub)])
            first, second = r.drug2path_components
            for j in range(len(r.drug2path_net)):
                w.writerow(["drug2path", r.cell_id, r.drug_id, 0, j, repr(float(first[j])),
                            repr(float(second[j])), repr(float(r.drug2path_net[j])), repr(r.lambda_drug2path)])


# --------------------------------------------------------------------------
# substructure alignment


def tanimoto(a: set | frozenset, b: set | frozenset) -> float:
    if not a and not b:
        raise AnalysisError("Tanimoto similarity of two empty sets is undefined")
    return len(a & b) / len(a | b)


def _spearman(x: np.ndarray, y: np.ndarray) -> float:
    rx, ry = rankdata(x), rankdata(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0.0:
        raise AnalysisError("rank correlation undefined for a constant vector")
    return float(np.clip((rx @ ry) / den, -1.0, 1.0))


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))


@dataclass
class AlignmentScore:
    drug_id: str
    score: float
    n_pairs: int
    cell_id: str | None = None  # set in per-cell mode


def alignment_from_similarities(drug_id: str, chem_sim: np.ndarray, attn_sim: np.ndarray) -> AlignmentScore:
    """Spearman correlation between paired similarity vectors."""
    chem_sim, attn_sim = np.asarray(chem_sim, float), np.asarray(attn_sim, float)
    if chem_sim.shape != attn_sim.shape or chem_sim.size < 3:
        raise AnalysisError(f"{drug_id}: need at least 3 paired similarities")
    return AlignmentScore(drug_id, _spearman(chem_sim, attn_sim), chem_sim.size)


def _pairwise(fingerprints: Sequence[frozenset], columns: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, y = [], []
    for i, j in itertools.combinations(range(len(fingerprints)), 2):
        x.append(tanimoto(fingerprints[i], fingerprints[j]))
        y.append(_cosine(columns[:, i], columns[:, j]))
    return np.array(x), np.array(y)


def substructure_alignment(
    drug_id: str,
    fragments: Sequence[str],
    records: Sequence[AttentionRecord],
    *,
    per_cell: bool = False,
) -> AlignmentScore | list[AlignmentScore]:
    """Agreement between chemical similarity and attention similarity.

    For each substructure pair: x is the Tanimoto similarity of the fragment
    fingerprints and y the cosine similarity of their net Path2Sub attention
    columns (averaged over the given cells unless ``per_cell``). The score is
    the Spearman correlation of x and y over pairs.
    """
    n_s = len(fragments)
    if n_s < 3:
        raise AnalysisError(f"{drug_id}: alignment needs at least 3 substructures, got {n_s}")
    recs = [r for r in records if r.drug_id == drug_id]
    if not recs:
        raise AnalysisError(f"{drug_id}: no attention records")
    for r in recs:
        if r.path2sub_net.shape[1] != n_s:
            raise AnalysisError(f"{drug_id}: record for {r.cell_id} has {r.path2sub_net.shape[1]} columns, "
                                f"expected {n_s}")
    fps = [fragment_fingerprint(parse_smiles(s)) for s in fragments]
    if per_cell:
        out = []
        for r in recs:
            score = alignment_from_similarities(drug_id, *_pairwise(fps, r.path2sub_net))
            score.cell_id = r.cell_id
            out.append(score)
        return out
    mean_map = np.mean([r.path2sub_net for r in recs], axis=0)
    return alignment_from_similarities(drug_id, *_pairwise(fps, mean_map))


# --------------------------------------------------------------------------
# rank tests and multiple testing


def wilcoxon_one_sided(a: Sequence[float], b: Sequence[float], alternative: str = "less") -> tuple[float, float]:
    """Rank-sum test of ``a`` shifted below (``less``) or above (``greater``) ``b``.

    Returns (U, p) with U = R_a - n_a (n_a + 1) / 2 from average ranks. The
    p value is exact, by enumerating every assignment of the pooled ranks,
    when n_a + n_b <= 12; otherwise a normal approximation with tie-corrected
    variance and continuity correction.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise AnalysisError("Wilcoxon test needs two non-empty samples")
    if a.size < 2 or b.size < 2:
        raise AnalysisError("Wilcoxon test needs at least 2 values per sample")
    if alternative not in ("less", "greater"):
        raise AnalysisError(f"alternative must be 'less' or 'greater', got {alternative!r}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise AnalysisError("Wilcoxon test values must be finite")
    n_a, n_b = a.size, b.size
    n = n_a + n_b
    ranks = rankdata(np.concatenate([a, b]))
    offset = n_a * (n_a + 1) / 2
    u = float(ranks[:n_a].sum() - offset)
    sign = 1.0 if alternative == "less" else -1.0

    if n <= EXACT_LIMIT:
        # Compare doubled rank sums as integers so ties cannot misround.
        doubled = np.rint(2 * ranks).astype(int)
        observed = int(doubled[:n_a].sum())
        hits = total = 0
        for combo in itertools.combinations(range(n), n_a):
            s = int(doubled[list(combo)].sum())
            total += 1
            if sign * (s - observed) <= 0:
                hits += 1
        return u, hits / total

    mean = n_a * n_b / 2.0
    ties = Counter(ranks.tolist()).values()
    tie_term = sum(t ** 3 - t for t in ties) / (n * (n - 1))
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return u, 1.0
    z = (sign * (u - mean) + 0.5) / math.sqrt(var)
    return u, float(min(1.0, norm.cdf(z)))


def bh_fdr(pvalues: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p values, in input order."""
    p = np.asarray(pvalues, dtype=float)
    if p.ndim != 1:
        raise AnalysisError("p values must be a flat sequence")
    if p.size == 0:
        return p.copy()
    if not np.all((p >= 0.0) & (p <= 1.0)):
        raise AnalysisError("p values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adjusted, 1.0)
    return out


# --------------------------------------------------------------------------
# group-selective drugs


@dataclass
class GroupComparison:
    drug_id: str
    group_a: str
    group_b: str  # "rest" for the pooled comparison
    delta: float  # median(a) - median(b); negative means a is more sensitive
    u: float
    p_raw: float
    p_adjusted: float = 1.0


@dataclass
class SelectiveResult:
    alpha: float
    comparisons: dict[str, list[GroupComparison]] = field(default_factory=dict)

    def selective(self, key: str) -> list[str]:
        return sorted(c.drug_id for c in self.comparisons[key] if c.p_adjusted < self.alpha)

    def overlap_counts(self) -> dict[tuple[str, ...], int]:
        """Drugs counted by the exact set of comparisons they are selective in."""
        membership: dict[str, list[str]] = {}
        for key in sorted(self.comparisons):
            for drug in self.selective(key):
                membership.setdefault(drug, []).append(key)
        return dict(sorted(Counter(tuple(v) for v in membership.values()).items()))


def group_selective_drugs(
    predictions: Mapping[str, Mapping[str, float]],
    labels: Mapping[str, str],
    alpha: float = 0.05,
    *,
    pairwise: bool = False,
) -> SelectiveResult:
    """Find drugs predicted more potent (lower ln IC50) in one group.

    ``predictions`` maps drug -> unit -> predicted ln IC50; ``labels`` maps
    unit -> group. By default each focal group is compared with all other
    units pooled; ``pairwise`` compares each ordered pair of groups. BH runs
    over drugs separately within each comparison.
    """
    groups = sorted(set(labels.values()))
    if len(groups) < 2:
        raise AnalysisError("need at least 2 groups")
    members = {g: sorted(u for u, lab in labels.items() if lab == g) for g in groups}
    small = [g for g, us in members.items() if len(us) < 2]
    if small:
        raise AnalysisError(f"groups with fewer than 2 units: {small}")
    if pairwise:
        plans = [(f"{a}>{b}", a, b, members[b]) for a in groups for b in groups if a != b]
    else:
        plans = [(g, g, "rest", [u for h in groups if h != g for u in members[h]]) for g in groups]

    result = SelectiveResult(alpha)
    for key, focal, other_label, others in plans:
        rows = []
        for drug in sorted(predictions):
            pred = predictions[drug]
            xa = [pred[u] for u in members[focal] if u in pred]
            xb = [pred[u] for u in others if u in pred]
            if len(xa) < 2 or len(xb) < 2:
                continue
            u, p = wilcoxon_one_sided(xa, xb, "less")
            rows.append(GroupComparison(drug, focal, other_label, float(np.median(xa) - np.median(xb)), u, p))
        for row, q in zip(rows, bh_fdr([r.p_raw for r in rows])):
            row.p_adjusted = float(q)
        result.comparisons[key] = rows
    return result


# --------------------------------------------------------------------------
# spatial autocorrelation


@dataclass
class SpatialField:
    spot_ids: list[str]
    values: np.ndarray
    weights: np.ndarray  # n x n, zero diagonal, non-negative

    def __post_init__(self) -> None:
        n = len(self.spot_ids)
        self.values = np.asarray(self.values, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.values.shape != (n,) or self.weights.shape != (n, n):
            raise AnalysisError("values and weights must match the number of spots")
        if np.any(np.diag(self.weights) != 0):
            raise AnalysisError("spatial weights must have a zero diagonal")
        if np.any(self.weights < 0):
            raise AnalysisError("spatial weights must be non-negative")
        if not np.any(self.weights > 0):
            raise AnalysisError("spatial weights are all zero")


def row_standardize(w: np.ndarray) -> np.ndarray:
    s = w.sum(axis=1, keepdims=True)
    return np.divide(w, s, out=np.zeros_like(w, dtype=float), where=s > 0)


def knn_weights(coords: np.ndarray, k: int = 6) -> np.ndarray:
    """Row-standardized k-nearest-neighbour weights (ties by index)."""
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    if n < 2:
        raise AnalysisError("need at least 2 spots")
    k = min(k, n - 1)
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    w = np.zeros((n, n))
    for i in range(n):
        w[i, np.argsort(d2[i], kind="stable")[:k]] = 1.0
    return row_standardize(w)


def adjacency_from_edges(spot_ids: Sequence[str], edges: Sequence[tuple[str, str]],
                         standardize: bool = True) -> np.ndarray:
    """Symmetric binary adjacency (e.g. grid rook neighbours) from an edge list."""
    pos = {s: i for i, s in enumerate(spot_ids)}
    w = np.zeros((len(spot_ids), len(spot_ids)))
    for a, b in edges:
        if a not in pos or b not in pos:
            raise AnalysisError(f"edge ({a}, {b}) names an unknown spot")
        if a == b:
            continue
        w[pos[a], pos[b]] = w[pos[b], pos[a]] = 1.0
    return row_standardize(w) if standardize else w


def _moran(x: np.ndarray, w: np.ndarray, w_sum: float) -> float:
    z = x - x.mean()
    return float(len(x) / w_sum * (z @ w @ z) / (z @ z))


@dataclass
class MoranResult:
    i: float
    expected: float
    p_value: float | None
    permutation_mean: float | None


def morans_i(f: SpatialField, n_perm: int = 999, seed: int = 0) -> MoranResult:
    """Moran's I with a one-sided (positive autocorrelation) permutation p value."""
    x = f.values
    if not np.isfinite(x).all():
        raise AnalysisError("values must be finite")
    if np.var(x) <= 1e-15 * max(1.0, float(np.abs(x).max())):
        raise AnalysisError("Moran's I undefined for a constant field")
    w_sum = float(f.weights.sum())
    stat = _moran(x, f.weights, w_sum)
    n = len(x)
    if n_perm <= 0:
        return MoranResult(stat, -1.0 / (n - 1), None, None)
    rng = np.random.default_rng(seed)
    perms = np.array([_moran(rng.permutation(x), f.weights, w_sum) for _ in range(n_perm)])
    p = (1 + int(np.sum(perms >= stat - 1e-12))) / (n_perm + 1)
    return MoranResult(stat, -1.0 / (n - 1), p, float(perms.mean()))
