"""Synthetic benchmark with a known response mechanism.

Cells get latent pathway activities that drive their gene expression. Drugs
are three aryl blocks joined by cleavable biaryl bonds, so fragmentation
recovers the blocks exactly. The response is bilinear in ``[1, activity]``
and the block indicators, plus Gaussian noise at 0.2 of the signal std. One
terminal block (the driver) couples strongly to a single pathway: cells with
high activity there are sensitized to every drug carrying it.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dispa.bundle import Assembled, assemble_dataset
from dispa.chem.smiles import parse_smiles, write_smiles
from dispa.embedding import EmbeddingConfig
from dispa.pathways import ExpressionMatrix, PathwayDB, ResponseTable, write_gmt

# Terminal blocks attach through their first atom; {r} and {q} are ring digits.
TERMINALS = {
    "phenyl": "c{r}ccccc{r}",
    "4-chlorophenyl": "c{r}ccc(Cl)cc{r}",
    "4-bromophenyl": "c{r}ccc(Br)cc{r}",
    "4-methylphenyl": "c{r}ccc(C)cc{r}",
    "4-cyanophenyl": "c{r}ccc(C#N)cc{r}",
    "3,4-difluorophenyl": "c{r}ccc(F)c(F)c{r}",
    "3-chloro-4-fluorophenyl": "c{r}ccc(F)c(Cl)c{r}",
    "3-pyridyl": "c{r}cccnc{r}",
    "2-thiazolyl": "c{r}nccs{r}",
    "2-naphthyl": "c{r}ccc{q}ccccc{q}c{r}",
}

# Linker rings with two attachment points.
MIDDLES = {
    "pyrazine-2,5-diyl": "c1nc(-{A})cnc1-{B}",
    "thiophene-2,5-diyl": "c1cc(-{A})sc1-{B}",
    "pyrimidine-2,5-diyl": "c1nc(-{A})ncc1-{B}",
    "furan-2,5-diyl": "c1cc(-{A})oc1-{B}",
}

DRIVER = "4-chlorophenyl"


def _terminal(name: str, first: bool) -> str:
    r, q = (2, 4) if first else (3, 5)
    return TERMINALS[name].format(r=r, q=q)


def block_smiles(name: str) -> str:
    """Fragment string the fragmenter emits for a block."""
    if name in TERMINALS:
        text = TERMINALS[name].format(r=1, q=2)
    else:
        text = MIDDLES[name].replace("(-{A})", "").replace("-{B}", "")
    g = parse_smiles(text)
    return write_smiles(g)


def drug_smiles(t1: str, middle: str, t2: str) -> str:
    return MIDDLES[middle].format(A=_terminal(t1, True), B=_terminal(t2, False))


@dataclass(frozen=True)
class SyntheticConfig:
    n_cells: int = 50
    n_drugs: int = 40
    pathway_sizes: tuple[int, ...] = (6, 7, 8, 9, 10, 11, 12, 8)
    n_background_genes: int = 8
    gene_noise: float = 0.5
    main_effect_std: float = 1.0
    interaction_std: float = 0.25
    driver_strength: float = 1.5
    driver_pathway: int = 0
    driver_fraction: float = 0.35
    noise_ratio: float = 0.2
    seed: int = 0


@dataclass
class SyntheticSet:
    config: SyntheticConfig
    expression: ExpressionMatrix
    pathways: PathwayDB
    responses: ResponseTable
    drugs: list[tuple[str, str]]
    blocks: dict[str, tuple[str, str, str]]   # drug -> (terminal, middle, terminal)
    activity: np.ndarray                      # cells x pathways latent activity
    signal: np.ndarray                        # noiseless response per pair
    driver_term: np.ndarray                   # driver contribution per pair (0 without driver)

    @property
    def driver_smiles(self) -> str:
        return block_smiles(DRIVER)

    def sensitive_mask(self) -> np.ndarray:
        """Pairs whose drug carries the driver and whose cell it sensitizes."""
        return self.driver_term < 0.0

    def assemble(self, embedding: EmbeddingConfig = EmbeddingConfig()) -> Assembled:
        return assemble_dataset(self.expression, self.pathways, self.responses, self.drugs, embedding=embedding)

    def write(self, directory: str | Path) -> dict[str, Path]:
        """Write the raw input files ``dispa prepare`` consumes."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {k: d / f for k, f in (("expression", "expression.csv"), ("responses", "responses.csv"),
                                        ("pathways", "pathways.gmt"), ("drugs", "drugs.csv"))}
        with open(paths["expression"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_id"] + self.expression.gene_ids)
            for c, row in zip(self.expression.cell_ids, self.expression.values):
                w.writerow([c] + [repr(float(x)) for x in row])
        self.responses.save(paths["responses"])
        write_gmt(self.pathways, paths["pathways"])
        with open(paths["drugs"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["drug_id", "smiles"])
            w.writerows(self.drugs)
        return paths


def _choose_drugs(rng: np.random.Generator, cfg: SyntheticConfig) -> list[tuple[str, str, str]]:
    terminals = sorted(TERMINALS)
    middles = sorted(MIDDLES)
    combos = [(a, m, b) for a, b in itertools.combinations(terminals, 2) for m in middles]
    with_driver = [c for c in combos if DRIVER in (c[0], c[2])]
    without = [c for c in combos if DRIVER not in (c[0], c[2])]
    n_driver = int(round(cfg.n_drugs * cfg.driver_fraction))
    if n_driver > len(with_driver) or cfg.n_drugs - n_driver > len(without):
        raise ValueError("too many drugs requested for the block library")
    pick = [with_driver[i] for i in rng.choice(len(with_driver), n_driver, replace=False)]
    pick += [without[i] for i in rng.choice(len(without), cfg.n_drugs - n_driver, replace=False)]
    order = rng.permutation(len(pick))
    out = []
    for i in order:
        a, m, b = pick[i]
        if rng.random() < 0.5:
            a, b = b, a
        out.append((a, m, b))
    return out


def generate(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticSet:
    rng = np.random.default_rng(cfg.seed)
    n_p = len(cfg.pathway_sizes)
    if not 0 <= cfg.driver_pathway < n_p:
        raise ValueError("driver_pathway out of range")

    # Expression: each pathway's genes load on that pathway's activity.
    activity = rng.normal(size=(cfg.n_cells, n_p))
    gene_ids, pathways, owner = [], [], []
    for p, size in enumerate(cfg.pathway_sizes):
        genes = [f"G{len(gene_ids) + k + 1:03d}" for k in range(size)]
        gene_ids += genes
        owner += [p] * size
        pathways.append((f"P{p + 1:02d}", genes))
    n_path_genes = len(gene_ids)
    gene_ids += [f"G{n_path_genes + k + 1:03d}" for k in range(cfg.n_background_genes)]
    loading = rng.uniform(0.6, 1.2, size=n_path_genes)
    latent = np.zeros((cfg.n_cells, len(gene_ids)))
    latent[:, :n_path_genes] = activity[:, owner] * loading
    latent += cfg.gene_noise * rng.normal(size=latent.shape)
    offset = rng.uniform(4.0, 8.0, size=len(gene_ids))
    scale = rng.uniform(0.5, 2.0, size=len(gene_ids))
    cell_ids = [f"C{i + 1:03d}" for i in range(cfg.n_cells)]
    expression = ExpressionMatrix(cell_ids, gene_ids, offset + scale * latent)
    db = PathwayDB(pathways, {pid: f"synthetic pathway {pid}" for pid, _ in pathways})

    # Block effects: a main effect plus a weak pathway interaction each.
    names = sorted(TERMINALS) + sorted(MIDDLES)
    main = {b: cfg.main_effect_std * rng.normal() for b in names}
    inter = {b: cfg.interaction_std * rng.normal(size=n_p) for b in names}
    driver_w = np.zeros(n_p)
    driver_w[cfg.driver_pathway] = -cfg.driver_strength

    combos = _choose_drugs(rng, cfg)
    drug_ids = [f"D{j + 1:03d}" for j in range(cfg.n_drugs)]
    drugs = [(d, drug_smiles(*c)) for d, c in zip(drug_ids, combos)]
    blocks = dict(zip(drug_ids, combos))

    cells_col, drugs_col, signal, driver_term = [], [], [], []
    for i, c in enumerate(cell_ids):
        for d in drug_ids:
            combo = blocks[d]
            s = sum(main[b] + activity[i] @ inter[b] for b in combo)
            t = float(activity[i] @ driver_w) if DRIVER in combo else 0.0
            cells_col.append(c)
            drugs_col.append(d)
            signal.append(s + t)
            driver_term.append(t)
    signal_arr = np.array(signal)
    noise = cfg.noise_ratio * signal_arr.std() * rng.normal(size=signal_arr.size)
    responses = ResponseTable(cells_col, drugs_col, signal_arr + noise)
    return SyntheticSet(cfg, expression, db, responses, drugs, blocks, activity, signal_arr,
                        np.array(driver_term))


def oracle_features(data: SyntheticSet, normalized: ExpressionMatrix) -> np.ndarray:
    """Features of the generating model, with activity estimated from data.

    Activity per pathway is the mean z-score of its genes; the design is the
    block indicator vector and its outer product with ``[activity]``.
    """
    blocks = sorted(TERMINALS) + sorted(MIDDLES)
    col = {b: k for k, b in enumerate(blocks)}
    est = np.stack([
        normalized.values[:, [normalized.gene_index(g) for g in genes]].mean(axis=1)
        for _, genes in data.pathways.pathways
    ], axis=1)
    row_of = {c: i for i, c in enumerate(normalized.cell_ids)}
    feats = []
    for c, d in data.responses.pairs():
        u = np.zeros(len(blocks))
        for b in data.blocks[d]:
            u[col[b]] = 1.0
        a = np.concatenate([[1.0], est[row_of[c]]])
        feats.append(np.outer(a, u).ravel())
    return np.array(feats)


def oracle_fit_predict(X: np.ndarray, y: np.ndarray, train: np.ndarray, test: np.ndarray,
                       ridge: float = 1e-3) -> np.ndarray:
    """Ridge regression on the generator's own feature space."""
    A = X[train]
    w = np.linalg.solve(A.T @ A + ridge * np.eye(A.shape[1]), A.T @ y[train])
    return X[test] @ w
