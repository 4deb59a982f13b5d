"""Expression, response and pathway ingestion; pathway-masked tensors."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or inconsistent input file."""


@dataclass
class ExpressionMatrix:
    cell_ids: list[str]
    gene_ids: list[str]
    values: np.ndarray  # cells x genes
    normalized: bool = False

    def __post_init__(self) -> None:
        _check_unique(self.cell_ids, "cell id")
        _check_unique(self.gene_ids, "gene id")
        if self.values.shape != (len(self.cell_ids), len(self.gene_ids)):
            raise DataError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.cell_ids)} cells x {len(self.gene_ids)} genes"
            )
        self._cell_row = {c: i for i, c in enumerate(self.cell_ids)}
        self._gene_col = {g: j for j, g in enumerate(self.gene_ids)}

    def row(self, cell_id: str) -> np.ndarray:
        try:
            return self.values[self._cell_row[cell_id]]
        except KeyError:
            raise KeyError(f"unknown cell id {cell_id!r}") from None

    def gene_index(self, gene_id: str) -> int | None:
        return self._gene_col.get(gene_id)


@dataclass
class NormStats:
    """Per-gene training means and population standard deviations."""

    gene_ids: list[str]
    mean: np.ndarray
    std: np.ndarray

    def save(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gene_id", "mean", "std"])
            for g, m, s in zip(self.gene_ids, self.mean, self.std):
                w.writerow([g, repr(float(m)), repr(float(s))])

    @classmethod
    def load(cls, path: str | Path) -> "NormStats":
        genes, means, stds = [], [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["gene_id", "mean", "std"]:
                raise DataError(f"{path}: expected header gene_id,mean,std")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 3:
                    raise DataError(f"{path}:{lineno}: expected 3 columns")
                genes.append(row[0])
                means.append(_to_float(row[1], path, lineno, 2))
                stds.append(_to_float(row[2], path, lineno, 3))
        _check_unique(genes, "gene id")
        return cls(genes, np.array(means), np.array(stds))


@dataclass
class PathwayDB:
    pathways: list[tuple[str, list[str]]]
    descriptions: dict[str, str] = field(default_factory=dict)

    @property
    def n_pathways(self) -> int:
        return len(self.pathways)

    @property
    def max_genes(self) -> int:
        return max(len(genes) for _, genes in self.pathways)

    @property
    def ids(self) -> list[str]:
        return [pid for pid, _ in self.pathways]


@dataclass
class PathwayTensor:
    cell_id: str
    matrix: np.ndarray  # N_p x N_g


@dataclass
class ResponseTable:
    cell_ids: list[str]
    drug_ids: list[str]
    ln_ic50: np.ndarray

    def __len__(self) -> int:
        return len(self.cell_ids)

    def pairs(self) -> list[tuple[str, str]]:
        return list(zip(self.cell_ids, self.drug_ids))

    def subset(self, index: Sequence[int]) -> "ResponseTable":
        idx = list(index)
        return ResponseTable(
            [self.cell_ids[i] for i in idx],
            [self.drug_ids[i] for i in idx],
            self.ln_ic50[idx].copy(),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_id", "drug_id", "ln_ic50"])
            for c, d, y in zip(self.cell_ids, self.drug_ids, self.ln_ic50):
                w.writerow([c, d, repr(float(y))])


def _check_unique(ids: Iterable[str], what: str) -> None:
    seen: set[str] = set()
    for x in ids:
        if x in seen:
            raise DataError(f"duplicate {what} {x!r}")
        seen.add(x)


def _to_float(text: str, path, lineno: int, col: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{path}: row {lineno}, column {col}: non-numeric value {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"{path}: row {lineno}, column {col}: non-finite value {text!r}")
    return value


def load_expression(path: str | Path) -> ExpressionMatrix:
    """Read a cells x genes CSV whose first column holds cell ids."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise DataError(f"{path}: missing header row")
        genes = header[1:]
        _check_unique(genes, "gene id")
        cells, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            cells.append(row[0])
            rows.append([_to_float(x, path, lineno, j + 2) for j, x in enumerate(row[1:])])
    if not cells:
        raise DataError(f"{path}: no data rows")
    return ExpressionMatrix(cells, genes, np.array(rows, dtype=float))


def compute_norm_stats(m: ExpressionMatrix) -> NormStats:
    if len(m.cell_ids) < 2:
        raise DataError("z-score normalization needs at least 2 cells")
    return NormStats(list(m.gene_ids), m.values.mean(axis=0), m.values.std(axis=0))


def zscore_normalize(m: ExpressionMatrix, stats: NormStats | None = None) -> ExpressionMatrix:
    """Standardize each gene column with population std.

    With ``stats`` given (transfer to a new expression matrix) the stored
    training statistics are applied instead of the matrix's own; genes the
    stats do not cover become all-zero columns. Zero-variance genes map to 0.
    """
    if m.normalized:
        raise DataError("matrix is already normalized")
    if stats is None:
        stats = compute_norm_stats(m)
        mean, std = stats.mean, stats.std
    else:
        col = {g: j for j, g in enumerate(stats.gene_ids)}
        idx = [col.get(g, -1) for g in m.gene_ids]
        missing = sum(1 for j in idx if j < 0)
        if missing:
            logger.warning("%d genes have no stored normalization statistics; set to 0", missing)
        mean = np.array([stats.mean[j] if j >= 0 else 0.0 for j in idx])
        std = np.array([stats.std[j] if j >= 0 else 0.0 for j in idx])
    # Relative guard so float noise in a constant column is not amplified.
    scale = np.maximum(np.abs(mean), 1.0)
    constant = std <= 1e-12 * scale
    safe = np.where(constant, 1.0, std)
    z = (m.values - mean) / safe
    z[:, constant] = 0.0
    return ExpressionMatrix(list(m.cell_ids), list(m.gene_ids), z, normalized=True)


def load_pathways(path: str | Path) -> PathwayDB:
    """Read a GMT file: ``pathway_id<TAB>description<TAB>gene...`` per line."""
    pathways: list[tuple[str, list[str]]] = []
    desc: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            pid = parts[0].strip()
            genes = list(dict.fromkeys(g.strip() for g in parts[2:] if g.strip()))
            if not pid or not genes:
                raise DataError(f"{path}:{lineno}: empty pathway line")
            if pid in desc:
                raise DataError(f"{path}:{lineno}: duplicate pathway id {pid!r}")
            desc[pid] = parts[1] if len(parts) > 1 else ""
            pathways.append((pid, genes))
    if not pathways:
        raise DataError(f"{path}: no pathways")
    return PathwayDB(pathways, desc)


def write_gmt(db: PathwayDB, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pid, genes in db.pathways:
            fh.write("\t".join([pid, db.descriptions.get(pid, "")] + genes) + "\n")


class PathwayIndexer:
    """Precomputed gene-slot mapping for building tensors against one matrix.

    Genes named by a pathway but absent from the expression matrix keep a
    zero slot; the count is logged once.
    """

    def __init__(self, m: ExpressionMatrix, db: PathwayDB):
        self.db = db
        self.shape = (db.n_pathways, db.max_genes)
        rows, slots, cols = [], [], []
        missing: set[str] = set()
        for p, (_, genes) in enumerate(db.pathways):
            for s, gene in enumerate(genes):
                j = m.gene_index(gene)
                if j is None:
                    missing.add(gene)
                    continue
                rows.append(p)
                slots.append(s)
                cols.append(j)
        if missing:
            logger.warning("%d pathway genes absent from expression matrix; their slots stay 0", len(missing))
        self.missing_genes = sorted(missing)
        self._rows = np.array(rows, dtype=int)
        self._slots = np.array(slots, dtype=int)
        self._cols = np.array(cols, dtype=int)

    def tensor(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self._rows, self._slots] = values[self._cols]
        return out


def build_pathway_tensor(m: ExpressionMatrix, db: PathwayDB, cell_id: str,
                         indexer: PathwayIndexer | None = None) -> PathwayTensor:
    """Row p holds pathway p's z-scores in GMT order, zero-padded to N_g."""
    if not m.normalized:
        raise DataError("expression matrix must be z-score normalized first")
    indexer = indexer or PathwayIndexer(m, db)
    return PathwayTensor(cell_id, indexer.tensor(m.row(cell_id)))


def load_responses(path: str | Path, excluded_drugs: Iterable[str] = ()) -> ResponseTable:
    """Read ``cell_id,drug_id,ln_ic50`` rows; exact duplicates collapse."""
    excluded = set(excluded_drugs)
    seen: dict[tuple[str, str], float] = {}
    dropped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["cell_id", "drug_id", "ln_ic50"]:
            raise DataError(f"{path}: expected header cell_id,drug_id,ln_ic50")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            cell, drug = row[0], row[1]
            y = _to_float(row[2], path, lineno, 3)
            if drug in excluded:
                dropped += 1
                continue
            key = (cell, drug)
            if key in seen:
                if seen[key] != y:
                    raise DataError(f"{path}: row {lineno}: conflicting ln_ic50 for pair {key}")
                continue
            seen[key] = y
    if dropped:
        logger.info("dropped %d response rows for excluded drugs", dropped)
    cells = [k[0] for k in seen]
    drugs = [k[1] for k in seen]
    return ResponseTable(cells, drugs, np.array(list(seen.values()), dtype=float))
