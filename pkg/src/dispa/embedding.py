"""Drug- and substructure-level embedding vectors.

Two sources: a precomputed CSV (e.g. 768-d vectors from a chemical language
model) or a deterministic signed feature-hashing encoder over character
n-grams of the SMILES string.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dispa.hashing import hash64


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = 64
    mode: str = "hashed"  # "hashed" or "file"
    ngram_range: tuple[int, int] = (1, 3)

    def __post_init__(self) -> None:
        if self.dim < 8:
            raise EmbeddingError("embedding dim must be >= 8")
        lo, hi = self.ngram_range
        if not 1 <= lo <= hi:
            raise EmbeddingError(f"bad ngram range {self.ngram_range}")
        if self.mode not in ("hashed", "file"):
            raise EmbeddingError(f"unknown embedding mode {self.mode!r}")


@dataclass
class DrugEmbedding:
    drug_id: str
    vector: np.ndarray  # (d_e,)


@dataclass
class SubEmbeddings:
    drug_id: str
    matrix: np.ndarray  # (N_s, d_e)


def embed_string(s: str, cfg: EmbeddingConfig = EmbeddingConfig()) -> np.ndarray:
    """Unit-norm signed hash of the counted character n-grams of ``s``.

    Each n-gram hashes to a 64-bit value that feeds two probes: bits 0-31
    and 32-63 each pick a bucket (low bits) and a sign (top bit). With a
    single probe two n-grams of one short string can cancel exactly and make
    it collide with a shorter string; two independent probes make that
    require a double coincidence.
    """
    if not s:
        raise EmbeddingError("cannot embed an empty string")
    vec = np.zeros(cfg.dim)
    lo, hi = cfg.ngram_range
    for n in range(lo, hi + 1):
        for i in range(len(s) - n + 1):
            h = hash64(f"{n}:{s[i:i + n]}")
            for half in (h & 0xFFFFFFFF, h >> 32):
                sign = -1.0 if half >> 31 else 1.0
                vec[half % cfg.dim] += sign
    norm = math.sqrt(float(vec @ vec))
    if norm == 0.0:
        # Every n-gram cancelled; fall back to the whole-string bucket.
        h = hash64(f"*:{s}")
        vec[h % cfg.dim] = 1.0
        return vec
    return vec / norm


class EmbeddingStore:
    """Vectors keyed by ``drug_id`` (drug level) or ``(drug_id, index)``."""

    def __init__(self, dim: int):
        self.dim = dim
        self.drug: dict[str, np.ndarray] = {}
        self.sub: dict[tuple[str, int], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.drug) + len(self.sub)

    def add(self, drug_id: str, vector: np.ndarray, fragment_index: int | None = None) -> None:
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.dim,):
            raise EmbeddingError(f"vector for {drug_id!r} has dim {vector.shape}, expected {self.dim}")
        if fragment_index is None:
            if drug_id in self.drug:
                raise EmbeddingError(f"duplicate embedding key {drug_id!r}")
            self.drug[drug_id] = vector
        else:
            key = (drug_id, fragment_index)
            if key in self.sub:
                raise EmbeddingError(f"duplicate embedding key {key!r}")
            self.sub[key] = vector

    def merge(self, other: "EmbeddingStore") -> None:
        if other.dim != self.dim:
            raise EmbeddingError(f"dim mismatch: {other.dim} vs {self.dim}")
        for k, v in other.drug.items():
            self.add(k, v)
        for (k, i), v in other.sub.items():
            self.add(k, v, i)


def load_embedding_file(path: str | Path, store: EmbeddingStore | None = None) -> EmbeddingStore:
    """Read ``drug_id[,fragment_index],v0..v{d-1}`` rows.

    A ``fragment_index`` column marks substructure rows; without it every row
    is a drug-level vector. The dimension comes from the header.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "drug_id":
            raise EmbeddingError(f"{path}: first column must be drug_id")
        has_index = len(header) > 1 and header[1] == "fragment_index"
        first = 2 if has_index else 1
        dim = len(header) - first
        if dim < 1:
            raise EmbeddingError(f"{path}: no value columns")
        if store is None:
            store = EmbeddingStore(dim)
        elif store.dim != dim:
            raise EmbeddingError(f"{path}: dim {dim} does not match store dim {store.dim}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise EmbeddingError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                values = np.array([float(x) for x in row[first:]])
                index = int(row[1]) if has_index else None
            except ValueError:
                raise EmbeddingError(f"{path}: row {lineno}: non-numeric entry") from None
            if not np.all(np.isfinite(values)):
                raise EmbeddingError(f"{path}: row {lineno}: non-finite entry")
            store.add(row[0], values, index)
    return store


def save_embedding_file(store: EmbeddingStore, path: str | Path, *, level: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        cols = [f"v{i}" for i in range(store.dim)]
        if level == "drug":
            w.writerow(["drug_id"] + cols)
            for k in sorted(store.drug):
                w.writerow([k] + [repr(float(x)) for x in store.drug[k]])
        else:
            w.writerow(["drug_id", "fragment_index"] + cols)
            for (k, i) in sorted(store.sub):
                w.writerow([k, i] + [repr(float(x)) for x in store.sub[(k, i)]])


def embed_drug(
    drug_id: str,
    smiles: str,
    fragments: Sequence[str],
    cfg: EmbeddingConfig = EmbeddingConfig(),
    store: EmbeddingStore | None = None,
) -> tuple[DrugEmbedding, SubEmbeddings]:
    """Drug vector from the full SMILES plus one row per fragment."""
    if not fragments:
        raise EmbeddingError(f"drug {drug_id!r} has no fragments")
    if cfg.mode == "hashed":
        drug_vec = embed_string(smiles, cfg)
        sub = np.stack([embed_string(f, cfg) for f in fragments])
        return DrugEmbedding(drug_id, drug_vec), SubEmbeddings(drug_id, sub)

    if store is None:
        raise EmbeddingError("file mode needs an embedding store")
    if store.dim != cfg.dim:
        raise EmbeddingError(f"embedding file dim {store.dim} does not match configured dim {cfg.dim}")
    if drug_id not in store.drug:
        raise EmbeddingError(f"no drug-level embedding for {drug_id!r}")
    rows = []
    for i in range(len(fragments)):
        if (drug_id, i) not in store.sub:
            raise EmbeddingError(f"no embedding for drug {drug_id!r} fragment {i}")
        rows.append(store.sub[(drug_id, i)])
    return DrugEmbedding(drug_id, store.drug[drug_id]), SubEmbeddings(drug_id, np.stack(rows))
