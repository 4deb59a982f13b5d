"""Dataset bundles: the directory written by ``dispa prepare`` and read by
every later command, plus run manifests with file digests."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, MutableMapping, Sequence

import numpy as np

import dispa
from dispa.chem.brics import RULE_TABLE_VERSION, Fragment, fragment
from dispa.chem.smiles import SmilesError, parse_smiles
from dispa.data import Dataset
from dispa.embedding import EmbeddingConfig, EmbeddingStore, embed_drug, load_embedding_file, save_embedding_file
from dispa.pathways import (
    DataError,
    ExpressionMatrix,
    NormStats,
    PathwayDB,
    PathwayIndexer,
    ResponseTable,
    compute_norm_stats,
    load_expression,
    load_pathways,
    load_responses,
    write_gmt,
    zscore_normalize,
)

logger = logging.getLogger(__name__)

# Elements the fragmenter and embedding path handle; anything else (metals,
# noble gases) marks a drug as excluded rather than failing the whole run.
SUPPORTED_ELEMENTS = frozenset({"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I", "H", "Si", "Se"})

MANIFEST_NAME = "manifest.json"


@dataclass
class PreparedDrug:
    drug_id: str
    smiles: str
    fragments: list[Fragment]


@dataclass
class ExcludedDrug:
    drug_id: str
    smiles: str
    reason: str


def load_drug_table(path: str | Path) -> list[tuple[str, str, int]]:
    """Read ``drug_id,smiles`` rows as (id, smiles, line number)."""
    rows = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["drug_id", "smiles"]:
            raise DataError(f"{path}: expected header drug_id,smiles")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2 or not row[0].strip() or not row[1].strip():
                raise DataError(f"{path}: row {lineno}: need drug_id and smiles")
            drug_id = row[0].strip()
            if drug_id in seen:
                raise DataError(f"{path}: row {lineno}: duplicate drug id {drug_id!r}")
            seen.add(drug_id)
            rows.append((drug_id, row[1].strip(), lineno))
    return rows


def prepare_drugs(
    rows: Iterable[tuple[str, str, int] | tuple[str, str]],
    *,
    allow_salts: bool = False,
    keep_unfragmented: bool = True,
    cache: MutableMapping[str, list] | None = None,
) -> tuple[list[PreparedDrug], list[ExcludedDrug]]:
    """Parse and fragment each drug; unusable ones are excluded with a reason.

    ``cache`` maps a key of the SMILES, the salt flag and the rule-table
    version to JSON-ready fragment lists; hits skip parsing and cutting.
    """
    kept, excluded = [], []
    for row in rows:
        drug_id, smiles = row[0], row[1]
        where = f" (line {row[2]})" if len(row) > 2 else ""
        key = f"{RULE_TABLE_VERSION}|{int(allow_salts)}|{smiles}"
        if cache is not None and key in cache:
            frags = [Fragment(tuple(a), s, n) for a, s, n in cache[key]]
            if len(frags) == 1 and not keep_unfragmented:
                excluded.append(ExcludedDrug(drug_id, smiles, "no cleavable bond"))
            else:
                kept.append(PreparedDrug(drug_id, smiles, frags))
            continue
        try:
            g = parse_smiles(smiles, allow_salts=allow_salts)
        except SmilesError as err:
            logger.warning("drug %s%s excluded: %s", drug_id, where, err)
            excluded.append(ExcludedDrug(drug_id, smiles, f"parse error: {err}"))
            continue
        bad = sorted({a.element for a in g.atoms} - SUPPORTED_ELEMENTS)
        if bad:
            logger.warning("drug %s%s excluded: unsupported element(s) %s", drug_id, where, ",".join(bad))
            excluded.append(ExcludedDrug(drug_id, smiles, f"unsupported element(s): {','.join(bad)}"))
            continue
        frags = fragment(g)
        if cache is not None:
            cache[key] = [[list(f.atoms), f.smiles, f.attachment_count] for f in frags]
        if len(frags) == 1 and not keep_unfragmented:
            excluded.append(ExcludedDrug(drug_id, smiles, "no cleavable bond"))
            continue
        kept.append(PreparedDrug(drug_id, smiles, frags))
    return kept, excluded


def write_fragment_table(drugs: Sequence[PreparedDrug], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["drug_id", "fragment_index", "fragment_smiles", "attachment_count"])
        for d in drugs:
            for i, f in enumerate(d.fragments):
                w.writerow([d.drug_id, i, f.smiles, f.attachment_count])


def read_fragment_table(path: str | Path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            frags = out.setdefault(row["drug_id"], [])
            if int(row["fragment_index"]) != len(frags):
                raise DataError(f"{path}: fragments of {row['drug_id']} out of order")
            frags.append(row["fragment_smiles"])
    return out


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(outdir: str | Path, command: str, config: Mapping, inputs: Mapping[str, str | Path],
                   seeds: Sequence[int] = ()) -> dict:
    """Record command, config, input and output digests in ``outdir``.

    Paths are stored by file name only so the manifest does not depend on
    where the run happened.
    """
    outdir = Path(outdir)
    outputs = {
        str(p.relative_to(outdir)): file_digest(p)
        for p in sorted(outdir.rglob("*"))
        if p.is_file() and p.name != MANIFEST_NAME
    }
    manifest = {
        "command": command,
        "config": dict(config),
        "inputs": {k: {"name": Path(v).name, "sha256": file_digest(v)} for k, v in sorted(inputs.items())},
        "outputs": outputs,
        "seeds": list(seeds),
        "version": dispa.__version__,
    }
    (outdir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def verify_manifest(outdir: str | Path) -> list[str]:
    """Names of outputs whose digest no longer matches the manifest."""
    outdir = Path(outdir)
    manifest = json.loads((outdir / MANIFEST_NAME).read_text())
    bad = []
    for name, digest in manifest["outputs"].items():
        p = outdir / name
        if not p.exists() or file_digest(p) != digest:
            bad.append(name)
    return bad


@dataclass
class BundleInfo:
    summary: dict
    norm_stats: NormStats
    pathways: PathwayDB
    embedding: EmbeddingConfig


@dataclass
class Assembled:
    """Everything ``prepare`` derives from the raw inputs, before writing."""

    dataset: Dataset
    normalized: ExpressionMatrix
    norm_stats: NormStats
    pathways: PathwayDB
    drugs: list[PreparedDrug]
    excluded: list[ExcludedDrug]
    store: EmbeddingStore
    summary: dict


def assemble_dataset(
    expression: ExpressionMatrix,
    pathways: PathwayDB,
    responses: ResponseTable,
    drug_rows: Iterable[tuple],
    *,
    embedding: EmbeddingConfig = EmbeddingConfig(),
    embedding_store: EmbeddingStore | None = None,
    allow_salts: bool = False,
    keep_unfragmented: bool = True,
    fragment_cache: MutableMapping[str, list] | None = None,
) -> Assembled:
    """Normalize, build pathway tensors, fragment and embed drugs, filter pairs."""
    z = zscore_normalize(expression)
    stats = compute_norm_stats(expression)
    indexer = PathwayIndexer(z, pathways)

    drugs, excluded = prepare_drugs(drug_rows, allow_salts=allow_salts, keep_unfragmented=keep_unfragmented,
                                     cache=fragment_cache)
    store = EmbeddingStore(embedding.dim)
    drug_inputs = {}
    for d in drugs:
        vec, sub = embed_drug(d.drug_id, d.smiles, [f.smiles for f in d.fragments], embedding, embedding_store)
        store.add(d.drug_id, vec.vector)
        for i, row in enumerate(sub.matrix):
            store.add(d.drug_id, row, i)
        drug_inputs[d.drug_id] = (vec.vector.reshape(1, -1), sub.matrix)

    known_cells = set(z.cell_ids)
    excluded_ids = {e.drug_id for e in excluded}
    keep, n_excluded_rows, n_unresolved = [], 0, 0
    for i, (c, d) in enumerate(responses.pairs()):
        if d in excluded_ids:
            n_excluded_rows += 1
        elif c in known_cells and d in drug_inputs:
            keep.append(i)
        else:
            n_unresolved += 1
    if n_unresolved:
        logger.warning("%d response rows reference unknown cells or drugs and were dropped", n_unresolved)
    filtered = responses.subset(keep)
    if len(filtered) == 0:
        raise DataError("no response rows left after filtering")

    cell_inputs = {c: indexer.tensor(z.values[i]) for i, c in enumerate(z.cell_ids)}
    dataset = Dataset(filtered, cell_inputs, drug_inputs,
                      {d.drug_id: [f.smiles for f in d.fragments] for d in drugs}, pathways.ids)
    summary = {
        "n_pathways": pathways.n_pathways,
        "max_genes": pathways.max_genes,
        "n_cells": len(z.cell_ids),
        "n_genes": len(z.gene_ids),
        "n_drugs": len(drugs),
        "n_excluded_drugs": len(excluded),
        "n_pairs": len(filtered),
        "n_pairs_dropped_excluded": n_excluded_rows,
        "n_pairs_dropped_unresolved": n_unresolved,
        "n_missing_pathway_genes": len(indexer.missing_genes),
        "n_fragments": sum(len(d.fragments) for d in drugs),
        "embedding": {"dim": embedding.dim, "mode": embedding.mode, "ngram_range": list(embedding.ngram_range)},
        "rule_table": RULE_TABLE_VERSION,
    }
    return Assembled(dataset, z, stats, pathways, drugs, excluded, store, summary)


def write_bundle(outdir: str | Path, a: Assembled) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    z = a.normalized
    _write_csv(out / "expression_z.csv", ["cell_id"] + z.gene_ids,
               ([c] + [repr(float(x)) for x in z.values[i]] for i, c in enumerate(z.cell_ids)))
    a.norm_stats.save(out / "norm_stats.csv")
    write_gmt(a.pathways, out / "pathways.gmt")
    _write_csv(out / "drugs.csv", ["drug_id", "smiles"], ((d.drug_id, d.smiles) for d in a.drugs))
    write_fragment_table(a.drugs, out / "fragments.csv")
    save_embedding_file(a.store, out / "embeddings_drug.csv", level="drug")
    save_embedding_file(a.store, out / "embeddings_sub.csv", level="sub")
    a.dataset.responses.save(out / "responses.csv")
    _write_csv(out / "excluded_drugs.csv", ["drug_id", "smiles", "reason"],
               ((e.drug_id, e.smiles, e.reason) for e in a.excluded))
    (out / "summary.json").write_text(json.dumps(a.summary, indent=2, sort_keys=True) + "\n")


def prepare(
    outdir: str | Path,
    expression_path: str | Path,
    responses_path: str | Path,
    pathways_path: str | Path,
    drugs_path: str | Path,
    *,
    embedding: EmbeddingConfig = EmbeddingConfig(),
    embedding_file: str | Path | None = None,
    allow_salts: bool = False,
    keep_unfragmented: bool = True,
    fragment_cache: MutableMapping[str, list] | None = None,
) -> dict:
    """File-level entry point: load inputs, build the bundle, write a manifest."""
    expression = load_expression(expression_path)
    pathways = load_pathways(pathways_path)
    responses = load_responses(responses_path)
    drug_rows = load_drug_table(drugs_path)
    store = None
    if embedding.mode == "file":
        if embedding_file is None:
            raise DataError("file embedding mode needs an embedding file")
        store = load_embedding_file(embedding_file)
    assembled = assemble_dataset(expression, pathways, responses, drug_rows, embedding=embedding,
                                 embedding_store=store, allow_salts=allow_salts,
                                 keep_unfragmented=keep_unfragmented, fragment_cache=fragment_cache)
    write_bundle(outdir, assembled)
    summary = assembled.summary
    inputs = {"expression": expression_path, "responses": responses_path, "pathways": pathways_path,
              "drugs": drugs_path}
    if embedding_file is not None:
        inputs["embeddings"] = embedding_file
    write_manifest(outdir, "prepare", {"embedding": summary["embedding"], "allow_salts": allow_salts,
                                       "keep_unfragmented": keep_unfragmented}, inputs)
    return summary


def load_bundle(bundle_dir: str | Path) -> tuple[Dataset, BundleInfo]:
    root = Path(bundle_dir)
    if not (root / "summary.json").exists():
        raise DataError(f"{root}: not a dataset bundle (summary.json missing)")
    summary = json.loads((root / "summary.json").read_text())
    z = load_expression(root / "expression_z.csv")
    z.normalized = True
    pathways = load_pathways(root / "pathways.gmt")
    indexer = PathwayIndexer(z, pathways)
    cell_inputs = {c: indexer.tensor(z.values[i]) for i, c in enumerate(z.cell_ids)}
    fragments = read_fragment_table(root / "fragments.csv")
    drug_store = load_embedding_file(root / "embeddings_drug.csv")
    sub_store = load_embedding_file(root / "embeddings_sub.csv")
    drug_inputs = {}
    for drug_id, frags in fragments.items():
        sub = np.stack([sub_store.sub[(drug_id, i)] for i in range(len(frags))])
        drug_inputs[drug_id] = (drug_store.drug[drug_id].reshape(1, -1), sub)
    responses = load_responses(root / "responses.csv")
    emb = summary["embedding"]
    info = BundleInfo(
        summary=summary,
        norm_stats=NormStats.load(root / "norm_stats.csv"),
        pathways=pathways,
        embedding=EmbeddingConfig(dim=emb["dim"], mode=emb["mode"], ngram_range=tuple(emb["ngram_range"])),
    )
    return Dataset(responses, cell_inputs, drug_inputs, fragments, pathways.ids), info
