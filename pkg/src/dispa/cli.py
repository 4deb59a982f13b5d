"""``dispa`` command line.

Every command writes into its own ``--out`` directory together with a
``manifest.json`` holding the config snapshot and input/output digests.
Options may also come from a flat ``key = value`` file given with
``--config``; flags on the command line win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

logger = logging.getLogger("dispa")

FRAGMENT_CACHE_NAME = "fragments.json"
CACHE_ENV = "DISPA_CACHE_DIR"
THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class CliError(Exception):
    """User-facing failure: bad arguments, missing files, incompatible inputs."""


# --------------------------------------------------------------------------
# config file


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment; dashes in keys
    are read as underscores so keys may be written like the flags."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise CliError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


# --------------------------------------------------------------------------
# parser


def _add_training_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training hyperparameters")
    g.add_argument("--learning-rate", type=float, default=1e-3)
    g.add_argument("--epochs", type=int, default=200)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--d-a", type=int, default=32, help="encoder width")
    g.add_argument("--d", type=int, default=None, help="attention width (default: d_a)")
    g.add_argument("--lambda-init", type=float, default=0.5)
    g.add_argument("--patience", type=int, default=20)
    g.add_argument("--layer-norm", type=_bool, default=False)


def _add_expectation(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-a", type=int, default=None,
                   help="expected encoder width; a checkpoint with another width is refused")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dispa", description="Drug response prediction with dual-view "
                                     "differential cross-attention over pathways and substructures.")
    parser.add_argument("--version", action="store_true", help="print version and exit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file; flags override it")
    common.add_argument("--seed", type=int, default=0, help="base seed for all randomness")
    common.add_argument("--threads", type=int, default=None, help="cap numeric library threads")
    common.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("prepare", parents=[common], help="build a dataset bundle")
    p.add_argument("--expression", required=True, help="cells x genes CSV (first column cell_id)")
    p.add_argument("--responses", required=True, help="cell_id,drug_id,ln_ic50 CSV")
    p.add_argument("--pathways", required=True, help="GMT file")
    p.add_argument("--drugs", required=True, help="drug_id,smiles CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--embedding-dim", type=int, default=64)
    p.add_argument("--embedding-file", help="precomputed embeddings (switches to file mode)")
    p.add_argument("--allow-salts", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--keep-unfragmented", type=_bool, nargs="?", const=True, default=True)

    p = sub.add_parser("fragment", parents=[common], help="fragment drugs into substructures")
    p.add_argument("--input", help="drug_id,smiles CSV")
    p.add_argument("--output", help="output CSV (drug_id,fragment_index,fragment_smiles)")
    p.add_argument("--print-rules", action="store_true", help="print the rule table and exit")
    p.add_argument("--allow-salts", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--keep-unfragmented", type=_bool, nargs="?", const=True, default=True)

    p = sub.add_parser("train", parents=[common], help="train over split modes and seeds")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="dispa")
    p.add_argument("--splits", default="random", help="comma list of random,cell_blind,drug_blind,disjoint")
    p.add_argument("--seeds", type=int, default=1, help="number of repeated runs (seed, seed+1, ...)")
    p.add_argument("--fixed-test", type=_bool, nargs="?", const=True, default=False,
                   help="hold the test part fixed across seeds")
    _add_training_options(p)

    p = sub.add_parser("evaluate", parents=[common], help="metrics of a checkpoint on a split part")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--part", choices=["train", "val", "test", "all"], default="test")
    _add_expectation(p)

    p = sub.add_parser("predict", parents=[common], help="predict for a new expression matrix")
    p.add_argument("--bundle", required=True, help="bundle providing pathways, drugs and statistics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--expression", required=True, help="units x genes CSV (raw, not normalized)")
    p.add_argument("--norm-stats", help="gene_id,mean,std CSV (default: the bundle's)")
    p.add_argument("--drugs", help="comma list of drug ids (default: all bundle drugs)")
    p.add_argument("--out", required=True)
    _add_expectation(p)

    p = sub.add_parser("attention", parents=[common], help="export attention maps and alignment scores")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", help="cell_id,drug_id CSV (default: every response pair)")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--per-cell", type=_bool, nargs="?", const=True, default=False,
                   help="alignment per cell instead of the cell-averaged map")
    _add_expectation(p)

    p = sub.add_parser("compare-groups", parents=[common], help="group-selective drugs and Moran's I")
    p.add_argument("--predictions", required=True, help="unit_id,drug_id,ln_ic50_pred CSV")
    p.add_argument("--labels", required=True, help="unit_id,group CSV")
    p.add_argument("--coords", help="unit_id,x,y CSV for k-nearest-neighbour weights")
    p.add_argument("--edges", help="unit_a,unit_b CSV of neighbour pairs (e.g. grid rook adjacency)")
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--pairwise", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--n-perm", type=int, default=999)
    p.add_argument("--out", required=True)

    sub.add_parser("selftest", parents=[common], help="run the built-in oracle checks")
    return parser


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config_file(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise CliError(f"{args.config}: unknown keys {unknown}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


# --------------------------------------------------------------------------
# helpers shared by commands


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_rows(path: Path, header, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path: str | Path, required: list[str]) -> list[dict[str, str]]:
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise CliError(f"{path}: missing column(s) {missing}")
        return list(reader)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _pm(mean: float, std: float | None) -> str:
    return f"{mean:.4f}" if std is None else f"{mean:.4f} ± {std:.4f}"


def _config_snapshot(args: argparse.Namespace) -> dict:
    skip = {"command", "config", "log_level", "threads", "version"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _data_signature(data) -> dict:
    import hashlib

    ids = "\n".join(data.pathway_ids).encode()
    return {
        "n_pathways": data.n_pathways,
        "max_genes": data.max_genes,
        "embed_dim": data.embed_dim,
        "pathways_sha256": hashlib.sha256(ids).hexdigest()[:16],
    }


def _load_checked(checkpoint: str, data, expected_d_a: int | None = None):
    """Load a checkpoint and refuse it if it does not fit the bundle."""
    from dispa.model import ModelError, load_checkpoint

    if not Path(checkpoint).exists():
        raise CliError(f"checkpoint not found: {checkpoint}")
    try:
        cfg, params, manifest = load_checkpoint(checkpoint)
    except (ModelError, OSError, ValueError, KeyError) as err:
        raise CliError(f"cannot read checkpoint {checkpoint}: {err}") from err
    want = _data_signature(data)
    have = manifest.get("data", {})
    diffs = [f"{k}: checkpoint {have.get(k)!r} vs bundle {v!r}" for k, v in want.items() if have.get(k) != v]
    if expected_d_a is not None and expected_d_a != cfg.d_a:
        diffs.append(f"d_a: checkpoint {cfg.d_a} vs requested {expected_d_a}")
    if diffs:
        raise CliError("config hash mismatch between checkpoint and data bundle: " + "; ".join(diffs))
    return cfg, params, manifest


def _cache_file(name: str) -> Path | None:
    """File inside the cache directory named by ``DISPA_CACHE_DIR``, if set."""
    root = os.environ.get(CACHE_ENV)
    return Path(root) / name if root else None


def _load_fragment_cache() -> dict | None:
    path = _cache_file(FRAGMENT_CACHE_NAME)
    if path is None:
        return None
    return json.loads(path.read_text()) if path.exists() else {}


def _save_fragment_cache(cache: dict | None) -> None:
    path = _cache_file(FRAGMENT_CACHE_NAME)
    if path is not None and cache is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(cache, sort_keys=True))


def _bundle(path: str):
    from dispa.bundle import load_bundle

    return load_bundle(path)


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    from dispa.bundle import prepare
    from dispa.embedding import EmbeddingConfig

    mode = "file" if args.embedding_file else "hashed"
    cache = _load_fragment_cache()
    summary = prepare(
        args.out, args.expression, args.responses, args.pathways, args.drugs,
        embedding=EmbeddingConfig(dim=args.embedding_dim, mode=mode),
        embedding_file=args.embedding_file,
        allow_salts=args.allow_salts,
        keep_unfragmented=args.keep_unfragmented,
        fragment_cache=cache,
    )
    _save_fragment_cache(cache)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_fragment(args) -> int:
    from dispa.bundle import load_drug_table, prepare_drugs, write_fragment_table
    from dispa.chem.brics import rule_table

    if args.print_rules:
        rows = rule_table()
        _emit_csv(sys.stdout, list(rows[0]), [list(r.values()) for r in rows])
        return 0
    if not args.input or not args.output:
        raise CliError("fragment needs --input and --output (or --print-rules)")
    cache = _load_fragment_cache()
    drugs, excluded = prepare_drugs(load_drug_table(args.input), allow_salts=args.allow_salts,
                                    keep_unfragmented=args.keep_unfragmented, cache=cache)
    _save_fragment_cache(cache)
    write_fragment_table(drugs, args.output)
    for e in excluded:
        print(f"excluded {e.drug_id}: {e.reason}", file=sys.stderr)
    return 0


def _emit_csv(fh, header, rows) -> None:
    import csv

    w = csv.writer(fh)
    w.writerow(header)
    w.writerows(rows)


def cmd_train(args) -> int:
    from dispa.bundle import write_manifest
    from dispa.model import save_checkpoint
    from dispa.training import (
        SPLIT_MODES,
        MetricsReport,
        RunConfig,
        SplitSpec,
        checkpoint_path,
        evaluate,
        run_report,
        train,
    )

    modes = [m.strip() for m in args.splits.split(",") if m.strip()]
    bad = [m for m in modes if m not in SPLIT_MODES]
    if bad or not modes:
        raise CliError(f"unknown split mode(s) {bad}; choose from {', '.join(SPLIT_MODES)}")
    if args.seeds < 1:
        raise CliError("--seeds must be at least 1")
    data, _ = _bundle(args.bundle)
    out = Path(args.out)
    seeds = [args.seed + k for k in range(args.seeds)]
    table = []
    for mode in modes:
        runs = []
        for s in seeds:
            # Split and model-init seeds move together; the fixed test part
            # comes from the base seed.
            spec = SplitSpec(mode=mode, seed=s, fixed_test=args.fixed_test, test_seed=args.seed)
            config = RunConfig(learning_rate=args.learning_rate, epochs=args.epochs, batch_size=args.batch_size,
                               d_a=args.d_a, d=args.d, lambda_init=args.lambda_init, patience=args.patience,
                               seed=s, layer_norm=args.layer_norm)
            logger.info("training %s seed %d", mode, s)
            result = train(data, config, spec)
            evals = {}
            for part in ("val", "test"):
                idx = getattr(result.split, part)
                if len(idx) >= 2:
                    evals[part] = evaluate(result.params, result.model_config, data, idx)
            report = run_report(config, spec, result, evals)
            ckpt = checkpoint_path(out, args.name, mode, s)
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ckpt, result.model_config, result.params,
                            {"run_config": report["config"], "split": report["split"],
                             "data": _data_signature(data)})
            _json_dump(ckpt.parent / "report.json", report)
            if "test" in evals:
                runs.append(evals["test"].metrics())
        if runs:
            rep = MetricsReport(runs)
            mean, std = rep.mean(), rep.std()
            table.append([mode, len(runs)] + [
                x for k in ("rmse", "pcc", "scc") for x in (_fmt(mean[k]), _fmt(std[k] if std else None))
            ] + [_pm(mean[k], std[k] if std else None) for k in ("rmse", "pcc", "scc")])
            _json_dump(out / "runs" / args.name / mode / "aggregate.json", rep.to_dict())
    _write_rows(out / "summary_table.csv", ["split", "n_runs", "rmse_mean", "rmse_std", "pcc_mean", "pcc_std",
                                             "scc_mean", "scc_std", "rmse", "pcc", "scc"], table)
    write_manifest(out, "train", _config_snapshot(args), {}, seeds)
    for row in table:
        print(",".join(str(x) for x in row))
    return 0


def _split_for(manifest: dict, data):
    from dispa.training import SplitSpec, make_split

    s = manifest.get("split")
    if not s:
        raise CliError("checkpoint has no recorded split")
    # Training from the CLI never pins test ids, so mode and seeds rebuild it.
    spec = SplitSpec(mode=s["mode"], ratios=tuple(s["ratios"]), seed=s["seed"], fixed_test=s["fixed_test"],
                     test_seed=s["test_seed"])
    return make_split(data.responses, spec)


def cmd_evaluate(args) -> int:
    import numpy as np

    from dispa.bundle import write_manifest
    from dispa.training import evaluate_predictions, predict_pairs

    data, _ = _bundle(args.bundle)
    cfg, params, manifest = _load_checked(args.checkpoint, data, args.d_a)
    if args.part == "all":
        idx = np.arange(len(data.responses))
    else:
        idx = getattr(_split_for(manifest, data), args.part)
    if len(idx) == 0:
        raise CliError(f"the {args.part} part is empty")
    pred, _ = predict_pairs(params, cfg, data, idx)
    sub = data.responses.subset(idx)
    ev = evaluate_predictions(sub, pred)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _json_dump(out / "metrics.json", {"part": args.part, "n": ev.n, **ev.metrics()})
    _write_rows(out / "per_drug_pcc.csv", ["drug_id", "n", "pcc"], [[g.id, g.n, _fmt(g.pcc)] for g in ev.per_drug])
    _write_rows(out / "per_cell_pcc.csv", ["cell_id", "n", "pcc"], [[g.id, g.n, _fmt(g.pcc)] for g in ev.per_cell])
    _write_rows(out / "predictions.csv", ["cell_id", "drug_id", "ln_ic50", "ln_ic50_pred"],
                [[c, d, _fmt(y), _fmt(p)] for c, d, y, p in zip(sub.cell_ids, sub.drug_ids, sub.ln_ic50, pred)])
    write_manifest(out, "evaluate", _config_snapshot(args),
                   {"checkpoint": args.checkpoint, **_bundle_inputs(args.bundle)})
    print(json.dumps(ev.metrics(), sort_keys=True))
    return 0


def _bundle_inputs(bundle: str) -> dict[str, Path]:
    root = Path(bundle)
    return {f"bundle/{n}": root / n for n in ("responses.csv", "expression_z.csv", "embeddings_sub.csv")}


def cmd_predict(args) -> int:
    from dispa.bundle import write_manifest
    from dispa.model import const_params, forward_batch, make_batch
    from dispa.pathways import NormStats, PathwayIndexer, load_expression, zscore_normalize
    from dispa.training import INFERENCE_CHUNK

    data, info = _bundle(args.bundle)
    cfg, params, _ = _load_checked(args.checkpoint, data, args.d_a)
    stats = NormStats.load(args.norm_stats) if args.norm_stats else info.norm_stats
    raw = load_expression(args.expression)
    z = zscore_normalize(raw, stats)
    indexer = PathwayIndexer(z, info.pathways)
    units = {u: indexer.tensor(z.values[i]) for i, u in enumerate(z.cell_ids)}
    drugs = sorted(data.drug_inputs)
    if args.drugs:
        drugs = [d.strip() for d in args.drugs.split(",") if d.strip()]
        unknown = [d for d in drugs if d not in data.drug_inputs]
        if unknown:
            raise CliError(f"drugs not in bundle: {unknown}")
    pairs = [(u, d) for u in z.cell_ids for d in drugs]
    p = const_params(params)
    preds = []
    for start in range(0, len(pairs), INFERENCE_CHUNK):
        chunk = pairs[start:start + INFERENCE_CHUNK]
        preds.extend(forward_batch(p, cfg, make_batch(chunk, units, data.drug_inputs)).y.data[:, 0].tolist())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "predictions.csv", ["unit_id", "drug_id", "ln_ic50_pred"],
                [[u, d, _fmt(y)] for (u, d), y in zip(pairs, preds)])
    inputs = {"checkpoint": args.checkpoint, "expression": args.expression, **_bundle_inputs(args.bundle)}
    if args.norm_stats:
        inputs["norm_stats"] = args.norm_stats
    write_manifest(out, "predict", _config_snapshot(args), inputs)
    print(f"{len(preds)} predictions for {len(z.cell_ids)} units x {len(drugs)} drugs")
    return 0


def cmd_attention(args) -> int:
    from dispa.analysis import AnalysisError, export_attention, substructure_alignment
    from dispa.bundle import write_manifest
    from dispa.training import predict_pairs

    data, _ = _bundle(args.bundle)
    cfg, params, _ = _load_checked(args.checkpoint, data, args.d_a)
    r = data.responses
    if args.pairs:
        index = {(c, d): i for i, (c, d) in enumerate(r.pairs())}
        rows = _read_rows(args.pairs, ["cell_id", "drug_id"])
        missing = [(x["cell_id"], x["drug_id"]) for x in rows if (x["cell_id"], x["drug_id"]) not in index]
        if missing:
            raise CliError(f"pairs not in the bundle's response table: {missing[:5]}")
        idx = [index[(x["cell_id"], x["drug_id"])] for x in rows]
    else:
        idx = list(range(len(r)))
    _, records = predict_pairs(params, cfg, data, idx, attention=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_attention(records, out / f"attention.{args.format}")

    rows = []
    by_drug: dict[str, list] = {}
    for rec in records:
        by_drug.setdefault(rec.drug_id, []).append(rec)
    for drug in sorted(by_drug):
        frags = data.fragments.get(drug, [])
        if len(frags) < 3:
            continue
        try:
            res = substructure_alignment(drug, frags, by_drug[drug], per_cell=args.per_cell)
        except AnalysisError as err:
            logger.warning("alignment skipped for %s: %s", drug, err)
            continue
        for a in res if isinstance(res, list) else [res]:
            rows.append([a.drug_id, a.cell_id or "", _fmt(a.score), a.n_pairs])
    # The score construction (Tanimoto of fragment fingerprints vs cosine of
    # attention columns, Spearman over pairs) is this tool's own choice.
    _write_rows(out / "alignment.csv", ["drug_id", "cell_id", "score", "n_pairs"], rows)
    write_manifest(out, "attention", _config_snapshot(args),
                   {"checkpoint": args.checkpoint, **_bundle_inputs(args.bundle)})
    print(f"{len(records)} attention records, {len(rows)} alignment scores")
    return 0


def cmd_compare_groups(args) -> int:
    import numpy as np

    from dispa.analysis import SpatialField, adjacency_from_edges, group_selective_drugs, knn_weights, morans_i
    from dispa.bundle import write_manifest

    preds: dict[str, dict[str, float]] = {}
    for row in _read_rows(args.predictions, ["unit_id", "drug_id", "ln_ic50_pred"]):
        preds.setdefault(row["drug_id"], {})[row["unit_id"]] = float(row["ln_ic50_pred"])
    labels = {row["unit_id"]: row["group"] for row in _read_rows(args.labels, ["unit_id", "group"])}
    result = group_selective_drugs(preds, labels, args.alpha, pairwise=args.pairwise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for key, comps in result.comparisons.items():
        safe = key.replace(">", "_vs_").replace("/", "_")
        _write_rows(out / f"selective_{safe}.csv", ["drug_id", "group_a", "group_b", "delta", "u", "p_raw",
                                                    "p_adjusted", "selective"],
                    [[c.drug_id, c.group_a, c.group_b, _fmt(c.delta), _fmt(c.u), _fmt(c.p_raw),
                      _fmt(c.p_adjusted), int(c.p_adjusted < args.alpha)] for c in comps])
    _write_rows(out / "overlap.csv", ["comparisons", "n_drugs"],
                [["+".join(k), n] for k, n in result.overlap_counts().items()])
    inputs = {"predictions": args.predictions, "labels": args.labels}

    if args.coords or args.edges:
        if args.coords:
            rows = _read_rows(args.coords, ["unit_id", "x", "y"])
            spots = [r["unit_id"] for r in rows]
            w = knn_weights(np.array([[float(r["x"]), float(r["y"])] for r in rows]), args.k)
            inputs["coords"] = args.coords
        else:
            edges = [(r["unit_a"], r["unit_b"]) for r in _read_rows(args.edges, ["unit_a", "unit_b"])]
            spots = sorted({u for e in edges for u in e})
            w = adjacency_from_edges(spots, edges)
            inputs["edges"] = args.edges
        moran_rows = []
        for drug in sorted(preds):
            if not all(s in preds[drug] for s in spots):
                continue
            vals = np.array([preds[drug][s] for s in spots])
            if np.ptp(vals) == 0:
                moran_rows.append([drug, "", "", ""])
                continue
            m = morans_i(SpatialField(spots, vals, w), args.n_perm, args.seed)
            moran_rows.append([drug, _fmt(m.i), _fmt(m.expected), _fmt(m.p_value)])
        _write_rows(out / "morans_i.csv", ["drug_id", "morans_i", "expected", "p_perm"], moran_rows)
    write_manifest(out, "compare-groups", _config_snapshot(args), inputs, [args.seed])
    for key in sorted(result.comparisons):
        print(f"{key}: {len(result.selective(key))} selective drugs")
    return 0


def cmd_selftest(args) -> int:
    from dispa.selftest import run_all

    return 0 if run_all(print) else 1


COMMANDS = {
    "prepare": cmd_prepare,
    "fragment": cmd_fragment,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "attention": cmd_attention,
    "compare-groups": cmd_compare_groups,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except CliError as err:
        print(json.dumps({"error": "CliError", "message": str(err)}), file=sys.stderr)
        return 2
    if args.version:
        from dispa import __version__

        print(__version__)
        return 0
    if not args.command:
        build_parser().print_help()
        return 2
    if args.threads is not None:
        # Only effective before the numeric libraries load, which is why the
        # command modules are imported lazily.
        for var in THREAD_ENV_VARS:
            os.environ[var] = str(max(1, args.threads))
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except CliError as err:
        print(json.dumps({"error": "CliError", "message": str(err)}), file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
