"""Data splits, Adam training with early stopping, metrics and run reports."""

from __future__ import annotations

import logging
import math
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

import dispa
from dispa import autodiff as ad
from dispa.autodiff import NonFiniteError, Tape
from dispa.data import Dataset
from dispa.model import (
    AttentionRecord,
    Batch,
    ModelConfig,
    const_params,
    forward_batch,
    init_params,
    make_batch,
    tape_params,
)
from dispa.pathways import ResponseTable

logger = logging.getLogger(__name__)

SPLIT_MODES = ("random", "cell_blind", "drug_blind", "disjoint")
MIN_BLIND_IDS = 5

# Per-purpose offsets mixed into the run seed so that streams never collide.
SEED_OFFSET_BATCHES = 1


class SplitError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class MetricsError(ValueError):
    pass


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    """How to partition response pairs into train/validation/test.

    ``ratios`` are normalized on construction. With ``fixed_test`` the test
    part is drawn from ``test_seed`` and only the train/validation division
    follows ``seed``. ``test_cells``/``test_drugs`` pin the held-out ids
    explicitly (blind and disjoint modes).
    """

    mode: str = "random"
    ratios: tuple[float, float, float] = (3.0, 1.0, 1.0)
    seed: int = 0
    fixed_test: bool = False
    test_seed: int = 0
    test_cells: tuple[str, ...] | None = None
    test_drugs: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.mode not in SPLIT_MODES:
            raise SplitError(f"unknown split mode {self.mode!r}; choose from {', '.join(SPLIT_MODES)}")
        if len(self.ratios) != 3 or any(not (r > 0) or not math.isfinite(r) for r in self.ratios):
            raise SplitError(f"split ratios must be three positive numbers, got {self.ratios}")
        total = float(sum(self.ratios))
        object.__setattr__(self, "ratios", tuple(float(r) / total for r in self.ratios))


@dataclass
class Split:
    mode: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    dropped: int = 0
    test_cells: list[str] = field(default_factory=list)
    test_drugs: list[str] = field(default_factory=list)

    def sizes(self) -> dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test), "dropped": self.dropped}


def _sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_test = int(round(n * ratios[2]))
    n_val = int(round(n * ratios[1]))
    return n - n_val - n_test, n_val, n_test


def _pick_test(ids: list[str], ratios, rng: np.random.Generator) -> list[str]:
    n_test = _sizes(len(ids), ratios)[2]
    order = rng.permutation(len(ids))
    return sorted(ids[i] for i in order[:n_test])


def _divide_rest(ids: list[str], ratios, rng: np.random.Generator) -> tuple[list[str], list[str]]:
    """Split the non-test ids into train/val using the train:val proportion."""
    r_train, r_val = ratios[0], ratios[1]
    n_val = int(round(len(ids) * r_val / (r_train + r_val)))
    order = rng.permutation(len(ids))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return train, val


def _partition_ids(ids: list[str], explicit: Sequence[str] | None, spec: SplitSpec, what: str):
    ids = sorted(set(ids))
    if explicit is not None:
        test = sorted(set(explicit))
        unknown = set(test) - set(ids)
        if unknown:
            raise SplitError(f"held-out {what} ids not in the response table: {sorted(unknown)}")
        rest = [x for x in ids if x not in set(test)]
        train, val = _divide_rest(rest, spec.ratios, np.random.default_rng(spec.seed))
        return train, val, test
    if len(ids) < MIN_BLIND_IDS:
        raise SplitError(f"{spec.mode} split needs at least {MIN_BLIND_IDS} distinct {what} ids, found {len(ids)}")
    if spec.fixed_test:
        test = _pick_test(ids, spec.ratios, np.random.default_rng(spec.test_seed))
        rest = [x for x in ids if x not in set(test)]
        train, val = _divide_rest(rest, spec.ratios, np.random.default_rng(spec.seed))
        return train, val, test
    rng = np.random.default_rng(spec.seed)
    n_train, n_val, _ = _sizes(len(ids), spec.ratios)
    order = rng.permutation(len(ids))
    train = sorted(ids[i] for i in order[:n_train])
    val = sorted(ids[i] for i in order[n_train:n_train + n_val])
    test = sorted(ids[i] for i in order[n_train + n_val:])
    return train, val, test


def make_split(responses: ResponseTable, spec: SplitSpec) -> Split:
    """Partition pair indices of ``responses`` according to ``spec``."""
    n = len(responses)
    if n == 0:
        raise SplitError("cannot split an empty response table")
    if spec.mode == "random":
        if spec.fixed_test:
            all_idx = np.arange(n)
            n_test = _sizes(n, spec.ratios)[2]
            test = np.sort(np.random.default_rng(spec.test_seed).permutation(n)[:n_test])
            rest = np.setdiff1d(all_idx, test)
            r_train, r_val = spec.ratios[0], spec.ratios[1]
            n_val = int(round(len(rest) * r_val / (r_train + r_val)))
            order = np.random.default_rng(spec.seed).permutation(len(rest))
            val = np.sort(rest[order[:n_val]])
            train = np.sort(rest[order[n_val:]])
        else:
            n_train, n_val, _ = _sizes(n, spec.ratios)
            order = np.random.default_rng(spec.seed).permutation(n)
            train = np.sort(order[:n_train])
            val = np.sort(order[n_train:n_train + n_val])
            test = np.sort(order[n_train + n_val:])
        return Split("random", train, val, test)

    cells, drugs = responses.cell_ids, responses.drug_ids
    side_of_cell: dict[str, str] = {}
    side_of_drug: dict[str, str] = {}
    test_cells: list[str] = []
    test_drugs: list[str] = []
    if spec.mode in ("cell_blind", "disjoint"):
        tr, va, te = _partition_ids(cells, spec.test_cells, spec, "cell")
        side_of_cell = {**{c: "train" for c in tr}, **{c: "val" for c in va}, **{c: "test" for c in te}}
        test_cells = te
    if spec.mode in ("drug_blind", "disjoint"):
        # Drug partition draws from its own stream so it does not mirror cells.
        drug_spec = spec if spec.mode == "drug_blind" else _offset(spec, 7919)
        tr, va, te = _partition_ids(drugs, spec.test_drugs, drug_spec, "drug")
        side_of_drug = {**{d: "train" for d in tr}, **{d: "val" for d in va}, **{d: "test" for d in te}}
        test_drugs = te

    parts: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    dropped = 0
    for i, (c, d) in enumerate(zip(cells, drugs)):
        if spec.mode == "cell_blind":
            parts[side_of_cell[c]].append(i)
        elif spec.mode == "drug_blind":
            parts[side_of_drug[d]].append(i)
        elif side_of_cell[c] == side_of_drug[d]:
            parts[side_of_cell[c]].append(i)
        else:
            dropped += 1
    if dropped:
        logger.info("disjoint split dropped %d boundary pairs", dropped)
    as_arr = {k: np.array(v, dtype=int) for k, v in parts.items()}
    return Split(spec.mode, as_arr["train"], as_arr["val"], as_arr["test"], dropped, test_cells, test_drugs)


def _offset(spec: SplitSpec, k: int) -> SplitSpec:
    return SplitSpec(spec.mode, spec.ratios, spec.seed + k, spec.fixed_test, spec.test_seed + k,
                     spec.test_cells, spec.test_drugs)


# --------------------------------------------------------------------------
# metrics


def _check_pair(pred, obs, min_len: int = 2) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float).ravel()
    o = np.asarray(obs, dtype=float).ravel()
    if p.shape != o.shape:
        raise MetricsError(f"length mismatch: {p.size} predictions vs {o.size} observations")
    if p.size < min_len:
        raise MetricsError(f"need at least {min_len} values, got {p.size}")
    return p, o


def metric_rmse(pred, obs) -> float:
    p, o = _check_pair(pred, obs, 1)
    return math.sqrt(float(np.mean((p - o) ** 2)))


def metric_pcc(pred, obs) -> float:
    p, o = _check_pair(pred, obs)
    dp, do = p - p.mean(), o - o.mean()
    sp, so = math.sqrt(float(dp @ dp)), math.sqrt(float(do @ do))
    if sp == 0.0 or so == 0.0:
        raise MetricsError("correlation undefined for a constant vector")
    return float(np.clip((dp @ do) / (sp * so), -1.0, 1.0))


def metric_scc(pred, obs) -> float:
    """Spearman correlation: Pearson on average ranks."""
    p, o = _check_pair(pred, obs)
    return metric_pcc(rankdata(p), rankdata(o))


@dataclass
class GroupPCC:
    id: str
    n: int
    pcc: float | None  # None when fewer than 2 pairs or a constant vector


@dataclass
class Evaluation:
    n: int
    rmse: float
    pcc: float
    scc: float
    per_drug: list[GroupPCC]
    per_cell: list[GroupPCC]

    def metrics(self) -> dict[str, float]:
        return {"rmse": self.rmse, "pcc": self.pcc, "scc": self.scc}


def _group_pcc(keys: Sequence[str], pred: np.ndarray, obs: np.ndarray) -> list[GroupPCC]:
    groups: dict[str, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    out = []
    for k in sorted(groups):
        idx = groups[k]
        try:
            r = metric_pcc(pred[idx], obs[idx])
        except MetricsError:
            r = None
        out.append(GroupPCC(k, len(idx), r))
    return out


def evaluate_predictions(responses: ResponseTable, pred: np.ndarray) -> Evaluation:
    if len(responses) == 0:
        raise MetricsError("cannot evaluate an empty set")
    obs = responses.ln_ic50
    return Evaluation(
        n=len(responses),
        rmse=metric_rmse(pred, obs),
        pcc=metric_pcc(pred, obs),
        scc=metric_scc(pred, obs),
        per_drug=_group_pcc(responses.drug_ids, pred, obs),
        per_cell=_group_pcc(responses.cell_ids, pred, obs),
    )


@dataclass
class MetricsReport:
    """Per-run metrics plus mean and sample std (std needs at least 2 runs)."""

    runs: list[dict[str, float]]

    def mean(self) -> dict[str, float]:
        return {k: float(np.mean([r[k] for r in self.runs])) for k in ("rmse", "pcc", "scc")}

    def std(self) -> dict[str, float] | None:
        if len(self.runs) < 2:
            return None
        return {k: float(np.std([r[k] for r in self.runs], ddof=1)) for k in ("rmse", "pcc", "scc")}

    def to_dict(self) -> dict:
        return {"runs": self.runs, "mean": self.mean(), "std": self.std()}


# --------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in sorted(params):
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class RunConfig:
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    d_a: int = 32
    d: int | None = None
    lambda_init: float = 0.5
    patience: int = 20
    seed: int = 0
    layer_norm: bool = False

    def __post_init__(self) -> None:
        for name in ("learning_rate", "epochs", "batch_size", "d_a", "patience"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.d is not None and self.d < 1:
            raise ValueError("d must be positive")
        if not 0.0 <= self.lambda_init <= 0.99:
            raise ValueError("lambda_init must lie in [0, 0.99]")

    def model_config(self, data: Dataset) -> ModelConfig:
        return ModelConfig(
            n_pathways=data.n_pathways,
            max_genes=data.max_genes,
            embed_dim=data.embed_dim,
            d_a=self.d_a,
            d=self.d,
            lambda_init=self.lambda_init,
            layer_norm=self.layer_norm,
        )


@dataclass
class TrainResult:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    history: list[dict]
    best_epoch: int
    split: Split

    @property
    def initial_train_loss(self) -> float:
        return self.history[0]["train_loss"]


INFERENCE_CHUNK = 256


def _batch_for(data: Dataset, idx: Sequence[int]) -> Batch:
    r = data.responses
    return make_batch([(r.cell_ids[i], r.drug_ids[i]) for i in idx], data.cell_inputs, data.drug_inputs)


def predict_pairs(params, cfg: ModelConfig, data: Dataset, idx: Sequence[int] | None = None,
                  *, attention: bool = False) -> tuple[np.ndarray, list[AttentionRecord]]:
    """Inference over response rows ``idx`` (all rows by default)."""
    if idx is None:
        idx = range(len(data.responses))
    idx = list(idx)
    p = const_params(params)
    preds, records = [], []
    for start in range(0, len(idx), INFERENCE_CHUNK):
        batch = _batch_for(data, idx[start:start + INFERENCE_CHUNK])
        out = forward_batch(p, cfg, batch)
        preds.append(out.y.data[:, 0])
        if attention:
            records.extend(out.record(b, batch) for b in range(batch.size))
    return (np.concatenate(preds) if preds else np.zeros(0)), records


def _mse_on(params, cfg, data, idx) -> float:
    pred, _ = predict_pairs(params, cfg, data, idx)
    return float(np.mean((pred - data.responses.ln_ic50[idx]) ** 2))


def train(
    data: Dataset,
    config: RunConfig,
    split: SplitSpec | Split,
    *,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam on MSE with early stopping on validation RMSE.

    Returns the parameters of the best validation epoch (the last epoch
    when the validation part is empty).
    """
    if isinstance(split, SplitSpec):
        split = make_split(data.responses, split)
    if len(split.train) == 0:
        raise TrainingError("training split is empty")
    cfg = config.model_config(data)
    params = init_params(cfg, config.seed)
    opt = Adam(config.learning_rate)
    rng = np.random.default_rng([config.seed, SEED_OFFSET_BATCHES])
    y_all = data.responses.ln_ic50
    has_val = len(split.val) > 0

    def val_rmse() -> float | None:
        return math.sqrt(_mse_on(params, cfg, data, split.val)) if has_val else None

    history = [{"epoch": 0, "train_loss": _mse_on(params, cfg, data, split.train), "val_rmse": val_rmse()}]
    best = {k: v.copy() for k, v in params.items()}
    best_score = history[0]["val_rmse"] if has_val else math.inf
    best_epoch, stale = 0, 0
    for epoch in range(1, config.epochs + 1):
        order = split.train[rng.permutation(len(split.train))]
        total = 0.0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = order[start:start + config.batch_size]
            try:
                tape = Tape()
                out = forward_batch(tape_params(tape, params), cfg, _batch_for(data, batch))
                loss = ad.mse(out.y, ad.constant(y_all[batch].reshape(-1, 1)))
                grads = ad.backward(loss)
            except NonFiniteError as err:
                pairs = [(data.responses.cell_ids[i], data.responses.drug_ids[i]) for i in batch[:3]]
                raise TrainingError(
                    f"non-finite value in epoch {epoch}, batch {b} (first pairs {pairs}): {err}"
                ) from err
            total += loss.item() * len(batch)
            opt.step(params, grads)
        entry = {"epoch": epoch, "train_loss": total / len(order), "val_rmse": val_rmse()}
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        score = entry["val_rmse"] if has_val else -epoch
        if score < best_score:
            best_score, best_epoch, stale = score, epoch, 0
            best = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    return TrainResult(cfg, best, history, best_epoch, split)


def evaluate(params, cfg: ModelConfig, data: Dataset, idx: Sequence[int]) -> Evaluation:
    idx = list(idx)
    if not idx:
        raise MetricsError("cannot evaluate an empty set")
    pred, _ = predict_pairs(params, cfg, data, idx)
    return evaluate_predictions(data.responses.subset(idx), pred)


# --------------------------------------------------------------------------
# reports


def environment_stamp() -> dict[str, str]:
    return {
        "dispa": dispa.__version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def _finite_or_none(x):
    return None if x is None or not math.isfinite(x) else x


def run_report(config: RunConfig, spec: SplitSpec, result: TrainResult,
               evals: dict[str, Evaluation]) -> dict:
    """JSON-ready record of one run. Contains no timestamps, so identical
    inputs and seeds give identical reports."""
    return {
        "config": asdict(config),
        "model_config": asdict(result.model_config),
        "config_hash": result.model_config.config_hash(),
        "split": {**asdict(spec), "ratios": list(spec.ratios), "sizes": result.split.sizes(),
                  "test_cells": result.split.test_cells, "test_drugs": result.split.test_drugs},
        "history": [{k: _finite_or_none(v) if isinstance(v, float) else v for k, v in h.items()}
                    for h in result.history],
        "best_epoch": result.best_epoch,
        "metrics": {name: ev.metrics() for name, ev in evals.items()},
        "per_drug_pcc": {name: [asdict(g) for g in ev.per_drug] for name, ev in evals.items()},
        "per_cell_pcc": {name: [asdict(g) for g in ev.per_cell] for name, ev in evals.items()},
        "environment": environment_stamp(),
    }


def checkpoint_path(root: str | Path, name: str, split_mode: str, seed: int) -> Path:
    return Path(root) / "runs" / name / split_mode / f"seed{seed}" / "best.ckpt"
