"""DiSPA network: modality encoders, dual-view differential cross-attention,
mean pooling and an MLP regression head.

Parameters live in a flat ``name -> ndarray`` dict. A forward pass reads them
either as tape-registered tensors (training) or as constants (inference).
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from dispa import autodiff as ad
from dispa.autodiff import Tape, Tensor

CHECKPOINT_FORMAT = "dispa-ckpt-1"
LAMBDA_BOUNDS = (0.0, 0.99)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_pathways: int
    max_genes: int
    embed_dim: int
    d_a: int = 32
    d: int | None = None  # attention output width; defaults to d_a
    lambda_init: float = 0.5
    head_hidden: int | None = None  # defaults to d
    layer_norm: bool = False
    heads: int = 1
    layers: int = 1
    dropout: float = 0.0

    def __post_init__(self) -> None:
        for name in ("n_pathways", "max_genes", "embed_dim", "d_a"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.heads != 1 or self.layers != 1:
            raise ModelError("only a single attention layer with a single head is implemented")
        if self.dropout != 0.0:
            raise ModelError("dropout is not implemented; leave it at 0")

    @property
    def attn_dim(self) -> int:
        return self.d if self.d is not None else self.d_a

    @property
    def hidden(self) -> int:
        return self.head_hidden if self.head_hidden is not None else self.attn_dim

    @property
    def concat_dim(self) -> int:
        return 2 * self.attn_dim + self.d_a

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AttentionComponents:
    first: np.ndarray   # softmax(Q1 K1^T / sqrt d)
    second: np.ndarray  # softmax(Q2 K2^T / sqrt d)
    lam: float

    @property
    def net(self) -> np.ndarray:
        return self.first - self.lam * self.second


@dataclass
class AttentionRecord:
    cell_id: str
    drug_id: str
    path2sub_net: np.ndarray         # N_p x N_s
    path2sub_components: tuple[np.ndarray, np.ndarray]
    drug2path_net: np.ndarray        # N_p
    drug2path_components: tuple[np.ndarray, np.ndarray]
    lambda_path2sub: float
    lambda_drug2path: float

    def to_dict(self) -> dict:
        return {
            "cell_id": self.cell_id,
            "drug_id": self.drug_id,
            "lambda_path2sub": self.lambda_path2sub,
            "lambda_drug2path": self.lambda_drug2path,
            "path2sub_net": self.path2sub_net.tolist(),
            "path2sub_first": self.path2sub_components[0].tolist(),
            "path2sub_second": self.path2sub_components[1].tolist(),
            "drug2path_net": self.drug2path_net.tolist(),
            "drug2path_first": self.drug2path_components[0].tolist(),
            "drug2path_second": self.drug2path_components[1].tolist(),
        }


# --------------------------------------------------------------------------
# parameters


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    shapes: dict[str, tuple[int, int]] = {}
    inputs = {"path": cfg.max_genes, "drug": cfg.embed_dim, "sub": cfg.embed_dim}
    for m, n_in in inputs.items():
        shapes[f"enc.{m}.W1"] = (n_in, cfg.d_a)
        shapes[f"enc.{m}.b1"] = (1, cfg.d_a)
        shapes[f"enc.{m}.W2"] = (cfg.d_a, cfg.d_a)
        shapes[f"enc.{m}.b2"] = (1, cfg.d_a)
    d = cfg.attn_dim
    for view in ("p2s", "d2p"):
        for w in ("W_Q", "W_K", "W_V"):
            shapes[f"{view}.{w}"] = (cfg.d_a, 2 * d)
        for v in ("lq1", "lk1", "lq2", "lk2"):
            shapes[f"{view}.{v}"] = (1, d)
    shapes["head.W1"] = (cfg.concat_dim, cfg.hidden)
    shapes["head.b1"] = (1, cfg.hidden)
    shapes["head.W2"] = (cfg.hidden, 1)
    shapes["head.b2"] = (1, 1)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, small normal lambda vectors."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("b"):
            params[name] = np.zeros(shape)
        elif leaf.startswith("l"):
            params[name] = rng.normal(0.0, 0.1, size=shape)
        else:
            params[name] = _glorot(rng, *shape)
    return params


# --------------------------------------------------------------------------
# forward pieces


def _ffn(x: Tensor, p: Mapping[str, Tensor], prefix: str, layer_norm: bool) -> Tensor:
    h = ad.relu(x @ p[f"{prefix}.W1"] + p[f"{prefix}.b1"])
    out = h @ p[f"{prefix}.W2"] + p[f"{prefix}.b2"]
    return ad.layer_norm_rows(out) if layer_norm else out


def encode_features(E_path, E_drug, E_sub, p: Mapping[str, Tensor], cfg: ModelConfig):
    """Row-wise modality FFNs: (N_p, N_g), (1, d_e), (N_s, d_e) -> (., d_a)."""
    E_path, E_drug, E_sub = _as_tensor(E_path), _as_tensor(E_drug), _as_tensor(E_sub)
    if E_path.shape[1] != cfg.max_genes:
        raise ModelError(f"pathway input width {E_path.shape[1]} != N_g {cfg.max_genes}")
    if E_drug.shape != (1, cfg.embed_dim):
        raise ModelError(f"drug embedding shape {E_drug.shape} != (1, {cfg.embed_dim})")
    if E_sub.shape[1] != cfg.embed_dim or E_sub.shape[0] < 1:
        raise ModelError(f"substructure embedding shape {E_sub.shape} invalid")
    return (
        _ffn(E_path, p, "enc.path", cfg.layer_norm),
        _ffn(E_drug, p, "enc.drug", cfg.layer_norm),
        _ffn(E_sub, p, "enc.sub", cfg.layer_norm),
    )


def suppression_lambda(p: Mapping[str, Tensor], view: str, lambda_init: float) -> Tensor:
    """exp(lq1 . lk1) - exp(lq2 . lk2) + lambda_init, clamped to [0, 0.99]."""
    a = ad.exp(p[f"{view}.lq1"] @ p[f"{view}.lk1"].T)
    b = ad.exp(p[f"{view}.lq2"] @ p[f"{view}.lk2"].T)
    raw = ad.add(ad.sub(a, b), ad.constant(lambda_init))
    return ad.clamp(raw, *LAMBDA_BOUNDS)


def diff_attention(
    q_in,
    k_in,
    v_in,
    p: Mapping[str, Tensor],
    view: str,
    cfg: ModelConfig,
    *,
    lam: float | None = None,
) -> tuple[Tensor, AttentionComponents]:
    """(softmax(Q1 K1^T/sqrt d) - lambda softmax(Q2 K2^T/sqrt d)) V, V halves summed.

    ``lam`` overrides the learned suppression coefficient (e.g. 0 to recover
    plain single-softmax attention).
    """
    q_in, k_in, v_in = _as_tensor(q_in), _as_tensor(k_in), _as_tensor(v_in)
    if q_in.shape[0] < 1 or k_in.shape[0] < 1 or k_in.shape[0] != v_in.shape[0]:
        raise ModelError(f"bad attention shapes Q{q_in.shape} K{k_in.shape} V{v_in.shape}")
    if q_in.shape[1] != cfg.d_a or k_in.shape[1] != cfg.d_a or v_in.shape[1] != cfg.d_a:
        raise ModelError("attention inputs must have width d_a")
    lam_t = ad.constant(lam) if lam is not None else suppression_lambda(p, view, cfg.lambda_init)
    out, s1, s2 = ad.diff_softmax_attention(
        q_in @ p[f"{view}.W_Q"], k_in @ p[f"{view}.W_K"], v_in @ p[f"{view}.W_V"], lam_t,
        1.0 / math.sqrt(cfg.attn_dim),
    )
    return out, AttentionComponents(s1, s2, lam_t.item())


def path2sub(H_path, H_sub, p, cfg, *, lam: float | None = None):
    """Pathways query substructures: output (N_p, d)."""
    return diff_attention(H_path, H_sub, H_sub, p, "p2s", cfg, lam=lam)


def drug2path(H_drug, H_path, p, cfg, *, lam: float | None = None):
    """The drug queries pathways: output (1, d)."""
    return diff_attention(H_drug, H_path, H_path, p, "d2p", cfg, lam=lam)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.constant(x)


# --------------------------------------------------------------------------
# batched forward


@dataclass
class Batch:
    """Inputs for a set of (cell, drug) pairs, each cell and drug stored once.

    Substructure rows are stored unpadded; attention sees them laid out in
    blocks of the largest N_s via ``sub_slots``, with ``sub_mask`` marking the
    real slots (padding slots repeat a real row and get zero weight).
    """

    cell_ids: list[str]
    drug_ids: list[str]
    E_path: np.ndarray       # (U_c * N_p, N_g)
    E_drug: np.ndarray       # (U_d, d_e)
    E_sub: np.ndarray        # (sum N_s, d_e)
    sub_owner: np.ndarray    # (sum N_s,) drug position of each row
    sub_slots: np.ndarray    # (U_d * S,) row of E_sub shown in each slot
    sub_mask: np.ndarray     # (U_d, S) bool
    cell_index: np.ndarray   # (B,) into cell_ids
    drug_index: np.ndarray   # (B,) into drug_ids

    @property
    def size(self) -> int:
        return len(self.cell_index)

    @property
    def max_subs(self) -> int:
        return self.sub_mask.shape[1]


def make_batch(pairs, cell_inputs: Mapping[str, np.ndarray],
               drug_inputs: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> Batch:
    """Collect inputs for ``pairs`` of (cell_id, drug_id); ids keep first-seen order."""
    cells: dict[str, int] = {}
    drugs: dict[str, int] = {}
    ci, di = [], []
    for c, d in pairs:
        if c not in cell_inputs:
            raise ModelError(f"unknown cell id {c!r}")
        if d not in drug_inputs:
            raise ModelError(f"unknown drug id {d!r}")
        ci.append(cells.setdefault(c, len(cells)))
        di.append(drugs.setdefault(d, len(drugs)))
    if not ci:
        raise ModelError("empty batch")
    subs = [np.atleast_2d(np.asarray(drug_inputs[d][1], dtype=float)) for d in drugs]
    if any(m.shape[0] < 1 for m in subs):
        raise ModelError("a drug needs at least one substructure")
    width = max(m.shape[0] for m in subs)
    mask = np.zeros((len(drugs), width), dtype=bool)
    slots = np.zeros((len(drugs), width), dtype=int)
    owner = []
    first = 0
    for j, m in enumerate(subs):
        n = m.shape[0]
        mask[j, :n] = True
        slots[j, :n] = np.arange(first, first + n)
        slots[j, n:] = first
        owner += [j] * n
        first += n
    return Batch(
        cell_ids=list(cells),
        drug_ids=list(drugs),
        E_path=np.concatenate([np.asarray(cell_inputs[c], dtype=float) for c in cells], axis=0),
        E_drug=np.concatenate([np.asarray(drug_inputs[d][0], dtype=float).reshape(1, -1) for d in drugs], axis=0),
        E_sub=np.concatenate(subs, axis=0),
        sub_owner=np.array(owner, dtype=int),
        sub_slots=slots.ravel(),
        sub_mask=mask,
        cell_index=np.array(ci, dtype=int),
        drug_index=np.array(di, dtype=int),
    )


@dataclass
class BatchOutput:
    y: Tensor                      # (B, 1)
    path2sub_maps: tuple[np.ndarray, np.ndarray]  # (B, N_p, S) softmax components
    drug2path_maps: tuple[np.ndarray, np.ndarray]  # (B, 1, N_p)
    lambda_path2sub: float
    lambda_drug2path: float

    def record(self, b: int, batch: Batch) -> AttentionRecord:
        n_s = int(batch.sub_mask[batch.drug_index[b]].sum())
        ps = (self.path2sub_maps[0][b, :, :n_s], self.path2sub_maps[1][b, :, :n_s])
        dp = (self.drug2path_maps[0][b, 0], self.drug2path_maps[1][b, 0])
        return make_record(
            batch.cell_ids[batch.cell_index[b]],
            batch.drug_ids[batch.drug_index[b]],
            AttentionComponents(ps[0], ps[1], self.lambda_path2sub),
            AttentionComponents(dp[0][None, :], dp[1][None, :], self.lambda_drug2path),
        )


def forward_batch(p: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch) -> BatchOutput:
    """Predictions for every pair in ``batch``.

    Per-pair steps: Path2Sub with the cell's pathways as queries over the
    drug's substructures, Drug2Path with the drug as the single query over the
    cell's pathways, then [mean-pooled Path2Sub, Drug2Path, mean substructure
    encoding] through the MLP head.
    """
    n_p, S = cfg.n_pathways, batch.max_subs
    if batch.E_path.shape[1] != cfg.max_genes or batch.E_path.shape[0] != len(batch.cell_ids) * n_p:
        raise ModelError(f"pathway inputs must be ({n_p}, {cfg.max_genes}) per cell")
    if batch.E_drug.shape[1] != cfg.embed_dim or batch.E_sub.shape[1] != cfg.embed_dim:
        raise ModelError(f"drug embeddings must have dimension {cfg.embed_dim}")
    d = cfg.attn_dim
    H_path = _ffn(ad.constant(batch.E_path), p, "enc.path", cfg.layer_norm)
    H_drug = _ffn(ad.constant(batch.E_drug), p, "enc.drug", cfg.layer_norm)
    H_sub = _ffn(ad.constant(batch.E_sub), p, "enc.sub", cfg.layer_norm)

    counts = batch.sub_mask.sum(axis=1)
    pool = np.zeros((len(batch.drug_ids), batch.E_sub.shape[0]))
    pool[batch.sub_owner, np.arange(batch.E_sub.shape[0])] = 1.0 / counts[batch.sub_owner]
    sub_mean = ad.constant(pool) @ H_sub
    H_slots = ad.take_rows(H_sub, batch.sub_slots)

    lam_ps = suppression_lambda(p, "p2s", cfg.lambda_init)
    lam_dp = suppression_lambda(p, "d2p", cfg.lambda_init)
    scale = 1.0 / math.sqrt(d)
    h_ps, ps1, ps2 = ad.batched_diff_attention(
        H_path @ p["p2s.W_Q"], H_slots @ p["p2s.W_K"], H_slots @ p["p2s.W_V"], lam_ps,
        q_rows=n_p, k_rows=S, q_index=batch.cell_index, k_index=batch.drug_index,
        k_mask=batch.sub_mask, temperature=scale,
    )
    h_dp, dp1, dp2 = ad.batched_diff_attention(
        H_drug @ p["d2p.W_Q"], H_path @ p["d2p.W_K"], H_path @ p["d2p.W_V"], lam_dp,
        q_rows=1, k_rows=n_p, q_index=batch.drug_index, k_index=batch.cell_index,
        k_mask=np.ones((len(batch.cell_ids), n_p), dtype=bool), temperature=scale,
    )
    z = ad.concat_cols([h_ps, h_dp, ad.take_rows(sub_mean, batch.drug_index)])
    hidden = ad.relu(z @ p["head.W1"] + p["head.b1"])
    y = hidden @ p["head.W2"] + p["head.b2"]
    return BatchOutput(y, (ps1, ps2), (dp1, dp2), lam_ps.item(), lam_dp.item())


def tape_params(tape: Tape, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: tape.param(k, v) for k, v in params.items()}


def const_params(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: ad.constant(v) for k, v in params.items()}


def _single_batch(E_path, E_drug, E_sub, cell_id: str, drug_id: str) -> Batch:
    E_path = np.atleast_2d(np.asarray(E_path, dtype=float))
    E_drug = np.asarray(E_drug, dtype=float).reshape(1, -1)
    E_sub = np.atleast_2d(np.asarray(E_sub, dtype=float))
    return make_batch([(cell_id, drug_id)], {cell_id: E_path}, {drug_id: (E_drug, E_sub)})


def predict(
    params: Mapping[str, np.ndarray] | Mapping[str, Tensor],
    E_path,
    E_drug,
    E_sub,
    cfg: ModelConfig,
    *,
    cell_id: str = "",
    drug_id: str = "",
) -> tuple[float, AttentionRecord]:
    """Predicted ln(IC50) for one (cell, drug) pair and its attention maps."""
    p = params if all(isinstance(v, Tensor) for v in params.values()) else const_params(params)
    batch = _single_batch(E_path, E_drug, E_sub, cell_id, drug_id)
    out = forward_batch(p, cfg, batch)
    return out.y.item(), out.record(0, batch)


def make_record(cell_id: str, drug_id: str, comp_ps: AttentionComponents,
                comp_dp: AttentionComponents) -> AttentionRecord:
    return AttentionRecord(
        cell_id=cell_id,
        drug_id=drug_id,
        path2sub_net=comp_ps.net,
        path2sub_components=(comp_ps.first, comp_ps.second),
        drug2path_net=comp_dp.net[0],
        drug2path_components=(comp_dp.first[0], comp_dp.second[0]),
        lambda_path2sub=comp_ps.lam,
        lambda_drug2path=comp_dp.lam,
    )


def predict_tensor(p: Mapping[str, Tensor], E_path, E_drug, E_sub, cfg: ModelConfig) -> Tensor:
    """Differentiable variant of :func:`predict` returning the (1, 1) output."""
    return forward_batch(p, cfg, _single_batch(E_path, E_drug, E_sub, "", "")).y


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, cfg: ModelConfig, params: Mapping[str, np.ndarray],
                    extra: Mapping | None = None) -> None:
    """Write an ``.npz`` bundle: one array per parameter plus a JSON manifest."""
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(cfg),
        "config_hash": cfg.config_hash(),
        "shapes": {k: list(v.shape) for k, v in sorted(params.items())},
        **(dict(extra) if extra else {}),
    }
    arrays = {f"param:{k}": np.asarray(v, dtype=np.float64) for k, v in sorted(params.items())}
    arrays["manifest"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    # Fixed entry timestamps keep the file byte-identical across runs.
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, arr, allow_pickle=False)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        manifest = json.loads(bytes(z["manifest"]).decode())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ModelError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
        params = {k[len("param:"):]: z[k].copy() for k in z.files if k.startswith("param:")}
    cfg = ModelConfig(**manifest["config"])
    if cfg.config_hash() != manifest["config_hash"]:
        raise ModelError(f"{path}: config hash mismatch")
    expected = parameter_shapes(cfg)
    for k, shape in expected.items():
        if k not in params or params[k].shape != shape:
            raise ModelError(f"{path}: parameter {k} missing or mis-shaped")
    return cfg, params, manifest
