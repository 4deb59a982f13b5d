from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dispa import autodiff as ad
from dispa.autodiff import NonFiniteError
from dispa.model import (
    ModelConfig,
    ModelError,
    const_params,
    diff_attention,
    drug2path,
    encode_features,
    forward_batch,
    init_params,
    load_checkpoint,
    make_batch,
    path2sub,
    predict,
    save_checkpoint,
)


def softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def reference_attention(q_in, k_in, v_in, W_Q, W_K, W_V, d):
    """Plain scaled dot-product attention on the first halves, V halves summed."""
    Q, K, V = q_in @ W_Q[:, :d], k_in @ W_K[:, :d], v_in @ W_V
    return softmax(Q @ K.T / math.sqrt(d)) @ (V[:, :d] + V[:, d:])


def setup(seed=0, n_p=4, n_g=5, d_e=8, d_a=6, d=4, n_s=3):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_pathways=n_p, max_genes=n_g, embed_dim=d_e, d_a=d_a, d=d)
    params = init_params(cfg, seed)
    inputs = (rng.normal(size=(n_p, n_g)), rng.normal(size=(1, d_e)), rng.normal(size=(n_s, d_e)))
    return cfg, params, inputs, rng


class TestConfig:
    def test_single_layer_single_head_only(self):
        with pytest.raises(ModelError):
            ModelConfig(n_pathways=2, max_genes=2, embed_dim=8, heads=2)
        with pytest.raises(ModelError):
            ModelConfig(n_pathways=2, max_genes=2, embed_dim=8, layers=2)

    def test_hash_tracks_fields(self):
        a = ModelConfig(n_pathways=2, max_genes=2, embed_dim=8, d_a=32)
        b = ModelConfig(n_pathways=2, max_genes=2, embed_dim=8, d_a=64)
        assert a.config_hash() != b.config_hash()
        assert a.config_hash() == ModelConfig(n_pathways=2, max_genes=2, embed_dim=8).config_hash()


class TestEncoders:
    def test_shapes(self):
        cfg, params, (E_path, E_drug, E_sub), _ = setup(n_p=3)
        hp, hd, hs = encode_features(E_path, E_drug, E_sub, const_params(params), cfg)
        assert (hp.shape, hd.shape, hs.shape) == ((3, 6), (1, 6), (3, 6))

    def test_zero_weights_give_bias_rows(self):
        cfg, params, (E_path, E_drug, E_sub), _ = setup()
        for k in params:
            if k.startswith("enc.path.W"):
                params[k] = np.zeros_like(params[k])
        params["enc.path.b2"] = np.arange(6, dtype=float).reshape(1, 6)
        hp, _, _ = encode_features(E_path, E_drug, E_sub, const_params(params), cfg)
        assert (hp.data == params["enc.path.b2"]).all()

    def test_row_permutation_equivariance(self):
        cfg, params, (E_path, E_drug, E_sub), rng = setup(n_s=5)
        perm = rng.permutation(5)
        p = const_params(params)
        _, _, a = encode_features(E_path, E_drug, E_sub, p, cfg)
        _, _, b = encode_features(E_path, E_drug, E_sub[perm], p, cfg)
        np.testing.assert_array_equal(a.data[perm], b.data)

    def test_dim_mismatch(self):
        cfg, params, (E_path, E_drug, E_sub), _ = setup()
        with pytest.raises(ModelError):
            encode_features(E_path[:, :3], E_drug, E_sub, const_params(params), cfg)


class TestDiffAttention:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 7), st.integers(1, 6), st.integers(1, 5), st.integers(0, 10**6))
    def test_lambda_zero_is_standard_attention(self, n_q, n_k, d_a, d, seed):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(n_pathways=1, max_genes=1, embed_dim=8, d_a=d_a, d=d)
        params = init_params(cfg, seed)
        q, k, v = rng.normal(size=(n_q, d_a)), rng.normal(size=(n_k, d_a)), rng.normal(size=(n_k, d_a))
        out, comp = diff_attention(q, k, v, const_params(params), "p2s", cfg, lam=0.0)
        ref = reference_attention(q, k, v, params["p2s.W_Q"], params["p2s.W_K"], params["p2s.W_V"], d)
        assert np.abs(out.data - ref).max() <= 1e-12
        np.testing.assert_allclose(comp.net, comp.first, atol=0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 7), st.integers(0, 10**6), st.floats(0.0, 0.99))
    def test_net_rows_sum(self, n_q, n_k, seed, lam):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(n_pathways=1, max_genes=1, embed_dim=8, d_a=4, d=3)
        p = const_params(init_params(cfg, seed))
        q, k = rng.normal(size=(n_q, 4)), rng.normal(size=(n_k, 4))
        for forced in (lam, None):
            _, comp = diff_attention(q, k, k, p, "p2s", cfg, lam=forced)
            np.testing.assert_allclose(comp.first.sum(axis=1), 1.0, atol=1e-9)
            np.testing.assert_allclose(comp.second.sum(axis=1), 1.0, atol=1e-9)
            np.testing.assert_allclose(comp.net.sum(axis=1), 1.0 - comp.lam, atol=1e-9)
            assert 0.0 <= comp.lam <= 0.99

    def test_single_key(self):
        cfg, params, _, rng = setup()
        p = const_params(params)
        q, k = rng.normal(size=(3, 6)), rng.normal(size=(1, 6))
        out, comp = diff_attention(q, k, k, p, "p2s", cfg)
        V = k @ params["p2s.W_V"]
        expected = (1 - comp.lam) * (V[:, :4] + V[:, 4:])
        np.testing.assert_allclose(out.data, np.repeat(expected, 3, axis=0), atol=1e-12)
        assert (comp.first == 1).all() and (comp.second == 1).all()

    def test_identical_halves(self):
        cfg, params, _, rng = setup()
        for w in ("W_Q", "W_K"):
            params[f"p2s.{w}"][:, 4:] = params[f"p2s.{w}"][:, :4]
        q, k = rng.normal(size=(3, 6)), rng.normal(size=(5, 6))
        _, comp = diff_attention(q, k, k, const_params(params), "p2s", cfg)
        np.testing.assert_allclose(comp.net, (1 - comp.lam) * comp.first, atol=1e-12)
        assert (np.argsort(comp.net, axis=1) == np.argsort(comp.first, axis=1)).all()

    def test_non_finite_lambda(self):
        cfg, params, _, rng = setup()
        q = rng.normal(size=(2, 6))
        with pytest.raises((NonFiniteError, ModelError)):
            diff_attention(q, q, q, const_params(params), "p2s", cfg, lam=float("nan"))

    def test_bad_width(self):
        cfg, params, _, rng = setup()
        with pytest.raises(ModelError):
            diff_attention(rng.normal(size=(2, 5)), rng.normal(size=(2, 6)), rng.normal(size=(2, 6)),
                           const_params(params), "p2s", cfg)


class TestViews:
    def test_path2sub_shape_and_single_fragment(self):
        cfg, params, _, rng = setup()
        p = const_params(params)
        hp, hs = rng.normal(size=(4, 6)), rng.normal(size=(1, 6))
        out, comp = path2sub(hp, hs, p, cfg)
        assert out.shape == (4, 4)
        V = hs @ params["p2s.W_V"]
        np.testing.assert_allclose(out.data, np.repeat((1 - comp.lam) * (V[:, :4] + V[:, 4:]), 4, axis=0),
                                   atol=1e-12)

    def test_duplicate_substructure_splits_mass(self):
        cfg, params, _, rng = setup()
        p = const_params(params)
        hp, hs = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
        _, base = path2sub(hp, hs, p, cfg)
        _, dup = path2sub(hp, np.vstack([hs, hs[1:2]]), p, cfg)
        for b, d in ((base.first, dup.first), (base.second, dup.second)):
            np.testing.assert_allclose(d[:, 1], d[:, 3], atol=1e-15)
            # The two copies together take more than one copy alone, split evenly.
            assert (d[:, 1] + d[:, 3] > b[:, 1]).all()

    def test_drug2path_shape_and_single_pathway(self):
        cfg, params, _, rng = setup()
        p = const_params(params)
        out, comp = drug2path(rng.normal(size=(1, 6)), rng.normal(size=(4, 6)), p, cfg)
        assert out.shape == (1, 4)
        h = rng.normal(size=(1, 6))
        out1, comp1 = drug2path(rng.normal(size=(1, 6)), h, p, cfg)
        V = h @ params["d2p.W_V"]
        np.testing.assert_allclose(out1.data, (1 - comp1.lam) * (V[:, :4] + V[:, 4:]), atol=1e-12)

    def test_drug2path_permutation(self):
        cfg, params, _, rng = setup()
        p = const_params(params)
        hd, hp = rng.normal(size=(1, 6)), rng.normal(size=(6, 6))
        perm = rng.permutation(6)
        a, ca = drug2path(hd, hp, p, cfg)
        b, cb = drug2path(hd, hp[perm], p, cfg)
        np.testing.assert_allclose(cb.net[0], ca.net[0][perm], atol=1e-15)
        np.testing.assert_allclose(a.data, b.data, atol=1e-14)


class TestPredict:
    def test_finite_scalar_and_record(self):
        cfg, params, (E_path, E_drug, E_sub), _ = setup()
        y, rec = predict(params, E_path, E_drug, E_sub, cfg, cell_id="c", drug_id="d")
        assert isinstance(y, float) and math.isfinite(y)
        assert rec.path2sub_net.shape == (4, 3) and rec.drug2path_net.shape == (4,)
        np.testing.assert_allclose(rec.path2sub_components[0].sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(rec.path2sub_net.sum(axis=1), 1 - rec.lambda_path2sub, atol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_substructure_and_pathway_order_invariance(self, seed):
        cfg, params, (E_path, E_drug, E_sub), rng = setup(seed=seed, n_s=5)
        y0, _ = predict(params, E_path, E_drug, E_sub, cfg)
        y1, _ = predict(params, E_path, E_drug, E_sub[rng.permutation(5)], cfg)
        y2, _ = predict(params, E_path[rng.permutation(4)], E_drug, E_sub, cfg)
        assert abs(y0 - y1) < 1e-12 and abs(y0 - y2) < 1e-12

    def test_constant_head(self):
        cfg, params, (E_path, E_drug, E_sub), rng = setup()
        params["head.W1"][:] = 0.0
        params["head.W2"][:] = 0.0
        params["head.b2"][:] = 1.25
        for _ in range(3):
            y, _ = predict(params, rng.normal(size=E_path.shape), E_drug, rng.normal(size=(2, 8)), cfg)
            assert y == 1.25


class TestBatching:
    def test_batch_equals_single_pairs(self):
        cfg, params, _, rng = setup()
        cells = {f"c{i}": rng.normal(size=(4, 5)) for i in range(3)}
        drugs = {f"d{j}": (rng.normal(size=(1, 8)), rng.normal(size=(1 + j, 8))) for j in range(4)}
        pairs = [(c, d) for c in cells for d in drugs][::-1]
        out = forward_batch(const_params(params), cfg, make_batch(pairs, cells, drugs))
        batch = make_batch(pairs, cells, drugs)
        for b, (c, d) in enumerate(pairs):
            y, rec = predict(params, cells[c], *drugs[d], cfg)
            assert abs(out.y.data[b, 0] - y) < 1e-13
            brec = out.record(b, batch)
            np.testing.assert_allclose(brec.path2sub_net, rec.path2sub_net, atol=1e-14)
            assert brec.path2sub_net.shape == (4, drugs[d][1].shape[0])

    def test_unknown_ids(self):
        cfg, params, _, rng = setup()
        with pytest.raises(ModelError, match="unknown cell"):
            make_batch([("x", "d")], {}, {"d": (np.zeros((1, 8)), np.zeros((1, 8)))})


class TestCheckpoint:
    def test_round_trip_and_bytes(self, tmp_path):
        cfg, params, _, _ = setup()
        save_checkpoint(tmp_path / "a.ckpt", cfg, params, {"note": 1})
        save_checkpoint(tmp_path / "b.ckpt", cfg, params, {"note": 1})
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        cfg2, params2, manifest = load_checkpoint(tmp_path / "a.ckpt")
        assert cfg2 == cfg and manifest["note"] == 1
        assert all(params2[k].tobytes() == params[k].tobytes() for k in params)

    def test_tampered_config_rejected(self, tmp_path):
        import json
        import zipfile

        cfg, params, _, _ = setup()
        save_checkpoint(tmp_path / "a.ckpt", cfg, params)
        with np.load(tmp_path / "a.ckpt") as z:
            arrays = {k: z[k] for k in z.files}
        manifest = json.loads(bytes(arrays["manifest"]).decode())
        manifest["config"]["d_a"] = 7
        arrays["manifest"] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
        np.savez(tmp_path / "bad.npz", **arrays)
        with pytest.raises(ModelError, match="hash"):
            load_checkpoint(tmp_path / "bad.npz")
        assert zipfile.is_zipfile(tmp_path / "a.ckpt")
