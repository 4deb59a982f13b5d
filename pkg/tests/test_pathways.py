from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dispa.pathways import (
    DataError,
    ExpressionMatrix,
    NormStats,
    PathwayDB,
    PathwayIndexer,
    build_pathway_tensor,
    compute_norm_stats,
    load_expression,
    load_pathways,
    load_responses,
    zscore_normalize,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoaders:
    def test_expression_well_formed(self, tmp_path):
        m = load_expression(write(tmp_path, "e.csv", "cell_id,g1,g2\nc1,1,2\nc2,3,4\n"))
        assert m.cell_ids == ["c1", "c2"] and m.gene_ids == ["g1", "g2"]
        assert m.values.tolist() == [[1, 2], [3, 4]]

    def test_duplicate_gene_named(self, tmp_path):
        with pytest.raises(DataError, match="g1"):
            load_expression(write(tmp_path, "e.csv", "cell_id,g1,g1\nc1,1,2\n"))

    def test_na_cell_located(self, tmp_path):
        with pytest.raises(DataError, match="row 3.*col(umn)? 3|3.*3"):
            load_expression(write(tmp_path, "e.csv", "cell_id,g1,g2\nc1,1,2\nc2,3,NA\n"))

    def test_ragged_row(self, tmp_path):
        with pytest.raises(DataError, match="row 2"):
            load_expression(write(tmp_path, "e.csv", "cell_id,g1,g2\nc1,1\n"))

    def test_duplicate_cell(self, tmp_path):
        with pytest.raises(DataError, match="c1"):
            load_expression(write(tmp_path, "e.csv", "cell_id,g1\nc1,1\nc1,2\n"))

    def test_gmt(self, tmp_path):
        db = load_pathways(write(tmp_path, "p.gmt", "P1\tdesc\tg1\tg2\nP2\t\tg1\tg3\tg4\n"))
        assert db.pathways[0] == ("P1", ["g1", "g2"])
        assert (db.n_pathways, db.max_genes) == (2, 3)

    def test_gmt_duplicate_id(self, tmp_path):
        with pytest.raises(DataError, match="duplicate"):
            load_pathways(write(tmp_path, "p.gmt", "P1\td\tg1\nP1\td\tg2\n"))

    def test_gmt_empty_line(self, tmp_path):
        with pytest.raises(DataError, match="empty pathway"):
            load_pathways(write(tmp_path, "p.gmt", "P1\tdesc\n"))

    def test_responses(self, tmp_path):
        r = load_responses(write(tmp_path, "r.csv", "cell_id,drug_id,ln_ic50\nc1,d1,1.0\nc1,d2,2\nc2,d1,-1\n"))
        assert len(r) == 3

    def test_responses_duplicate_equal_kept_once(self, tmp_path):
        r = load_responses(write(tmp_path, "r.csv", "cell_id,drug_id,ln_ic50\nc1,d1,1.0\nc1,d1,1.0\n"))
        assert len(r) == 1

    def test_responses_conflict(self, tmp_path):
        with pytest.raises(DataError, match="conflicting"):
            load_responses(write(tmp_path, "r.csv", "cell_id,drug_id,ln_ic50\nc1,d1,1.0\nc1,d1,2.0\n"))


class TestNormalization:
    def test_population_std(self):
        m = ExpressionMatrix(["a", "b", "c"], ["g"], np.array([[1.0], [2.0], [3.0]]))
        z = zscore_normalize(m)
        np.testing.assert_allclose(z.values[:, 0], [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)

    def test_constant_column(self):
        m = ExpressionMatrix(["a", "b", "c"], ["g"], np.array([[5.0], [5.0], [5.0]]))
        assert zscore_normalize(m).values[:, 0].tolist() == [0.0, 0.0, 0.0]

    def test_needs_two_cells(self):
        with pytest.raises(DataError):
            zscore_normalize(ExpressionMatrix(["a"], ["g"], np.array([[1.0]])))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (6, 3), elements=st.floats(-100, 100)))
    def test_standardized_input_unchanged(self, x):
        m = ExpressionMatrix([f"c{i}" for i in range(6)], ["g1", "g2", "g3"], x)
        z = zscore_normalize(m)
        again = zscore_normalize(ExpressionMatrix(z.cell_ids, z.gene_ids, z.values.copy()))
        np.testing.assert_allclose(again.values, z.values, atol=1e-9)

    def test_transfer_uses_stored_statistics(self):
        train = ExpressionMatrix(["a", "b"], ["g1", "g2"], np.array([[0.0, 10.0], [2.0, 30.0]]))
        stats = compute_norm_stats(train)
        new = ExpressionMatrix(["s1", "s2"], ["g2", "g9"], np.array([[20.0, 3.0], [40.0, 4.0]]))
        z = zscore_normalize(new, stats)
        assert z.values[:, 0].tolist() == [0.0, 2.0]  # (x - 20) / 10, not the new matrix's own stats
        assert z.values[:, 1].tolist() == [0.0, 0.0]  # gene without stats

    def test_stats_round_trip(self, tmp_path):
        s = NormStats(["g1", "g2"], np.array([0.1, 1 / 3]), np.array([2.0, 0.7]))
        s.save(tmp_path / "s.csv")
        back = NormStats.load(tmp_path / "s.csv")
        assert back.gene_ids == s.gene_ids
        assert back.mean.tolist() == s.mean.tolist() and back.std.tolist() == s.std.tolist()


class TestPathwayTensor:
    def _matrix(self):
        return ExpressionMatrix(["c"], ["g1", "g2", "g3"], np.array([[0.5, -0.5, 2.0]]), normalized=True)

    def test_zero_fill(self):
        db = PathwayDB([("P1", ["g1", "g2"]), ("P2", ["g1", "g2", "g3"])])
        t = build_pathway_tensor(self._matrix(), db, "c")
        assert t.matrix.shape == (2, 3)
        assert t.matrix[0].tolist() == [0.5, -0.5, 0.0]

    def test_missing_gene_slot_zero(self, caplog):
        db = PathwayDB([("P1", ["g1", "gX", "g3"])])
        t = build_pathway_tensor(self._matrix(), db, "c")
        assert t.matrix[0].tolist() == [0.5, 0.0, 2.0]
        assert "absent" in caplog.text

    def test_unknown_cell(self):
        db = PathwayDB([("P1", ["g1"])])
        with pytest.raises(KeyError):
            build_pathway_tensor(self._matrix(), db, "nope")

    def test_requires_normalized(self):
        m = ExpressionMatrix(["c"], ["g1"], np.array([[1.0]]))
        with pytest.raises(DataError):
            build_pathway_tensor(m, PathwayDB([("P1", ["g1"])]), "c")

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=1, max_size=5), st.integers(0, 2**32 - 1))
    def test_zero_mask(self, sizes, seed):
        rng = np.random.default_rng(seed)
        genes = [f"g{i}" for i in range(8)]
        db = PathwayDB([(f"P{p}", list(rng.choice(genes, size=s, replace=False))) for p, s in enumerate(sizes)])
        m = ExpressionMatrix(["c"], genes, rng.normal(size=(1, 8)), normalized=True)
        t = PathwayIndexer(m, db).tensor(m.values[0])
        for p, (_, members) in enumerate(db.pathways):
            assert np.abs(t[p, len(members):]).sum() == 0.0
            assert t[p, :len(members)].tolist() == [m.values[0, genes.index(g)] for g in members]
