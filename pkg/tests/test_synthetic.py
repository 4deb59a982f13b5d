from __future__ import annotations

import numpy as np
import pytest

from dispa.chem.brics import fragment
from dispa.chem.smiles import parse_smiles
from dispa.pathways import zscore_normalize
from dispa.synthetic import (
    DRIVER,
    MIDDLES,
    TERMINALS,
    SyntheticConfig,
    block_smiles,
    generate,
    oracle_features,
    oracle_fit_predict,
)
from dispa.training import SplitSpec, make_split, metric_pcc


class TestGenerator:
    def test_block_recovery(self, small_synthetic):
        for drug_id, smiles in small_synthetic.drugs:
            got = sorted(f.smiles for f in fragment(parse_smiles(smiles)))
            assert got == sorted(block_smiles(b) for b in small_synthetic.blocks[drug_id])

    def test_block_strings_distinct(self):
        strings = [block_smiles(b) for b in list(TERMINALS) + list(MIDDLES)]
        assert len(set(strings)) == len(strings)

    def test_shapes_and_driver(self):
        s = generate(SyntheticConfig(seed=0))
        assert len(s.responses) == 50 * 40
        n_driver = sum(DRIVER in b for b in s.blocks.values())
        assert n_driver == 14
        mask = s.sensitive_mask()
        assert mask.any() and all(DRIVER in s.blocks[d] for d in np.array(s.responses.drug_ids)[mask])

    def test_noise_level(self):
        s = generate()
        resid = s.responses.ln_ic50 - s.signal
        assert resid.std() / s.signal.std() == pytest.approx(0.2, rel=0.1)

    def test_deterministic(self):
        a, b = generate(SyntheticConfig(seed=5)), generate(SyntheticConfig(seed=5))
        assert a.responses.ln_ic50.tobytes() == b.responses.ln_ic50.tobytes()
        assert a.drugs == b.drugs

    def test_too_many_drugs(self):
        with pytest.raises(ValueError):
            generate(SyntheticConfig(n_drugs=400))


class TestOracle:
    @pytest.mark.parametrize("mode,floor", [("random", 0.9), ("disjoint", 0.85)])
    def test_oracle_clears_targets(self, mode, floor):
        s = generate()
        X = oracle_features(s, zscore_normalize(s.expression))
        split = make_split(s.responses, SplitSpec(mode, seed=0))
        pred = oracle_fit_predict(X, s.responses.ln_ic50, split.train, split.test)
        assert metric_pcc(pred, s.responses.ln_ic50[split.test]) >= floor
