"""In-memory training data: responses plus per-cell and per-drug model inputs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dispa.pathways import DataError, ResponseTable


@dataclass
class Dataset:
    responses: ResponseTable
    cell_inputs: dict[str, np.ndarray]                    # cell -> (N_p, N_g)
    drug_inputs: dict[str, tuple[np.ndarray, np.ndarray]]  # drug -> ((1, d_e), (N_s, d_e))
    fragments: dict[str, list[str]] = field(default_factory=dict)
    pathway_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.cell_inputs or not self.drug_inputs:
            raise DataError("dataset needs at least one cell and one drug")
        shapes = {m.shape for m in self.cell_inputs.values()}
        if len(shapes) != 1:
            raise DataError(f"cell inputs disagree in shape: {sorted(shapes)}")
        dims = {e.shape[1] for e, _ in self.drug_inputs.values()} | {s.shape[1] for _, s in self.drug_inputs.values()}
        if len(dims) != 1:
            raise DataError(f"drug embeddings disagree in dimension: {sorted(dims)}")
        for cell, drug in self.responses.pairs():
            if cell not in self.cell_inputs:
                raise DataError(f"response pair references unknown cell {cell!r}")
            if drug not in self.drug_inputs:
                raise DataError(f"response pair references unknown drug {drug!r}")

    @property
    def n_pathways(self) -> int:
        return next(iter(self.cell_inputs.values())).shape[0]

    @property
    def max_genes(self) -> int:
        return next(iter(self.cell_inputs.values())).shape[1]

    @property
    def embed_dim(self) -> int:
        return next(iter(self.drug_inputs.values()))[0].shape[1]

    def restrict(self, responses: ResponseTable) -> "Dataset":
        """Same inputs, different response rows."""
        return Dataset(responses, self.cell_inputs, self.drug_inputs, self.fragments, self.pathway_ids)
