"""Record RDKit reference values for the parser/fragmenter fixture corpus.

Run once with RDKit installed; the output JSON is committed under
tests/fixtures so the test suite itself does not need RDKit.

    python scripts/make_reference_fixtures.py > tests/fixtures/reference_corpus.json
"""

import json
import sys

from rdkit import Chem, RDLogger
from rdkit.Chem import BRICS

RDLogger.DisableLog("rdApp.*")

CORPUS = {
    "ethanol": "CCO",
    "ethane": "CC",
    "cyclopropane": "C1CC1",
    "benzene": "c1ccccc1",
    "naphthalene": "c1ccc2ccccc2c1",
    "n_methylacetamide": "CC(=O)NC",
    "aspirin": "CC(=O)Oc1ccccc1C(=O)O",
    "paracetamol": "CC(=O)Nc1ccc(O)cc1",
    "ibuprofen": "CC(C)Cc1ccc(cc1)C(C)C(=O)O",
    "caffeine": "Cn1cnc2c1c(=O)n(C)c(=O)n2C",
    "biphenyl": "c1ccc(cc1)-c1ccccc1",
    "diphenhydramine": "CN(C)CCOC(c1ccccc1)c1ccccc1",
    "lidocaine": "CCN(CC)CC(=O)Nc1c(C)cccc1C",
    "propranolol": "CC(C)NCC(O)COc1cccc2ccccc12",
    "sulfamethoxazole": "Cc1cc(NS(=O)(=O)c2ccc(N)cc2)no1",
    "nicotine": "CN1CCCC1c1cccnc1",
    "imatinib": "Cc1ccc(NC(=O)c2ccc(CN3CCN(C)CC3)cc2)cc1Nc1nccc(-c2cccnc2)n1",
    "gefitinib": "COc1cc2ncnc(Nc3ccc(F)c(Cl)c3)c2cc1OCCCN1CCOCC1",
    "celecoxib": "Cc1ccc(cc1)-c1cc(nn1-c1ccc(cc1)S(N)(=O)=O)C(F)(F)F",
    "erlotinib": "COCCOc1cc2ncnc(Nc3cccc(c3)C#C)c2cc1OCCOC",
}


def record(name, smi):
    mol = Chem.MolFromSmiles(smi)
    bonds = []
    for (a, b), _labels in BRICS.FindBRICSBonds(mol):
        bond = mol.GetBondBetweenAtoms(a, b)
        if bond.GetBondType() == Chem.BondType.SINGLE:
            bonds.append(sorted((a, b)))
    return {
        "name": name,
        "smiles": smi,
        "atoms": mol.GetNumAtoms(),
        "bonds": mol.GetNumBonds(),
        "rings": mol.GetRingInfo().NumRings(),
        "aromatic_atoms": sum(a.GetIsAromatic() for a in mol.GetAtoms()),
        "brics_bonds": sorted(bonds),
        "brics_fragments": sorted(BRICS.BRICSDecompose(mol)),
    }


def main():
    rows = [record(n, s) for n, s in CORPUS.items()]
    json.dump({"reference": "RDKit BRICS (single-bond rules)", "molecules": rows}, sys.stdout, indent=1)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
