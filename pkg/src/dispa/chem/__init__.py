"""SMILES parsing, ring perception and BRICS-style fragmentation."""
