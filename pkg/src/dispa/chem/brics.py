"""BRICS-style fragmentation over :class:`~dispa.chem.smiles.MolGraph`.

Atom environments follow the BRICS labels (L1..L16) and are written as plain
predicates over the parsed graph instead of SMARTS. Only acyclic single-bond
rules are shipped; the chain-olefin rule (L7, a double-bond cut) is left out.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from dispa.chem.smiles import (
    AROMATIC,
    DOUBLE,
    SINGLE,
    Bond,
    MolGraph,
    connected_components,
    write_smiles,
)
from dispa.hashing import hash64

RULE_TABLE_VERSION = "brics-subset-1"

Env = Callable[[MolGraph, int], bool]


def _el(g: MolGraph, i: int) -> str:
    return g.atoms[i].element


def _aliphatic(g: MolGraph, i: int, *elements: str) -> bool:
    atom = g.atoms[i]
    return not atom.aromatic and atom.element in elements


def _aromatic(g: MolGraph, i: int, *elements: str) -> bool:
    atom = g.atoms[i]
    return atom.aromatic and atom.element in elements


def _in_ring(g: MolGraph, i: int) -> bool:
    return any(b.in_ring for _, b in g.adjacency[i])


def _has_double_to(g: MolGraph, i: int, test: Callable[[int], bool]) -> list[int]:
    return [j for j, b in g.adjacency[i] if b.order == DOUBLE and test(j)]


def _two_distinct(cands_a: Iterable[int], cands_b: Iterable[int]) -> bool:
    """True if some x in ``cands_a`` and y in ``cands_b`` are different atoms."""
    a, b = set(cands_a), set(cands_b)
    if not a or not b:
        return False
    return len(a | b) >= 2


def _single_or_aromatic(bond: Bond) -> bool:
    return bond.order in (SINGLE, AROMATIC)


def _acyclic_single_to_carbon(g: MolGraph, i: int) -> bool:
    return any(b.order == SINGLE and not b.in_ring and _el(g, j) == "C" for j, b in g.adjacency[i])


def L1(g: MolGraph, i: int) -> bool:
    """Acyl carbon: C(=O) with a further C/N/O neighbor."""
    if not _aliphatic(g, i, "C") or g.degree(i) != 3:
        return False
    oxo = _has_double_to(g, i, lambda j: _aliphatic(g, j, "O"))
    hetero = [j for j, b in g.adjacency[i] if _single_or_aromatic(b) and _el(g, j) in ("C", "N", "O")]
    return _two_distinct(oxo, hetero)


def L3(g: MolGraph, i: int) -> bool:
    """Ether/ester oxygen with an acyclic single bond to carbon."""
    return _aliphatic(g, i, "O") and g.degree(i) == 2 and _acyclic_single_to_carbon(g, i)


def L4(g: MolGraph, i: int) -> bool:
    """sp3-like carbon linked to carbon through an acyclic single bond."""
    if not _aliphatic(g, i, "C") or g.degree(i) == 1:
        return False
    if any(b.order == DOUBLE for _, b in g.adjacency[i]):
        return False
    return _acyclic_single_to_carbon(g, i)


def L5(g: MolGraph, i: int) -> bool:
    """Amine nitrogen, excluding N-heteroatom links and lactam nitrogens."""
    if not _aliphatic(g, i, "N") or g.degree(i) == 1:
        return False
    for j, b in g.adjacency[i]:
        if b.order == DOUBLE:
            return False
        if b.order == SINGLE and _el(g, j) not in ("C", "S", "H"):
            return False
    if _in_ring(g, i):
        for j, b in g.adjacency[i]:
            if b.in_ring and _aliphatic(g, j, "C") and _in_ring(g, j):
                if _has_double_to(g, j, lambda k: _aliphatic(g, k, "O")):
                    return False
    return True


def L6(g: MolGraph, i: int) -> bool:
    """Acyclic carbonyl carbon with an acyclic single bond to C/N/O."""
    if not _aliphatic(g, i, "C") or g.degree(i) != 3 or _in_ring(g, i):
        return False
    oxo = _has_double_to(g, i, lambda j: _aliphatic(g, j, "O"))
    link = [j for j, b in g.adjacency[i] if b.order == SINGLE and not b.in_ring and _el(g, j) in ("C", "N", "O")]
    return _two_distinct(oxo, link)


def L8(g: MolGraph, i: int) -> bool:
    """Acyclic saturated carbon with at least two heavy neighbors."""
    if not _aliphatic(g, i, "C") or _in_ring(g, i) or g.degree(i) == 1:
        return False
    return all(b.order == SINGLE for _, b in g.adjacency[i])


def L9(g: MolGraph, i: int) -> bool:
    """Neutral aromatic nitrogen flanked by two aromatic ring atoms."""
    if not _aromatic(g, i, "N") or g.atoms[i].formal_charge != 0:
        return False
    ring = [j for j, b in g.adjacency[i] if b.order == AROMATIC and _aromatic(g, j, "C", "N", "O", "S")]
    return len(ring) >= 2


def L10(g: MolGraph, i: int) -> bool:
    """Ring lactam/imide nitrogen."""
    if not _aliphatic(g, i, "N") or not _in_ring(g, i):
        return False
    carbonyl = [
        j for j, b in g.adjacency[i]
        if b.in_ring and _aliphatic(g, j, "C")
        and any(_aliphatic(g, k, "O") and bb.order == DOUBLE for k, bb in g.adjacency[j])
    ]
    other = [j for j, b in g.adjacency[i] if b.in_ring and _aliphatic(g, j, "C", "N", "O", "S")]
    return _two_distinct(carbonyl, other)


def L11(g: MolGraph, i: int) -> bool:
    """Thioether sulfur."""
    return _aliphatic(g, i, "S") and g.degree(i) == 2 and _acyclic_single_to_carbon(g, i)


def L12(g: MolGraph, i: int) -> bool:
    """Sulfonyl sulfur bearing a carbon substituent."""
    if not _aliphatic(g, i, "S") or g.degree(i) != 4:
        return False
    oxo = _has_double_to(g, i, lambda j: _aliphatic(g, j, "O"))
    carbon = [j for j, b in g.adjacency[i] if _single_or_aromatic(b) and _el(g, j) == "C"]
    return len(oxo) >= 2 and bool(carbon)


def L13(g: MolGraph, i: int) -> bool:
    """Ring carbon next to a ring heteroatom (saturated heterocycle)."""
    if not _aliphatic(g, i, "C"):
        return False
    ring_single = [j for j, b in g.adjacency[i] if b.order == SINGLE and b.in_ring]
    any_heavy = [j for j in ring_single if _aliphatic(g, j, "C", "N", "O", "S")]
    hetero = [j for j in ring_single if _aliphatic(g, j, "N", "O", "S")]
    return _two_distinct(any_heavy, hetero)


def L14(g: MolGraph, i: int) -> bool:
    """Aromatic carbon adjacent to an aromatic heteroatom."""
    if not _aromatic(g, i, "C"):
        return False
    arom = [j for j, b in g.adjacency[i] if b.order == AROMATIC]
    any_ring = [j for j in arom if _aromatic(g, j, "C", "N", "O", "S")]
    hetero = [j for j in arom if _aromatic(g, j, "N", "O", "S")]
    return _two_distinct(any_ring, hetero)


def L15(g: MolGraph, i: int) -> bool:
    """Carbocyclic saturated ring carbon."""
    if not _aliphatic(g, i, "C"):
        return False
    ring_c = [j for j, b in g.adjacency[i] if b.order == SINGLE and b.in_ring and _aliphatic(g, j, "C")]
    return len(ring_c) >= 2


def L16(g: MolGraph, i: int) -> bool:
    """Aromatic carbon in a carbocyclic aromatic ring."""
    if not _aromatic(g, i, "C"):
        return False
    return sum(1 for j, b in g.adjacency[i] if b.order == AROMATIC and _aromatic(g, j, "C")) >= 2


ENVIRONMENTS: dict[str, Env] = {
    "L1": L1, "L3": L3, "L4": L4, "L5": L5, "L6": L6, "L8": L8, "L9": L9, "L10": L10,
    "L11": L11, "L12": L12, "L13": L13, "L14": L14, "L15": L15, "L16": L16,
}


@dataclass(frozen=True)
class BricsRule:
    id: str
    env_a: str
    env_b: str
    bond_order: str = SINGLE
    description: str = ""

    def matches(self, g: MolGraph, bond: Bond) -> bool:
        if bond.order != self.bond_order or bond.in_ring:
            return False
        fa, fb = ENVIRONMENTS[self.env_a], ENVIRONMENTS[self.env_b]
        return (fa(g, bond.a) and fb(g, bond.b)) or (fa(g, bond.b) and fb(g, bond.a))


_PAIRS = [
    ("L1", "L3", "ester C(=O)-O"),
    ("L1", "L5", "amide C(=O)-N"),
    ("L1", "L10", "imide/lactam acyl C(=O)-N(ring)"),
    ("L3", "L4", "ether O-C(sp3)"),
    ("L3", "L13", "ether O-C(heterocycle)"),
    ("L3", "L14", "ether O-c(heteroaryl)"),
    ("L3", "L15", "ether O-C(carbocycle)"),
    ("L3", "L16", "ether O-c(aryl)"),
    ("L4", "L5", "amine C(sp3)-N"),
    ("L4", "L11", "thioether C(sp3)-S"),
    ("L5", "L12", "sulfonamide S(=O)(=O)-N"),
    ("L5", "L14", "amine N-c(heteroaryl)"),
    ("L5", "L16", "amine N-c(aryl)"),
    ("L5", "L13", "amine N-C(heterocycle)"),
    ("L5", "L15", "amine N-C(carbocycle)"),
    ("L6", "L13", "carbonyl C(=O)-C(heterocycle)"),
    ("L6", "L14", "carbonyl C(=O)-c(heteroaryl)"),
    ("L6", "L15", "carbonyl C(=O)-C(carbocycle)"),
    ("L6", "L16", "carbonyl C(=O)-c(aryl)"),
    ("L8", "L9", "linker C-n(aromatic)"),
    ("L8", "L10", "linker C-N(lactam)"),
    ("L8", "L13", "linker C-C(heterocycle)"),
    ("L8", "L14", "linker C-c(heteroaryl)"),
    ("L8", "L15", "linker C-C(carbocycle)"),
    ("L8", "L16", "linker C-c(aryl)"),
    ("L9", "L13", "n(aromatic)-C(heterocycle)"),
    ("L9", "L14", "n(aromatic)-c(heteroaryl)"),
    ("L9", "L15", "n(aromatic)-C(carbocycle)"),
    ("L9", "L16", "n(aromatic)-c(aryl)"),
    ("L10", "L13", "N(lactam)-C(heterocycle)"),
    ("L10", "L14", "N(lactam)-c(heteroaryl)"),
    ("L10", "L15", "N(lactam)-C(carbocycle)"),
    ("L10", "L16", "N(lactam)-c(aryl)"),
    ("L11", "L13", "thioether S-C(heterocycle)"),
    ("L11", "L14", "thioether S-c(heteroaryl)"),
    ("L11", "L15", "thioether S-C(carbocycle)"),
    ("L11", "L16", "thioether S-c(aryl)"),
    ("L13", "L14", "ring-ring C(heterocycle)-c(heteroaryl)"),
    ("L13", "L15", "ring-ring C(heterocycle)-C(carbocycle)"),
    ("L13", "L16", "ring-ring C(heterocycle)-c(aryl)"),
    ("L14", "L14", "biaryl c(heteroaryl)-c(heteroaryl)"),
    ("L14", "L15", "ring-ring c(heteroaryl)-C(carbocycle)"),
    ("L14", "L16", "biaryl c(heteroaryl)-c(aryl)"),
    ("L15", "L16", "ring-ring C(carbocycle)-c(aryl)"),
    ("L16", "L16", "biaryl c(aryl)-c(aryl)"),
]

RULES: tuple[BricsRule, ...] = tuple(
    BricsRule(id=f"{a}-{b}", env_a=a, env_b=b, description=desc) for a, b, desc in _PAIRS
)


@dataclass(frozen=True)
class Fragment:
    atoms: tuple[int, ...]
    smiles: str
    attachment_count: int


def find_cleavable_bonds(g: MolGraph, rules: Sequence[BricsRule] = RULES) -> list[int]:
    """Indices into ``g.bonds`` of acyclic single bonds matched by any rule."""
    return [k for k, bond in enumerate(g.bonds) if any(r.matches(g, bond) for r in rules)]


def matching_rules(g: MolGraph, bond_index: int, rules: Sequence[BricsRule] = RULES) -> list[str]:
    bond = g.bonds[bond_index]
    return [r.id for r in rules if r.matches(g, bond)]


def fragment(g: MolGraph, rules: Sequence[BricsRule] = RULES) -> list[Fragment]:
    """Cut every cleavable bond at once and return the pieces.

    Fragments are ordered by their lowest parent atom index. A molecule with
    nothing to cut comes back as a single whole-molecule fragment.
    """
    cut = set(find_cleavable_bonds(g, rules))
    kept = [b for k, b in enumerate(g.bonds) if k not in cut]
    attach = [0] * len(g.atoms)
    for k in cut:
        attach[g.bonds[k].a] += 1
        attach[g.bonds[k].b] += 1
    out = []
    for comp in connected_components(len(g.atoms), kept):
        out.append(Fragment(
            atoms=tuple(comp),
            smiles=write_smiles(g, comp),
            attachment_count=sum(attach[i] for i in comp),
        ))
    return out


def rule_table() -> list[dict[str, str]]:
    """Rows describing the shipped rules, for ``--print-rules``."""
    return [
        {"id": r.id, "env_a": r.env_a, "env_b": r.env_b, "bond_order": r.bond_order,
         "description": r.description, "version": RULE_TABLE_VERSION}
        for r in RULES
    ]


def fragment_fingerprint(g: MolGraph, radius: int = 2) -> frozenset[int]:
    """Circular atom-environment identifiers up to ``radius`` bonds.

    Takes the fragment's own graph (parse its SMILES first). Each atom's
    radius-0 identifier hashes element, aromaticity, charge and degree; each
    further round hashes the previous identifier with the sorted
    (bond order, neighbor identifier) pairs.
    """
    ids = [
        hash64(f"{a.element}|{int(a.aromatic)}|{a.formal_charge}|{g.degree(a.index)}")
        for a in g.atoms
    ]
    features = set(ids)
    for r in range(1, radius + 1):
        nxt = []
        for i in range(len(g.atoms)):
            env = sorted((b.order, ids[j]) for j, b in g.adjacency[i])
            nxt.append(hash64(f"{r}|{ids[i]}|" + ";".join(f"{o}:{x}" for o, x in env)))
        ids = nxt
        features.update(ids)
    return frozenset(features)
