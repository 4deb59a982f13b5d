"""SMILES tokenizer, parser, ring perception and writer.

Covers the Daylight organic subset plus bracket atoms. Stereo markers and
isotopes are accepted and discarded; aromaticity is taken from lowercase
input without re-derivation.
"""

from __future__ import annotations

import logging
import random
import sys
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

ORGANIC_SUBSET = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
AROMATIC_BRACKET = ("b", "c", "n", "o", "p", "s", "se", "as")

ELEMENTS = frozenset(
    """H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co
    Ni Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te
    I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir
    Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No
    Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og""".split()
)

SINGLE, DOUBLE, TRIPLE, AROMATIC = "single", "double", "triple", "aromatic"
BOND_SYMBOLS = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC, "/": SINGLE, "\\": SINGLE}
# Aromatic bonds count 1 so fused-ring junction carbons stay within 4.
_SANITY_VALENCE = {SINGLE: 1, DOUBLE: 2, TRIPLE: 3, AROMATIC: 1}


class SmilesError(ValueError):
    """Parse failure carrying the offending character offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    # None for organic-subset atoms; bracket atoms always carry a count.
    explicit_h: int | None = None
    index: int = 0


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: str = SINGLE
    in_ring: bool = False

    def other(self, i: int) -> int:
        return self.b if i == self.a else self.a


@dataclass(frozen=True)
class MolGraph:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    rings: tuple[tuple[int, ...], ...] = ()
    source: str = ""

    @cached_property
    def adjacency(self) -> tuple[tuple[tuple[int, Bond], ...], ...]:
        """Per atom, ``(neighbor, bond)`` pairs sorted by neighbor index."""
        adj: list[list[tuple[int, Bond]]] = [[] for _ in self.atoms]
        for bond in self.bonds:
            adj[bond.a].append((bond.b, bond))
            adj[bond.b].append((bond.a, bond))
        return tuple(tuple(sorted(x, key=lambda t: t[0])) for x in adj)

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def bond_between(self, i: int, j: int) -> Bond | None:
        for k, bond in self.adjacency[i]:
            if k == j:
                return bond
        return None

    def components(self) -> list[list[int]]:
        return connected_components(len(self.atoms), self.bonds)

    def __len__(self) -> int:
        return len(self.atoms)


@dataclass(frozen=True)
class Token:
    kind: str  # atom | bracket | bond | open | close | ring | dot
    text: str
    pos: int

    def __repr__(self) -> str:
        return self.text if self.kind != "ring" else f"ring{self.text.lstrip('%')}"


def connected_components(n: int, bonds: Iterable[Bond]) -> list[list[int]]:
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for bond in bonds:
        ra, rb = find(bond.a), find(bond.b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


# --------------------------------------------------------------------------
# tokenizer


def tokenize_smiles(smiles: str | bytes) -> list[Token]:
    if isinstance(smiles, bytes):
        try:
            smiles = smiles.decode("ascii")
        except UnicodeDecodeError as exc:
            raise SmilesError("non-ASCII byte", exc.start) from None
    if not smiles:
        raise SmilesError("empty SMILES", 0)
    tokens: list[Token] = []
    i, n = 0, len(smiles)
    while i < n:
        ch = smiles[i]
        if ch == "[":
            end = smiles.find("]", i + 1)
            if end < 0:
                raise SmilesError("unterminated bracket atom", i)
            tokens.append(Token("bracket", smiles[i : end + 1], i))
            i = end + 1
        elif ch in "BCNOPSFI":
            two = smiles[i : i + 2]
            if two in ("Cl", "Br"):
                tokens.append(Token("atom", two, i))
                i += 2
            else:
                tokens.append(Token("atom", ch, i))
                i += 1
        elif ch in "bcnops":
            tokens.append(Token("atom", ch, i))
            i += 1
        elif ch in BOND_SYMBOLS:
            tokens.append(Token("bond", ch, i))
            i += 1
        elif ch == "(":
            tokens.append(Token("open", ch, i))
            i += 1
        elif ch == ")":
            tokens.append(Token("close", ch, i))
            i += 1
        elif ch.isdigit() and ch.isascii():
            tokens.append(Token("ring", ch, i))
            i += 1
        elif ch == "%":
            digits = smiles[i + 1 : i + 3]
            if len(digits) != 2 or not (digits.isascii() and digits.isdigit()):
                raise SmilesError("'%' must be followed by two digits", i)
            tokens.append(Token("ring", "%" + digits, i))
            i += 3
        elif ch == ".":
            tokens.append(Token("dot", ch, i))
            i += 1
        else:
            raise SmilesError(f"unexpected character {ch!r}", i)
    return tokens


def _parse_bracket(tok: Token, warnings: list[str]) -> Atom:
    body = tok.text[1:-1]
    pos = 0

    def fail(msg: str) -> SmilesError:
        return SmilesError(f"bad bracket atom {tok.text!r}: {msg}", tok.pos + 1 + pos)

    start = pos
    while pos < len(body) and body[pos].isdigit():
        pos += 1
    if pos > start:
        warnings.append(f"isotope discarded in {tok.text}")

    if pos >= len(body):
        raise fail("missing element")
    aromatic = False
    element = None
    two, one = body[pos : pos + 2], body[pos : pos + 1]
    if two in ("se", "as"):
        element, aromatic = two.capitalize(), True
        pos += 2
    elif one in AROMATIC_BRACKET:
        element, aromatic = one.upper(), True
        pos += 1
    elif two in ELEMENTS:
        element = two
        pos += 2
    elif one in ELEMENTS:
        element = one
        pos += 1
    else:
        raise fail("unknown element")

    if pos < len(body) and body[pos] == "@":
        pos += 1
        if body[pos : pos + 1] == "@":
            pos += 1
        elif body[pos : pos + 2] in ("TH", "AL", "SP", "TB", "OH"):
            pos += 2
            while pos < len(body) and body[pos].isdigit():
                pos += 1
        warnings.append(f"stereo marker discarded in {tok.text}")

    hcount = 0
    if pos < len(body) and body[pos] == "H":
        pos += 1
        hcount = 1
        if pos < len(body) and body[pos].isdigit():
            hcount = int(body[pos])
            pos += 1

    charge = 0
    if pos < len(body) and body[pos] in "+-":
        sign = 1 if body[pos] == "+" else -1
        pos += 1
        if pos < len(body) and body[pos].isdigit():
            mag = 0
            while pos < len(body) and body[pos].isdigit():
                mag = mag * 10 + int(body[pos])
                pos += 1
            charge = sign * mag
        else:
            charge = sign
            while pos < len(body) and body[pos] == body[pos - 1]:
                charge += sign
                pos += 1

    if pos < len(body) and body[pos] == ":":
        pos += 1
        start = pos
        while pos < len(body) and body[pos].isdigit():
            pos += 1
        if pos == start:
            raise fail("empty atom class")

    if pos != len(body):
        raise fail(f"unexpected {body[pos]!r}")
    return Atom(element=element, aromatic=aromatic, formal_charge=charge, explicit_h=hcount)


# --------------------------------------------------------------------------
# parser


def parse_smiles(smiles: str | bytes, *, allow_salts: bool = False) -> MolGraph:
    """Parse ``smiles`` into a ring-perceived :class:`MolGraph`.

    Dot-separated input is rejected unless ``allow_salts`` is set, in which
    case the largest component (first on ties) is kept.
    """
    tokens = tokenize_smiles(smiles)
    if isinstance(smiles, bytes):
        smiles = smiles.decode("ascii")
    warnings: list[str] = []
    atoms: list[Atom] = []
    bonds: dict[frozenset[int], tuple[str, bool]] = {}  # pair -> (order, implicit)
    bond_list: list[tuple[int, int]] = []
    stack: list[int] = []
    prev: int | None = None
    pending_bond: Token | None = None
    open_rings: dict[str, tuple[int, Token | None, Token]] = {}
    saw_dot = False

    def add_bond(i: int, j: int, sym: Token | None, pos: int) -> None:
        if i == j:
            raise SmilesError("atom bonded to itself", pos)
        key = frozenset((i, j))
        if key in bonds:
            raise SmilesError("duplicate bond between the same atoms", pos)
        if sym is None:
            order = AROMATIC if atoms[i].aromatic and atoms[j].aromatic else SINGLE
            bonds[key] = (order, True)
        else:
            if sym.text in "/\\":
                warnings.append(f"directional bond {sym.text!r} treated as single")
            bonds[key] = (BOND_SYMBOLS[sym.text], False)
        bond_list.append((i, j))

    for tok in tokens:
        if tok.kind in ("atom", "bracket"):
            if tok.kind == "atom":
                atom = Atom(element=tok.text.capitalize() if tok.text.islower() else tok.text,
                            aromatic=tok.text.islower())
            else:
                atom = _parse_bracket(tok, warnings)
            idx = len(atoms)
            atoms.append(replace(atom, index=idx))
            if prev is not None:
                add_bond(prev, idx, pending_bond, tok.pos)
            elif pending_bond is not None:
                raise SmilesError("bond without preceding atom", pending_bond.pos)
            pending_bond = None
            prev = idx
        elif tok.kind == "bond":
            if prev is None or pending_bond is not None:
                raise SmilesError("misplaced bond symbol", tok.pos)
            pending_bond = tok
        elif tok.kind == "open":
            if prev is None or pending_bond is not None:
                raise SmilesError("branch without preceding atom", tok.pos)
            stack.append(prev)
        elif tok.kind == "close":
            if not stack:
                raise SmilesError("unbalanced ')'", tok.pos)
            if pending_bond is not None:
                raise SmilesError("dangling bond before ')'", pending_bond.pos)
            prev = stack.pop()
        elif tok.kind == "ring":
            if prev is None:
                raise SmilesError("ring closure without preceding atom", tok.pos)
            label = tok.text.lstrip("%")
            if label in open_rings:
                j, sym_open, _ = open_rings.pop(label)
                sym = pending_bond or sym_open
                if pending_bond is not None and sym_open is not None and pending_bond.text != sym_open.text:
                    raise SmilesError(f"conflicting bond symbols on ring {label}", tok.pos)
                add_bond(j, prev, sym, tok.pos)
            else:
                open_rings[label] = (prev, pending_bond, tok)
            pending_bond = None
        elif tok.kind == "dot":
            if prev is None or pending_bond is not None or stack:
                raise SmilesError("misplaced '.'", tok.pos)
            saw_dot = True
            prev = None

    if pending_bond is not None:
        raise SmilesError("dangling bond at end of input", pending_bond.pos)
    if stack:
        raise SmilesError("unbalanced '('", len(smiles))
    if open_rings:
        label, (_, _, tok) = next(iter(open_rings.items()))
        raise SmilesError(f"ring bond {label} unclosed", tok.pos)
    if saw_dot and not allow_salts:
        raise SmilesError("multi-component SMILES not allowed", smiles.index("."))

    load = [0] * len(atoms)
    for i, j in bond_list:
        v = _SANITY_VALENCE[bonds[frozenset((i, j))][0]]
        load[i] += v
        load[j] += v
    for atom in atoms:
        if atom.element == "C" and atom.explicit_h is None and load[atom.index] > 4:
            raise SmilesError(f"carbon atom {atom.index} has more than four bonds", 0)

    for msg in dict.fromkeys(warnings):
        logger.warning("%s: %s", smiles, msg)

    raw = tuple(Bond(i, j, bonds[frozenset((i, j))][0]) for i, j in bond_list)
    implicit = {frozenset((i, j)) for i, j in bond_list if bonds[frozenset((i, j))][1]}
    graph = perceive_rings(MolGraph(tuple(atoms), raw, source=smiles))

    # Implicit bonds between aromatic atoms outside rings are plain single
    # bonds (biaryl links); explicit ':' outside a ring is malformed.
    fixed = []
    for bond in graph.bonds:
        if bond.order == AROMATIC and not bond.in_ring:
            if frozenset((bond.a, bond.b)) not in implicit:
                raise SmilesError("aromatic bond outside a ring", 0)
            bond = replace(bond, order=SINGLE)
        fixed.append(bond)
    graph = replace(graph, bonds=tuple(fixed))

    if saw_dot:
        comps = graph.components()
        largest = max(comps, key=len)
        if len(comps) > 1:
            logger.warning("%s: kept largest of %d components", smiles, len(comps))
        graph = induced_subgraph(graph, largest)
    return graph


def induced_subgraph(g: MolGraph, atom_subset: Iterable[int]) -> MolGraph:
    """Subgraph on ``atom_subset`` with atoms renumbered in ascending order."""
    keep = sorted(set(atom_subset))
    remap = {old: new for new, old in enumerate(keep)}
    atoms = tuple(replace(g.atoms[old], index=new) for new, old in enumerate(keep))
    bonds = tuple(
        Bond(remap[b.a], remap[b.b], b.order)
        for b in g.bonds
        if b.a in remap and b.b in remap
    )
    return perceive_rings(MolGraph(atoms, bonds, source=g.source))


# --------------------------------------------------------------------------
# rings


def perceive_rings(g: MolGraph) -> MolGraph:
    """Populate ``rings`` with a minimum cycle basis and flag ring bonds.

    The basis is selected greedily from Horton candidate cycles, so its size
    is always ``|bonds| - |atoms| + |components|``.
    """
    n, m = len(g.atoms), len(g.bonds)
    nullity = m - n + len(connected_components(n, g.bonds))
    if nullity == 0:
        bonds = tuple(replace(b, in_ring=False) for b in g.bonds)
        return replace(g, bonds=bonds, rings=())

    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k, b in enumerate(g.bonds):
        adj[b.a].append((b.b, k))
        adj[b.b].append((b.a, k))
    for lst in adj:
        lst.sort()

    # BFS shortest-path trees from every vertex.
    trees = []
    for root in range(n):
        parent: dict[int, tuple[int, int] | None] = {root: None}
        dist = {root: 0}
        queue = [root]
        for u in queue:
            for v, k in adj[u]:
                if v not in parent:
                    parent[v] = (u, k)
                    dist[v] = dist[u] + 1
                    queue.append(v)
        trees.append((parent, dist))

    def path_edges(root: int, target: int) -> list[int] | None:
        parent, _ = trees[root]
        if target not in parent:
            return None
        out = []
        while parent[target] is not None:
            u, k = parent[target]
            out.append(k)
            target = u
        return out

    candidates: dict[int, int] = {}  # edge bitmask -> length
    for root in range(n):
        for k, b in enumerate(g.bonds):
            p1, p2 = path_edges(root, b.a), path_edges(root, b.b)
            if p1 is None or p2 is None:
                continue
            if set(p1) & set(p2) or k in p1 or k in p2:
                continue
            mask = 1 << k
            for e in p1 + p2:
                mask |= 1 << e
            candidates.setdefault(mask, len(p1) + len(p2) + 1)

    basis: list[int] = []
    reduced: dict[int, int] = {}  # pivot bit -> reduced vector
    for mask in sorted(candidates, key=lambda x: (candidates[x], _bits(x))):
        v = mask
        while v:
            top = v.bit_length() - 1
            if top not in reduced:
                break
            v ^= reduced[top]
        if v:
            reduced[v.bit_length() - 1] = v
            basis.append(mask)
            if len(basis) == nullity:
                break

    ring_edges = 0
    rings = []
    for mask in basis:
        ring_edges |= mask
        rings.append(_cycle_atoms(g.bonds, mask))
    bonds = tuple(replace(b, in_ring=bool(ring_edges >> k & 1)) for k, b in enumerate(g.bonds))
    return replace(g, bonds=bonds, rings=tuple(rings))


def _bits(mask: int) -> tuple[int, ...]:
    return tuple(k for k in range(mask.bit_length()) if mask >> k & 1)


def _cycle_atoms(bonds: Sequence[Bond], mask: int) -> tuple[int, ...]:
    edges = [bonds[k] for k in _bits(mask)]
    nbrs: dict[int, list[int]] = {}
    for b in edges:
        nbrs.setdefault(b.a, []).append(b.b)
        nbrs.setdefault(b.b, []).append(b.a)
    start = min(nbrs)
    order = [start]
    prev, cur = None, start
    while True:
        nxt = min(x for x in nbrs[cur] if x != prev)
        if nxt == start:
            break
        order.append(nxt)
        prev, cur = cur, nxt
    return tuple(order)


# --------------------------------------------------------------------------
# writer


def _atom_symbol(atom: Atom) -> str:
    bare = atom.explicit_h is None and atom.formal_charge == 0
    if bare and atom.element in ORGANIC_SUBSET and (not atom.aromatic or atom.element.lower() in AROMATIC_ORGANIC):
        return atom.element.lower() if atom.aromatic else atom.element
    sym = atom.element.lower() if atom.aromatic else atom.element
    h = atom.explicit_h or 0
    hpart = "" if h == 0 else ("H" if h == 1 else f"H{h}")
    q = atom.formal_charge
    qpart = "" if q == 0 else ("+" if q == 1 else "-" if q == -1 else f"{q:+d}")
    return f"[{sym}{hpart}{qpart}]"


def _bond_symbol(g: MolGraph, bond: Bond) -> str:
    both_aromatic = g.atoms[bond.a].aromatic and g.atoms[bond.b].aromatic
    if bond.order == SINGLE:
        return "-" if both_aromatic else ""
    if bond.order == AROMATIC:
        return "" if both_aromatic else ":"
    return "=" if bond.order == DOUBLE else "#"


def write_smiles(
    g: MolGraph,
    atom_subset: Iterable[int] | None = None,
    *,
    rng: random.Random | None = None,
) -> str:
    """Emit SMILES for the subgraph induced by ``atom_subset``.

    Traversal is a DFS from the lowest atom index visiting neighbors in index
    order. Passing ``rng`` randomizes start atom and neighbor order, which is
    how randomized SMILES are produced for property tests.
    """
    subset = sorted(set(range(len(g.atoms)) if atom_subset is None else atom_subset))
    if not subset:
        raise ValueError("empty atom subset")
    members = set(subset)
    if any(i < 0 or i >= len(g.atoms) for i in subset):
        raise ValueError("atom index out of range")

    def nbrs(i: int) -> list[tuple[int, Bond]]:
        out = [(j, b) for j, b in g.adjacency[i] if j in members]
        if rng is not None:
            rng.shuffle(out)
        return out

    start = subset[0] if rng is None else rng.choice(subset)
    # First pass: DFS tree and ring-closure edges.
    order: list[int] = []
    children: dict[int, list[tuple[int, Bond]]] = {i: [] for i in subset}
    closures: dict[int, list[tuple[int, Bond]]] = {i: [] for i in subset}
    seen = {start}
    visited_edges: set[frozenset[int]] = set()
    # Iterative DFS that preserves recursive visiting order.
    iters = {start: iter(nbrs(start))}
    order.append(start)
    path = [start]
    while path:
        u = path[-1]
        for v, bond in iters[u]:
            key = frozenset((u, v))
            if key in visited_edges:
                continue
            visited_edges.add(key)
            if v in seen:
                closures[u].append((v, bond))
                closures[v].append((u, bond))
                continue
            seen.add(v)
            children[u].append((v, bond))
            order.append(v)
            iters[v] = iter(nbrs(v))
            path.append(v)
            break
        else:
            path.pop()
    if len(seen) != len(members):
        raise ValueError("atom subset does not induce a connected subgraph")

    rank = {a: k for k, a in enumerate(order)}
    free: list[int] = []
    next_label = 1
    open_labels: dict[frozenset[int], int] = {}
    out: list[str] = []

    def label_text(x: int) -> str:
        return str(x) if x < 10 else f"%{x:02d}"

    def emit(u: int) -> None:
        nonlocal next_label
        out.append(_atom_symbol(g.atoms[u]))
        for v, bond in sorted(closures[u], key=lambda t: rank[t[0]]):
            key = frozenset((u, v))
            if key in open_labels:
                lab = open_labels.pop(key)
                out.append(label_text(lab))
                free.append(lab)
                free.sort()
            else:
                if free:
                    lab = free.pop(0)
                else:
                    lab = next_label
                    next_label += 1
                open_labels[key] = lab
                out.append(_bond_symbol(g, bond) + label_text(lab))
        kids = children[u]
        for k, (v, bond) in enumerate(kids):
            last = k == len(kids) - 1
            if not last:
                out.append("(")
            out.append(_bond_symbol(g, bond))
            emit(v)
            if not last:
                out.append(")")

    if len(subset) + 50 > sys.getrecursionlimit():
        sys.setrecursionlimit(len(subset) + 100)
    emit(start)
    return "".join(out)
