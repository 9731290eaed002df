"""Molecular graphs for HFO/HFC/HC/PFC fluids.

Parses a mini-SMILES subset (C and F atoms, single/double bonds, branches,
E/Z marks) into validated graphs, one-hot featurizes atoms and bonds, embeds
graphs with a small attention message-passing network, and forms the
elementwise similarity vector between two embeddings.

Hydrogens are implicit throughout: the hydrogen count is a node feature and
the atom-type one-hot has no H slot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffengine as de

HIDDEN = 32
EMBED_DIM = 16
N_LAYERS = 2
ATT_HIDDEN = 8
NODE_FEATURES = 12
EDGE_FEATURES = 5

STEREO_NONE = "none"
STEREO_Z = "Z"
STEREO_E = "E"

_PRIORITY = {"F": 9, "C": 6, "H": 1}


class MoleculeError(ValueError):
    pass


class ParseError(MoleculeError):
    pass


class ValenceError(MoleculeError):
    pass


class UnsupportedAtom(MoleculeError):
    pass


class DegenerateRepresentation(ValueError):
    """A representation vector with (near-)zero norm cannot be compared."""


@dataclass(frozen=True)
class Atom:
    element: str          # C or F
    degree: int           # heavy-atom neighbors, 1..4
    hybridization: str    # sp2 iff on a double bond, else sp3
    hydrogens: int        # implicit H, 0..3


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    order: int            # 1 or 2
    stereo: str = STEREO_NONE


@dataclass(frozen=True)
class MoleculeGraph:
    atoms: tuple
    bonds: tuple

    def __post_init__(self):
        n = len(self.atoms)
        if n < 2:
            raise ParseError("molecule must contain at least two heavy atoms")
        doubles = [b for b in self.bonds if b.order == 2]
        if len(doubles) > 1:
            raise ParseError("at most one double bond is supported")
        # connectivity over heavy atoms
        adj = {i: [] for i in range(n)}
        for b in self.bonds:
            adj[b.i].append(b.j)
            adj[b.j].append(b.i)
        seen = {0}
        frontier = [0]
        while frontier:
            cur = frontier.pop()
            for nxt in adj[cur]:
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        if len(seen) != n:
            raise ParseError("molecule graph is disconnected")

    def neighbors(self, i: int) -> list[tuple[int, "Bond"]]:
        out = []
        for b in self.bonds:
            if b.i == i:
                out.append((b.j, b))
            elif b.j == i:
                out.append((b.i, b))
        return out


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def parse_molecule(spec: str) -> MoleculeGraph:
    """Parse the mini-SMILES subset into a validated MoleculeGraph.

    Atoms C and F, implicit-single and "=" bonds, "(...)" branches, and E/Z
    direction marks "/" and "\\" adjacent to the double bond.
    """
    if not spec or not spec.strip():
        raise ParseError("empty molecule spec")
    spec = spec.strip()

    elements: list[str] = []
    raw_bonds: list[dict] = []   # {u, v, order, mark} with u written before v
    stack: list[int] = []
    prev: int | None = None
    order = 1
    mark: str | None = None

    for ch in spec:
        if ch in "CF":
            idx = len(elements)
            elements.append(ch)
            if prev is not None:
                raw_bonds.append({"u": prev, "v": idx, "order": order, "mark": mark})
            order, mark = 1, None
            prev = idx
        elif ch == "=":
            if prev is None or order == 2:
                raise ParseError(f"misplaced '=' in {spec!r}")
            if mark is not None:
                raise ParseError(f"direction mark on a double bond in {spec!r}")
            order = 2
        elif ch in "/\\":
            if prev is None or order == 2 or mark is not None:
                raise ParseError(f"misplaced direction mark in {spec!r}")
            mark = ch
        elif ch == "(":
            if prev is None:
                raise ParseError(f"branch before any atom in {spec!r}")
            stack.append(prev)
        elif ch == ")":
            if not stack:
                raise ParseError(f"unbalanced ')' in {spec!r}")
            prev = stack.pop()
        elif ch.isalpha():
            raise UnsupportedAtom(f"element {ch!r} outside the C/F subset in {spec!r}")
        else:
            raise ParseError(f"unexpected character {ch!r} in {spec!r}")
    if stack:
        raise ParseError(f"unbalanced '(' in {spec!r}")
    if order == 2 or mark is not None:
        raise ParseError(f"dangling bond symbol at end of {spec!r}")

    n = len(elements)
    bond_order_sum = [0] * n
    heavy_degree = [0] * n
    on_double = [False] * n
    for rb in raw_bonds:
        bond_order_sum[rb["u"]] += rb["order"]
        bond_order_sum[rb["v"]] += rb["order"]
        heavy_degree[rb["u"]] += 1
        heavy_degree[rb["v"]] += 1
        if rb["order"] == 2:
            on_double[rb["u"]] = True
            on_double[rb["v"]] = True

    atoms: list[Atom] = []
    for idx, el in enumerate(elements):
        if el == "C":
            hydrogens = 4 - bond_order_sum[idx]
            if hydrogens < 0:
                raise ValenceError(f"carbon {idx} exceeds valence 4 in {spec!r}")
            if hydrogens > 3:
                raise ValenceError(f"carbon {idx} has no heavy neighbor in {spec!r}")
        else:
            if heavy_degree[idx] != 1 or bond_order_sum[idx] != 1:
                raise ValenceError(f"fluorine {idx} must have exactly one single bond in {spec!r}")
            partner = next(rb["u"] if rb["v"] == idx else rb["v"]
                           for rb in raw_bonds if idx in (rb["u"], rb["v"]))
            if elements[partner] != "C":
                raise ValenceError(f"fluorine {idx} must bond to carbon in {spec!r}")
            hydrogens = 0
        atoms.append(Atom(
            element=el,
            degree=heavy_degree[idx],
            hybridization="sp2" if on_double[idx] else "sp3",
            hydrogens=hydrogens,
        ))

    bonds = [Bond(i=min(rb["u"], rb["v"]), j=max(rb["u"], rb["v"]), order=rb["order"])
             for rb in raw_bonds]

    double_idx = next((k for k, b in enumerate(bonds) if b.order == 2), None)
    if double_idx is not None:
        stereo = _resolve_stereo(spec, elements, raw_bonds, atoms,
                                 bonds[double_idx].i, bonds[double_idx].j)
        bonds[double_idx] = Bond(i=bonds[double_idx].i, j=bonds[double_idx].j,
                                 order=2, stereo=stereo)
    else:
        for rb in raw_bonds:
            if rb["mark"] is not None:
                raise ParseError(f"direction mark without a double bond in {spec!r}")

    return MoleculeGraph(atoms=tuple(atoms), bonds=tuple(bonds))


def _substituent_side(rb: dict, dba: int) -> tuple[int, int]:
    """(substituent index, geometric side +-1) of a marked bond relative to
    the double-bond atom `dba`.  '/' written toward the atom puts the far end
    below (-1); written away from it, above (+1); '\\' is the mirror."""
    up = 1 if rb["mark"] == "/" else -1
    if rb["v"] == dba:      # written substituent -> atom
        return rb["u"], -up
    return rb["v"], up      # written atom -> substituent


def _resolve_stereo(spec, elements, raw_bonds, atoms, a: int, b: int) -> str:
    marked = [rb for rb in raw_bonds if rb["mark"] is not None]
    for rb in marked:
        if a not in (rb["u"], rb["v"]) and b not in (rb["u"], rb["v"]):
            raise ParseError(f"direction mark not adjacent to the double bond in {spec!r}")

    def side_for(end: int):
        sides = []
        for rb in marked:
            if end in (rb["u"], rb["v"]):
                sides.append(_substituent_side(rb, end))
        if len(sides) == 2 and sides[0][1] == sides[1][1]:
            raise ParseError(f"contradictory direction marks at atom {end} in {spec!r}")
        return sides[0] if sides else None

    sa, sb = side_for(a), side_for(b)
    if sa is None or sb is None:
        return STEREO_NONE

    def oriented_side(end: int, sub: int, side: int):
        # flip to the side of the highest-priority substituent at this end
        others = [rb["u"] if rb["v"] == end else rb["v"]
                  for rb in raw_bonds
                  if end in (rb["u"], rb["v"]) and rb["order"] == 1 and sub not in (rb["u"], rb["v"])]
        other_priority = max((_PRIORITY[elements[o]] for o in others), default=_PRIORITY["H"])
        mine = _PRIORITY[elements[sub]]
        if mine == other_priority:
            return None  # indistinguishable substituents: no stereo descriptor
        return side if mine > other_priority else -side

    ha = oriented_side(a, *sa)
    hb = oriented_side(b, *sb)
    if ha is None or hb is None:
        return STEREO_NONE
    return STEREO_Z if ha == hb else STEREO_E


# ---------------------------------------------------------------------------
# Rendering and isomorphism (round-trip support)
# ---------------------------------------------------------------------------

def render_smiles(graph: MoleculeGraph) -> str:
    """Deterministic mini-SMILES for a graph, re-emitting stereo marks."""
    double = next((b for b in graph.bonds if b.order == 2 and b.stereo != STEREO_NONE), None)
    sides: dict[tuple[int, int], int] = {}
    if double is not None:
        sides.update(_stereo_plan(graph, double))

    root = min((i for i, at in enumerate(graph.atoms) if at.degree == 1), default=0)
    out: list[str] = []

    def emit_bond(parent: int, child: int, bond: Bond):
        if bond.order == 2:
            out.append("=")
            return
        side = sides.get((min(parent, child), max(parent, child)))
        if side is None:
            return
        dba, sub = (parent, child) if _on_double(graph, parent) else (child, parent)
        if sub == parent:   # substituent written before the double-bond atom
            out.append("/" if side < 0 else "\\")
        else:
            out.append("/" if side > 0 else "\\")

    def walk(node: int, parent: int | None):
        out.append(graph.atoms[node].element)
        children = [(j, b) for j, b in graph.neighbors(node) if j != parent]
        for k, (j, b) in enumerate(children):
            last = k == len(children) - 1
            if not last:
                out.append("(")
            emit_bond(node, j, b)
            walk(j, node)
            if not last:
                out.append(")")

    walk(root, None)
    return "".join(out)


def _on_double(graph: MoleculeGraph, idx: int) -> bool:
    return any(b.order == 2 and idx in (b.i, b.j) for b in graph.bonds)


def _stereo_plan(graph: MoleculeGraph, double: Bond) -> dict:
    """Pick one marked substituent per double-bond end and assign sides that
    reproduce the stored E/Z label on re-parse."""
    def chosen(end: int):
        subs = [(j, b) for j, b in graph.neighbors(end) if b.order == 1]
        if not subs:
            return None
        return max(subs, key=lambda jb: _PRIORITY[graph.atoms[jb[0]].element])

    ca, cb = chosen(double.i), chosen(double.j)
    if ca is None or cb is None:
        return {}
    side_a = 1
    side_b = side_a if double.stereo == STEREO_Z else -side_a
    return {
        (min(double.i, ca[0]), max(double.i, ca[0])): side_a,
        (min(double.j, cb[0]), max(double.j, cb[0])): side_b,
    }


def canonical_code(graph: MoleculeGraph) -> str:
    """Canonical label-aware tree code; equal codes mean isomorphic graphs
    (element, hydrogen count, bond order, and stereo all preserved)."""
    n = len(graph.atoms)
    adj = {i: graph.neighbors(i) for i in range(n)}

    def prune_centroids() -> list[int]:
        degree = {i: len(adj[i]) for i in range(n)}
        remaining = set(range(n))
        leaves = [i for i in remaining if degree[i] <= 1]
        while len(remaining) > 2:
            nxt = []
            for leaf in leaves:
                remaining.discard(leaf)
                for j, _ in adj[leaf]:
                    if j in remaining:
                        degree[j] -= 1
                        if degree[j] == 1:
                            nxt.append(j)
            leaves = nxt
        return sorted(remaining)

    def code(v: int, parent: int | None) -> str:
        at = graph.atoms[v]
        children = []
        for j, b in adj[v]:
            if j == parent:
                continue
            children.append(f"{b.order}{b.stereo}{code(j, v)}")
        return f"({at.element}{at.hydrogens}" + "".join(sorted(children)) + ")"

    return min(code(c, None) for c in prune_centroids())


def isomorphic(g1: MoleculeGraph, g2: MoleculeGraph) -> bool:
    return canonical_code(g1) == canonical_code(g2)


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------

def featurize(graph: MoleculeGraph) -> tuple[np.ndarray, np.ndarray]:
    """One-hot feature blocks in fixed order.

    Nodes (12): atom type (C, F) | degree 1-4 | hybridization (sp2, sp3) |
    hydrogens 0-3.  Edges (5): bond type (single, double) | stereo
    (none, Z, E); one row per bond, in graph bond order.
    """
    nodes = np.zeros((len(graph.atoms), NODE_FEATURES))
    for i, at in enumerate(graph.atoms):
        nodes[i, 0 if at.element == "C" else 1] = 1.0
        nodes[i, 2 + (at.degree - 1)] = 1.0
        nodes[i, 6 + (0 if at.hybridization == "sp2" else 1)] = 1.0
        nodes[i, 8 + at.hydrogens] = 1.0

    edges = np.zeros((len(graph.bonds), EDGE_FEATURES))
    stereo_slot = {STEREO_NONE: 0, STEREO_Z: 1, STEREO_E: 2}
    for k, b in enumerate(graph.bonds):
        edges[k, 0 if b.order == 1 else 1] = 1.0
        edges[k, 2 + stereo_slot[b.stereo]] = 1.0
    return nodes, edges


# ---------------------------------------------------------------------------
# Graph neural network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GnnWeights:
    """Message-passing, attention, and readout parameters (flat name map)."""

    params: dict

    def __post_init__(self):
        out_w = de.value_of(self.params["gnn.out.w"])
        if out_w.shape[0] != EMBED_DIM:
            raise ValueError(f"representation dimension must be {EMBED_DIM}, got {out_w.shape[0]}")


def gnn_param_shapes() -> dict[str, tuple]:
    shapes = {
        "gnn.node.w": (HIDDEN, NODE_FEATURES),
        "gnn.node.b": (HIDDEN,),
        "gnn.read.w": (ATT_HIDDEN, HIDDEN),
        "gnn.read.b": (ATT_HIDDEN,),
        "gnn.read.v": (1, ATT_HIDDEN),
        "gnn.out.w": (EMBED_DIM, HIDDEN),
        "gnn.out.b": (EMBED_DIM,),
    }
    for layer in range(N_LAYERS):
        shapes[f"gnn.l{layer}.msg.w"] = (HIDDEN, HIDDEN + EDGE_FEATURES)
        shapes[f"gnn.l{layer}.msg.b"] = (HIDDEN,)
        shapes[f"gnn.l{layer}.att.w"] = (ATT_HIDDEN, 2 * HIDDEN + EDGE_FEATURES)
        shapes[f"gnn.l{layer}.att.b"] = (ATT_HIDDEN,)
        shapes[f"gnn.l{layer}.att.v"] = (1, ATT_HIDDEN)
        shapes[f"gnn.l{layer}.upd.w"] = (HIDDEN, 2 * HIDDEN)
        shapes[f"gnn.l{layer}.upd.b"] = (HIDDEN,)
    return shapes


def init_gnn_params(rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in gnn_param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[-1] if len(shape) > 1 else shape[0]
            fan_out = shape[0]
            std = np.sqrt(2.0 / (fan_in + fan_out))
            params[name] = rng.normal(0.0, std, size=shape)
    return params


def _sorted_sum(x, axis=0, keepdims=True):
    """Sum along an axis in value-sorted order: bitwise invariant under any
    permutation of the addends (softmax groups, readout pools)."""
    order = np.argsort(de.value_of(x), axis=axis, kind="stable")
    if isinstance(x, de.Var):
        cols = np.broadcast_to(np.arange(x.shape[1])[None, :], x.shape)
        gathered = x[(order, cols)] if axis == 0 else x
        return gathered.sum(axis=axis, keepdims=keepdims)
    gathered = np.take_along_axis(x, order, axis=axis)
    return gathered.sum(axis=axis, keepdims=keepdims)


def _softmax_weights(logits):
    """Column softmax with a detached max shift (shift-invariant, so treating
    the max as constant keeps gradients exact)."""
    shift = float(np.max(de.value_of(logits)))
    ex = de.exp(logits - shift)
    return ex / _sorted_sum(ex, axis=0, keepdims=True)


def _affine(x, w, b=None):
    """Row-at-a-time affine map x @ w.T (+ b).

    One BLAS call per row keeps each output row's rounding independent of
    how the batch happens to be laid out, which the bitwise
    permutation-invariance contract needs.
    """
    wt = _t(w)
    rows = []
    for i in range(de.value_of(x).shape[0]):
        r = x[np.array([i])] @ wt
        rows.append(r if b is None else r + b)
    return de.concat(rows, axis=0)


def _t(w):
    return de.transpose(w)


def gnn_forward(graph: MoleculeGraph, params: Mapping, n_layers: int = N_LAYERS):
    """Embedding of a molecule; returns a (1, EMBED_DIM) row.

    Works on plain arrays or recorded-graph parameters.  All node/neighbor
    reductions go through value-sorted summation, so the result is bitwise
    invariant under relabeling of the input graph.
    """
    node_x, edge_x = featurize(graph)
    n = node_x.shape[0]

    src, dst, efeat = [], [], []
    for k, b in enumerate(graph.bonds):
        src += [b.i, b.j]
        dst += [b.j, b.i]
        efeat += [edge_x[k], edge_x[k]]
    src = np.array(src)
    dst = np.array(dst)
    efeat = np.stack(efeat)

    h = de.tanh(_affine(node_x, params["gnn.node.w"], params["gnn.node.b"]))

    for layer in range(n_layers):
        p = lambda leaf: params[f"gnn.l{layer}.{leaf}"]
        h_src, h_dst = h[src], h[dst]
        msg_in = de.concat([h_src, efeat], axis=1)
        msgs = de.tanh(_affine(msg_in, p("msg.w"), p("msg.b")))
        att_in = de.concat([h_dst, h_src, efeat], axis=1)
        logits = _affine(de.tanh(_affine(att_in, p("att.w"), p("att.b"))), p("att.v"))

        rows = []
        for i in range(n):
            mask = np.nonzero(dst == i)[0]
            alpha = _softmax_weights(logits[mask])
            pooled = _sorted_sum(alpha * msgs[mask], axis=0, keepdims=True)
            upd_in = de.concat([h[np.array([i])], pooled], axis=1)
            rows.append(de.tanh(_affine(upd_in, p("upd.w"), p("upd.b"))))
        h = de.concat(rows, axis=0)

    read_logits = _affine(de.tanh(_affine(h, params["gnn.read.w"], params["gnn.read.b"])),
                          params["gnn.read.v"])
    beta = _softmax_weights(read_logits)
    pooled = _sorted_sum(beta * h, axis=0, keepdims=True)
    return _affine(pooled, params["gnn.out.w"], params["gnn.out.b"])


def gnn_embed(graph: MoleculeGraph, weights: GnnWeights) -> np.ndarray:
    """Finite EMBED_DIM representation vector, invariant under node relabeling."""
    out = gnn_forward(graph, weights.params)
    r = de.value_of(out).reshape(EMBED_DIM)
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite representation vector")
    return r


def similarity(r_o, r_j):
    """Elementwise similarity vector (r_o ⊙ r_j) / (||r_o|| ||r_j||).

    Sums to the cosine similarity of the two representations.
    """
    norm_o = de.sqrt((r_o * r_o).sum() if isinstance(r_o, de.Var) else float(np.sum(de.value_of(r_o) ** 2)))
    norm_j = de.sqrt((r_j * r_j).sum() if isinstance(r_j, de.Var) else float(np.sum(de.value_of(r_j) ** 2)))
    if float(de.value_of(norm_o)) < 1e-12 or float(de.value_of(norm_j)) < 1e-12:
        raise DegenerateRepresentation("representation norm below 1e-12")
    return (r_o * r_j) / (norm_o * norm_j)
