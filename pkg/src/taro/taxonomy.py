"""Class hierarchy as a directed forest.

The taxonomy file format is one edge per line, ``Parent -> Child``. Lines
starting with ``#`` are comments and a line holding a bare name declares an
isolated node (a root that is also a leaf).

Node ids are dense integers. Non-leaf nodes come first, then leaves, each
block ordered by (depth, name), so the leaves always occupy the contiguous
range ``forest.leaf_slice``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "TaxonomyError",
    "DuplicateNodeError",
    "MultipleParentsError",
    "CycleError",
    "EmptyTaxonomyError",
    "NodeRecord",
    "TaxonomyForest",
    "parse_taxonomy",
    "load_taxonomy",
    "serialize_taxonomy",
    "ancestors",
    "multi_hot_target",
    "validate",
]

ARROW = "->"


class TaxonomyError(ValueError):
    """Raised for malformed taxonomy documents or invalid node queries."""


class DuplicateNodeError(TaxonomyError):
    pass


class MultipleParentsError(TaxonomyError):
    pass


class CycleError(TaxonomyError):
    pass


class EmptyTaxonomyError(TaxonomyError):
    pass


@dataclass(frozen=True)
class NodeRecord:
    id: int
    name: str
    depth: int


@dataclass(frozen=True, eq=False)
class TaxonomyForest:
    """Immutable directed forest over class nodes.

    Build it with :func:`parse_taxonomy` or :meth:`from_edges`; the
    constructor trusts its arguments.
    """

    nodes: tuple[NodeRecord, ...]
    edges: frozenset[tuple[int, int]]
    parent_of: tuple[int | None, ...]
    name_to_id: dict[str, int] = field(repr=False)
    n_nonleaf: int = 0

    # -- construction -----------------------------------------------------

    @classmethod
    def from_edges(
        cls,
        edges: Iterable[tuple[str, str]],
        isolated: Iterable[str] = (),
    ) -> "TaxonomyForest":
        """Build a validated forest from named ``(parent, child)`` edges."""
        edges = list(edges)
        isolated = list(isolated)
        names: list[str] = []
        seen: set[str] = set()
        for a, b in edges:
            for n in (a, b):
                if n not in seen:
                    seen.add(n)
                    names.append(n)
        for n in isolated:
            if n in seen:
                raise DuplicateNodeError(f"duplicate node name: {n!r}")
            seen.add(n)
            names.append(n)
        if not names:
            raise EmptyTaxonomyError("taxonomy has no nodes")
        for n in names:
            if not n:
                raise TaxonomyError("node names must be non-empty")

        parent: dict[str, str] = {}
        children: dict[str, list[str]] = {n: [] for n in names}
        for a, b in edges:
            if a == b:
                raise CycleError(f"cycle detected: {a!r} -> {a!r}")
            if b in parent:
                if parent[b] == a:
                    raise DuplicateNodeError(f"duplicate edge: {a!r} -> {b!r}")
                raise MultipleParentsError(
                    f"node {b!r} has two parents: {parent[b]!r} and {a!r}"
                )
            parent[b] = a
            children[a].append(b)

        depth: dict[str, int] = {}
        for n in names:
            chain = []
            cur = n
            on_chain = set()
            while cur not in depth:
                if cur in on_chain:
                    raise CycleError(f"cycle detected through {cur!r}")
                on_chain.add(cur)
                chain.append(cur)
                if cur not in parent:
                    depth[cur] = 0
                    chain.pop()
                    break
                cur = parent[cur]
            for c in reversed(chain):
                depth[c] = depth[parent[c]] + 1

        nonleaf = sorted((n for n in names if children[n]), key=lambda n: (depth[n], n))
        leaves = sorted((n for n in names if not children[n]), key=lambda n: (depth[n], n))
        order = nonleaf + leaves
        name_to_id = {n: i for i, n in enumerate(order)}
        nodes = tuple(NodeRecord(i, n, depth[n]) for i, n in enumerate(order))
        parent_of = tuple(name_to_id[parent[n]] if n in parent else None for n in order)
        edge_ids = frozenset((name_to_id[a], name_to_id[b]) for a, b in edges)
        return cls(nodes, edge_ids, parent_of, name_to_id, len(nonleaf))

    # -- structural queries -----------------------------------------------

    def __len__(self) -> int:
        return len(self.nodes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TaxonomyForest):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and self.edges == other.edges
            and self.parent_of == other.parent_of
        )

    def __hash__(self) -> int:
        return hash((self.nodes, self.edges))

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    @property
    def leaf_slice(self) -> slice:
        return slice(self.n_nonleaf, len(self.nodes))

    @property
    def leaves(self) -> list[int]:
        return list(range(self.n_nonleaf, len(self.nodes)))

    @property
    def nonleaves(self) -> list[int]:
        return list(range(self.n_nonleaf))

    @property
    def roots(self) -> list[int]:
        return [i for i, p in enumerate(self.parent_of) if p is None]

    @property
    def depths(self) -> np.ndarray:
        return np.array([n.depth for n in self.nodes], dtype=int)

    @property
    def max_depth(self) -> int:
        return max(n.depth for n in self.nodes)

    def is_leaf(self, node: int) -> bool:
        self._check(node)
        return node >= self.n_nonleaf

    def parent(self, node: int) -> int | None:
        self._check(node)
        return self.parent_of[node]

    def children(self, node: int) -> list[int]:
        self._check(node)
        return sorted(c for p, c in self.edges if p == node)

    def id(self, name: str) -> int:
        try:
            return self.name_to_id[name]
        except KeyError:
            raise TaxonomyError(f"unknown class name: {name!r}") from None

    def name(self, node: int) -> str:
        self._check(node)
        return self.nodes[node].name

    def _check(self, node: int) -> None:
        if not (isinstance(node, (int, np.integer)) and 0 <= node < len(self.nodes)):
            raise TaxonomyError(f"unknown node id: {node!r}")


def parse_taxonomy(text: str) -> TaxonomyForest:
    edges: list[tuple[str, str]] = []
    isolated: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ARROW in line:
            parts = [p.strip() for p in line.split(ARROW)]
            if len(parts) != 2 or not all(parts):
                raise TaxonomyError(f"line {lineno}: malformed edge {raw!r}")
            edges.append((parts[0], parts[1]))
        else:
            if line in isolated:
                raise DuplicateNodeError(f"line {lineno}: duplicate node name {line!r}")
            isolated.append(line)
    if not edges and not isolated:
        raise EmptyTaxonomyError("taxonomy document is empty")
    return TaxonomyForest.from_edges(edges, isolated)


def load_taxonomy(path: str | Path) -> TaxonomyForest:
    return parse_taxonomy(Path(path).read_text(encoding="utf-8"))


def serialize_taxonomy(forest: TaxonomyForest) -> str:
    lines = []
    for node in forest.nodes:
        p = forest.parent_of[node.id]
        if p is not None:
            lines.append(f"{forest.nodes[p].name} {ARROW} {node.name}")
        elif forest.is_leaf(node.id):
            lines.append(node.name)
    return "\n".join(lines) + "\n"


def ancestors(forest: TaxonomyForest, node: int) -> list[int]:
    """Ancestors of ``node``, nearest (parent) first, ending at the root."""
    forest._check(node)
    out = []
    p = forest.parent_of[node]
    while p is not None:
        out.append(p)
        p = forest.parent_of[p]
    return out


def multi_hot_target(forest: TaxonomyForest, leaf: int) -> np.ndarray:
    """0/1 vector over all nodes with ones at ``leaf`` and each of its ancestors."""
    if not forest.is_leaf(leaf):
        raise TaxonomyError(f"node {forest.name(leaf)!r} is not a leaf")
    t = np.zeros(len(forest))
    t[leaf] = 1.0
    t[ancestors(forest, leaf)] = 1.0
    return t


def validate(obj: TaxonomyForest | Sequence[tuple[str, str]]) -> list[str]:
    """Check forest invariants; returns a list of diagnostics (empty when ok).

    Accepts either a built forest or a raw sequence of named edges, so that
    structures which could never be built (cycles, two parents) can still be
    diagnosed.
    """
    if isinstance(obj, TaxonomyForest):
        names = obj.names
        edges = [(names[a], names[b]) for a, b in sorted(obj.edges)]
        nodes = list(names)
    else:
        edges = [(str(a), str(b)) for a, b in obj]
        nodes = list(dict.fromkeys(n for e in edges for n in e))

    diags = []
    if not nodes:
        return ["empty: taxonomy has no nodes"]
    if any(not n for n in nodes):
        diags.append("empty-name: node names must be non-empty")
    if len(set(nodes)) != len(nodes):
        diags.append("duplicate: node names are not unique")

    parents: dict[str, list[str]] = {}
    for a, b in edges:
        parents.setdefault(b, []).append(a)
    for child, ps in parents.items():
        if len(ps) > 1:
            diags.append(f"two-parents: {child!r} has parents {sorted(ps)!r}")

    # cycle search over the edge relation (works with multiple parents too)
    succ: dict[str, list[str]] = {}
    for a, b in edges:
        succ.setdefault(a, []).append(b)
    state: dict[str, int] = {}
    cyclic: set[str] = set()
    for start in nodes:
        if state.get(start):
            continue
        stack = [(start, iter(succ.get(start, ())))]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state.get(nxt) == 1:
                cyclic.add(nxt)
            elif not state.get(nxt):
                state[nxt] = 1
                stack.append((nxt, iter(succ.get(nxt, ()))))
    for n in sorted(cyclic):
        diags.append(f"cycle: through {n!r}")

    if isinstance(obj, TaxonomyForest) and not diags:
        for node in obj.nodes:
            p = obj.parent_of[node.id]
            want = 0 if p is None else obj.nodes[p].depth + 1
            if node.depth != want:
                diags.append(f"depth: {node.name!r} has depth {node.depth}, expected {want}")
            has_children = any(a == node.id for a, _ in obj.edges)
            if has_children == obj.is_leaf(node.id):
                diags.append(f"leaf-block: {node.name!r} misplaced in id order")
    return diags
