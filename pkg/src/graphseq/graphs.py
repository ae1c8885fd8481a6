"""Text-graph data model and structural queries.

A text graph is a directed graph whose nodes and edges carry free-text
labels. Graphs are immutable after construction and validated up front:
every edge endpoint must exist, directed (pred, succ, label) triples must
be unique, and isolated nodes are rejected because the edge-list
serialization cannot represent them.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from itertools import permutations, product
from typing import Iterable, NamedTuple, Sequence

# Marker appended to node labels to tell apart nodes that share a label,
# e.g. "C<D>0", "C<D>1". The codec module assigns the suffixes; equality
# checks strip them again so that differently-numbered but isomorphic
# graphs compare equal.
DISAMBIG_MARK = "<D>"

_DISAMBIG_SUFFIX_RE = re.compile(r"^(.+)<D>([0-9]+)$", re.DOTALL)

PROPERTY_KINDS = ("valency_electrons", "ring_count")

_DESCRIPTION_TEMPLATES = {
    "valency_electrons": "a molecule with number of valence electrons equal to {}",
    "ring_count": "a molecule with number of rings equal to {}",
}


class GraphError(ValueError):
    """Raised when a graph violates a structural invariant at construction."""


class RecordError(ValueError):
    """Raised on a malformed dataset record line."""


class Edge(NamedTuple):
    pred: int
    succ: int
    label: str


@dataclass(frozen=True)
class TextGraph:
    """Directed graph with string-labeled nodes and edges.

    ``nodes[i]`` is the label of node id ``i``; ids are dense integers in
    insertion order. ``edges`` is an ordered tuple of ``Edge`` records.
    """

    nodes: tuple[str, ...]
    edges: tuple[Edge, ...]

    def __init__(self, nodes: Sequence[str], edges: Iterable[tuple[int, int, str]]):
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "edges", tuple(Edge(*e) for e in edges))
        self._validate()

    def _validate(self) -> None:
        n = len(self.nodes)
        for label in self.nodes:
            if not isinstance(label, str) or not label:
                raise GraphError("node labels must be non-empty strings")
        touched = set()
        seen = set()
        for e in self.edges:
            if not (0 <= e.pred < n and 0 <= e.succ < n):
                raise GraphError(f"edge {e} references a missing node id")
            if not isinstance(e.label, str) or not e.label:
                raise GraphError("edge labels must be non-empty strings")
            if e in seen:
                raise GraphError(f"duplicate edge {e}")
            seen.add(e)
            touched.add(e.pred)
            touched.add(e.succ)
        if len(touched) != n:
            isolated = sorted(set(range(n)) - touched)
            raise GraphError(f"isolated nodes are not representable: {isolated}")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)


def strip_disambiguation(label: str) -> str:
    """Remove a trailing ``<D>k`` suffix from a label, if present."""
    m = _DISAMBIG_SUFFIX_RE.match(label)
    return m.group(1) if m else label


def degree_sequence(g: TextGraph) -> list[int]:
    """Sorted total degree (in + out) per node."""
    deg = [0] * g.num_nodes
    for e in g.edges:
        deg[e.pred] += 1
        deg[e.succ] += 1
    return sorted(deg)


def canonical_key(g: TextGraph):
    """Hashable canonical form of a graph, invariant to node ids and to the
    particular disambiguation indices carried by node labels.

    Edge triples are sorted by their suffix-stripped labels, nodes are then
    re-numbered within each label group by first occurrence in that order,
    and the decorated triples are sorted again. Two graphs with equal keys
    always admit a label-preserving node bijection; the converse can fail
    for adversarial edge orderings, which ``graph_equal`` covers with a
    brute-force fallback on small graphs.
    """
    raw = [strip_disambiguation(lbl) for lbl in g.nodes]
    triples = sorted(
        ((raw[e.pred], e.label, raw[e.succ], e.pred, e.succ) for e in g.edges),
        key=lambda t: t[:3],
    )
    occurrence: dict[int, int] = {}
    counters: Counter = Counter()
    for praw, _lbl, sraw, p, s in triples:
        for nid, nraw in ((p, praw), (s, sraw)):
            if nid not in occurrence:
                occurrence[nid] = counters[nraw]
                counters[nraw] += 1
    decorated = sorted(
        (praw, occurrence[p], lbl, sraw, occurrence[s])
        for praw, lbl, sraw, p, s in triples
    )
    node_multiset = tuple(sorted(Counter(raw).items()))
    return node_multiset, tuple(decorated)


def _bijection_equal(a: TextGraph, b: TextGraph) -> bool:
    """Exact equality under some bijection of same-raw-label nodes."""
    raw_a = [strip_disambiguation(l) for l in a.nodes]
    raw_b = [strip_disambiguation(l) for l in b.nodes]
    if Counter(raw_a) != Counter(raw_b):
        return False
    if a.num_edges != b.num_edges:
        return False
    if degree_sequence(a) != degree_sequence(b):
        return False
    groups_a: dict[str, list[int]] = {}
    groups_b: dict[str, list[int]] = {}
    for i, lbl in enumerate(raw_a):
        groups_a.setdefault(lbl, []).append(i)
    for i, lbl in enumerate(raw_b):
        groups_b.setdefault(lbl, []).append(i)
    edges_b = {(e.pred, e.succ, e.label) for e in b.edges}
    labels = sorted(groups_a)
    per_group = [list(permutations(groups_b[lbl])) for lbl in labels]
    for combo in product(*per_group):
        mapping: dict[int, int] = {}
        for lbl_idx, perm in enumerate(combo):
            for src, dst in zip(groups_a[labels[lbl_idx]], perm):
                mapping[src] = dst
        if all((mapping[e.pred], mapping[e.succ], e.label) in edges_b for e in a.edges):
            return True
    return False


def graph_equal(a: TextGraph, b: TextGraph) -> bool:
    """True iff the graphs have the same node and edge sets up to a bijection
    of same-label nodes (disambiguation suffixes stripped and re-resolved).

    Checked by canonical-form comparison, with an exact brute-force
    bijection search as fallback for graphs of at most 8 nodes.
    """
    if canonical_key(a) == canonical_key(b):
        return True
    if a.num_nodes <= 8 and b.num_nodes <= 8:
        return _bijection_equal(a, b)
    return False


@dataclass(frozen=True)
class FunctionalDescription:
    """A requested functional property of a graph, rendered as text."""

    property_kind: str
    target_value: float

    def __post_init__(self):
        if self.property_kind not in PROPERTY_KINDS:
            raise ValueError(f"unknown property kind {self.property_kind!r}")

    @property
    def text(self) -> str:
        return render_description(self.property_kind, self.target_value)


def render_description(property_kind: str, target_value: float) -> str:
    """Render a functional description. Targets are decimal integers."""
    if property_kind not in _DESCRIPTION_TEMPLATES:
        raise ValueError(f"unknown property kind {property_kind!r}")
    v = float(target_value)
    if not v.is_integer():
        raise ValueError(f"target values render as integers, got {target_value!r}")
    return _DESCRIPTION_TEMPLATES[property_kind].format(int(v))


_DESCRIPTION_RES = {
    kind: re.compile("^" + re.escape(tpl).replace(re.escape("{}"), r"(-?[0-9]+)") + "$")
    for kind, tpl in _DESCRIPTION_TEMPLATES.items()
}


def parse_description(text: str) -> FunctionalDescription:
    for kind, pattern in _DESCRIPTION_RES.items():
        m = pattern.match(text)
        if m:
            return FunctionalDescription(kind, float(int(m.group(1))))
    raise ValueError(f"unrecognized functional description: {text!r}")


def format_record(desc: str, graph: str) -> str:
    """One dataset record: ``desc=<text>\\tgraph=<serialized graph>``."""
    for name, field in (("desc", desc), ("graph", graph)):
        if "\t" in field or "\n" in field:
            raise RecordError(f"{name} field may not contain tabs or newlines")
    return f"desc={desc}\tgraph={graph}"


def parse_record(line: str) -> tuple[str, str]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 2 or not parts[0].startswith("desc=") or not parts[1].startswith("graph="):
        raise RecordError(f"malformed record line: {line!r}")
    return parts[0][len("desc="):], parts[1][len("graph="):]
