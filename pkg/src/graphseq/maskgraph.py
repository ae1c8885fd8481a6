"""Derived graphs over a serialization and token-aligned attention masks.

Two derived graphs drive message passing. The *edge graph* treats each
serialized edge as a node, with an arc (j, k) whenever edges j and k share
an endpoint and k > j, so information only flows forward in the token
sequence. The *correspondence graph* treats each occurrence of a node in
the serialization as its own node, linking adjacent occurrences of the
same source node, earlier to later. Edge and instance positions are
1-based, matching their order of appearance; alignments map them to
0-based token indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import IncrementalParser, SerializedGraph, incremental_parse
from .graphs import TextGraph

MASK_KINDS = ("causal", "graph", "causal_graph")


class AlignmentMismatchError(ValueError):
    """A serialized graph does not describe the given source graph."""


@dataclass(frozen=True)
class EdgeGraph:
    """Nodes are the M serialized edges (positions 1..M); arcs (j, k) with
    k > j connect edges sharing a source-graph node."""

    num_nodes: int
    arcs: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class CorrespondenceGraph:
    """Nodes are (source node, occurrence) instances in serialization order
    (positions 1..num instances); arcs join adjacent occurrences of the
    same source node, earlier to later."""

    instances: tuple[tuple[int, int], ...]
    arcs: tuple[tuple[int, int], ...]

    @property
    def num_nodes(self) -> int:
        return len(self.instances)


def _parsed_edges(sg: SerializedGraph, g: TextGraph) -> list[tuple[int, int]]:
    """Map serialization positions to source edge endpoints, validating that
    the serialization actually describes ``g``."""
    parser = incremental_parse(sg.tokens, complete=True)
    if parser.malformed:
        raise AlignmentMismatchError("serialized graph does not parse")
    by_triple = {
        (g.nodes[e.pred], e.label, g.nodes[e.succ]): (e.pred, e.succ) for e in g.edges
    }
    if len(by_triple) != g.num_edges or len(parser.edges) != g.num_edges:
        raise AlignmentMismatchError("edge sets of serialization and graph differ")
    endpoints = []
    for triple in parser.edges:
        if triple not in by_triple:
            raise AlignmentMismatchError(f"serialized edge {triple} not in graph")
        endpoints.append(by_triple[triple])
    if list(parser.edge_last_token) != list(sg.edge_last_token):
        raise AlignmentMismatchError("edge_last_token table does not match tokens")
    return endpoints


def _shared_endpoint_arcs(endpoint_sets: list[frozenset]) -> list[tuple[int, int]]:
    arcs = []
    for j in range(len(endpoint_sets)):
        for k in range(j + 1, len(endpoint_sets)):
            if endpoint_sets[j] & endpoint_sets[k]:
                arcs.append((j + 1, k + 1))
    return arcs


def build_edge_graph(sg: SerializedGraph, g: TextGraph) -> EdgeGraph:
    endpoints = _parsed_edges(sg, g)
    sets = [frozenset(pair) for pair in endpoints]
    return EdgeGraph(num_nodes=len(sets), arcs=tuple(_shared_endpoint_arcs(sets)))


def build_correspondence_graph(sg: SerializedGraph, g: TextGraph) -> CorrespondenceGraph:
    _parsed_edges(sg, g)
    instances = tuple((inst.node, inst.occurrence) for inst in sg.node_instance_spans)
    last_seen: dict[int, int] = {}
    arcs = []
    for i, (node, _occ) in enumerate(instances, start=1):
        if node in last_seen:
            arcs.append((last_seen[node], i))
        last_seen[node] = i
    return CorrespondenceGraph(instances=instances, arcs=tuple(arcs))


def edge_graph_alignment(sg: SerializedGraph, offset: int = 0) -> np.ndarray:
    """Token position of the last token of each serialized edge."""
    return np.asarray(sg.edge_last_token, dtype=np.int64) + offset


def correspondence_alignment(sg: SerializedGraph, offset: int = 0) -> np.ndarray:
    """Token position of the last token of each node occurrence."""
    return np.asarray([s.last_token for s in sg.node_instance_spans], dtype=np.int64) + offset


@dataclass(frozen=True)
class MpStructure:
    """A derived graph flattened for message passing: 0-based arcs between
    derived nodes plus each node's aligned token position."""

    positions: np.ndarray  # (K,) int64 token indices
    arcs: tuple[tuple[int, int], ...]  # 0-based (src, dst), src < dst

    @property
    def num_nodes(self) -> int:
        return int(self.positions.shape[0])


def mp_structure_from_state(parser: IncrementalParser, mode: str, offset: int = 0) -> MpStructure:
    """Build the message-passing structure over the portion of a token
    prefix that is already closed: completed edges for ``edges`` mode,
    closed node-label occurrences for ``correspondences`` mode. Used both
    for teacher-forced batches and step-by-step during sampling."""
    if mode == "edges":
        positions = np.asarray(parser.edge_last_token, dtype=np.int64) + offset
        sets = [frozenset((p, s)) for p, _l, s in parser.edges]
        arcs = tuple((j - 1, k - 1) for j, k in _shared_endpoint_arcs(sets))
        return MpStructure(positions=positions, arcs=arcs)
    if mode == "correspondences":
        positions = np.asarray([t[2] for t in parser.node_instances], dtype=np.int64) + offset
        last_seen: dict[str, int] = {}
        arcs = []
        for i, (label, _occ, _pos) in enumerate(parser.node_instances):
            if label in last_seen:
                arcs.append((last_seen[label], i))
            last_seen[label] = i
        return MpStructure(positions=positions, arcs=tuple(arcs))
    raise ValueError(f"unknown message-passing mode {mode!r}")


def mp_structure_from_serialized(sg: SerializedGraph, g: TextGraph, mode: str, offset: int = 0) -> MpStructure:
    """Same structure as ``mp_structure_from_state`` but built from the
    serialization tables and source graph (cross-checks the alignment)."""
    if mode == "edges":
        graph = build_edge_graph(sg, g)
        positions = edge_graph_alignment(sg, offset)
        arcs = tuple((j - 1, k - 1) for j, k in graph.arcs)
    elif mode == "correspondences":
        graph = build_correspondence_graph(sg, g)
        positions = correspondence_alignment(sg, offset)
        arcs = tuple((i - 1, j - 1) for i, j in graph.arcs)
    else:
        raise ValueError(f"unknown message-passing mode {mode!r}")
    return MpStructure(positions=positions, arcs=arcs)


def build_mask(
    kind: str,
    seq_len: int,
    ref_graph: EdgeGraph | CorrespondenceGraph | None = None,
    alignment: np.ndarray | None = None,
) -> np.ndarray:
    """Boolean attention mask over token positions; entry (q, s) says
    whether position q may attend to position s.

    ``causal`` allows s <= q. ``graph`` allows self-attention plus pairs of
    positions aligned to neighboring derived-graph nodes, in both
    directions. ``causal_graph`` is their elementwise AND.
    """
    if kind not in MASK_KINDS:
        raise ValueError(f"unknown mask kind {kind!r}")
    causal = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    if kind == "causal":
        return causal
    if ref_graph is None or alignment is None:
        raise ValueError(f"mask kind {kind!r} needs ref_graph and alignment")
    positions = np.asarray(alignment, dtype=np.int64)
    if positions.shape[0] != ref_graph.num_nodes:
        raise ValueError("alignment length does not match derived-graph size")
    if positions.size and (positions.min() < 0 or positions.max() >= seq_len):
        raise ValueError("alignment position out of range")
    graph = np.eye(seq_len, dtype=bool)
    for j, k in ref_graph.arcs:
        pj, pk = positions[j - 1], positions[k - 1]
        graph[pk, pj] = True
        graph[pj, pk] = True
    if kind == "graph":
        return graph
    return causal & graph


def format_mask(mask: np.ndarray) -> str:
    """Debug dump: one row per line of 0/1 characters."""
    return "\n".join("".join("1" if v else "0" for v in row) for row in np.asarray(mask, dtype=bool))
