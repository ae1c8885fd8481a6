"""Reversible edge-list serialization of text graphs.

A graph is rendered as one segment per directed edge,
``<PN>pred-label<E>edge-label<SN>succ-label``, with segments concatenated
in a deterministic depth-first-search order. Nodes sharing a label are
first disambiguated by appending ``<D>k`` so the mapping is invertible.
The module also provides the byte-level tokenizer (special markers get
reserved ids 0-7, printable ASCII bytes fill the rest) and an incremental
parser that recovers completed edges from a growing token prefix during
autoregressive generation.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

from .graphs import DISAMBIG_MARK, Edge, TextGraph

SPECIAL_TOKENS = ("<PN>", "<E>", "<SN>", "<D>", "<BOS>", "<EOS>", "<PAD>", "<SEP>")
PN_ID, E_ID, SN_ID, D_ID, BOS_ID, EOS_ID, PAD_ID, SEP_ID = range(8)

_BYTE_MIN, _BYTE_MAX = 0x20, 0x7E  # printable ASCII
_DIGIT_IDS = frozenset(8 + ord(c) - _BYTE_MIN for c in "0123456789")


class CodecError(Exception):
    """Base class for serialization and tokenization failures."""


class EncodingError(CodecError):
    """Text contains a character outside the vocabulary, or an unknown id."""


class GraphSyntaxError(CodecError):
    """A serialized graph string violates the edge-segment grammar."""


class EmptyLabelError(GraphSyntaxError):
    """An edge segment contains an empty label."""


class DuplicateEdgeError(CodecError):
    """The same (pred, succ, label) edge appears twice in a serialization."""


class Vocab:
    """Fixed byte-level vocabulary with reserved special-token ids.

    Ids 0-7 are the special markers in ``SPECIAL_TOKENS`` order; ids 8..102
    cover the printable ASCII bytes 0x20..0x7E. The table is identical
    across runs.
    """

    def __init__(self):
        tokens = list(SPECIAL_TOKENS) + [chr(b) for b in range(_BYTE_MIN, _BYTE_MAX + 1)]
        self.id_to_token: tuple[str, ...] = tuple(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        i = 0
        n = len(text)
        while i < n:
            if text[i] == "<":
                for tok in SPECIAL_TOKENS:
                    if text.startswith(tok, i):
                        ids.append(self.token_to_id[tok])
                        i += len(tok)
                        break
                else:
                    ids.append(self._byte_id(text[i]))
                    i += 1
            else:
                ids.append(self._byte_id(text[i]))
                i += 1
        return ids

    def _byte_id(self, ch: str) -> int:
        b = ord(ch)
        if not (_BYTE_MIN <= b <= _BYTE_MAX):
            raise EncodingError(f"character {ch!r} is outside the byte vocabulary")
        return 8 + b - _BYTE_MIN

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if not (0 <= i < len(self.id_to_token)):
                raise EncodingError(f"unknown token id {i}")
            out.append(self.id_to_token[i])
        return "".join(out)


VOCAB = Vocab()


def encode(text: str) -> list[int]:
    return VOCAB.encode(text)


def decode(ids: Iterable[int]) -> str:
    return VOCAB.decode(ids)


class NodeInstance(NamedTuple):
    """One occurrence of a node in the serialization."""

    node: int
    occurrence: int
    last_token: int


@dataclass(frozen=True)
class SerializedGraph:
    """A serialized graph plus alignment tables back into the token stream.

    ``edge_last_token[i]`` is the 0-based index of the last token describing
    edge position ``k = i + 1`` (edges are numbered from 1 in order of
    appearance). ``node_instance_spans`` lists every node occurrence in
    serialization order with the index of its final label token.
    """

    string: str
    tokens: tuple[int, ...]
    edge_last_token: tuple[int, ...]
    node_instance_spans: tuple[NodeInstance, ...]


def disambiguate(g: TextGraph) -> TextGraph:
    """Append ``<D>k`` (k = 0, 1, ... in node-id order) to labels shared by
    several nodes; unique labels are left unchanged."""
    counts = Counter(g.nodes)
    next_index: Counter = Counter()
    new_labels = []
    for label in g.nodes:
        if counts[label] > 1:
            new_labels.append(f"{label}{DISAMBIG_MARK}{next_index[label]}")
            next_index[label] += 1
        else:
            new_labels.append(label)
    if len(set(new_labels)) != len(new_labels):
        raise ValueError("disambiguation collided with existing label suffixes")
    return TextGraph(new_labels, [tuple(e) for e in g.edges])


def _validate_label_tokens(ids: Sequence[int], what: str) -> None:
    if not ids:
        raise ValueError(f"{what} label is empty")
    saw_d = False
    digits = 0
    for pos, t in enumerate(ids):
        if t == D_ID:
            if saw_d or pos == 0:
                raise ValueError(f"{what} label has a misplaced {DISAMBIG_MARK} marker")
            saw_d = True
        elif t < 8:
            raise ValueError(f"{what} label contains a reserved marker")
        elif saw_d:
            if t not in _DIGIT_IDS:
                raise ValueError(f"{what} label has non-digit text after {DISAMBIG_MARK}")
            digits += 1
    if saw_d and digits == 0:
        raise ValueError(f"{what} label ends in a bare {DISAMBIG_MARK}")


def _dfs_edge_order(g: TextGraph, root: int | None) -> list[int]:
    """Edge indices in depth-first order: start at ``root`` (default: lowest
    node id), incident edges taken in ascending (label, succ, pred) order,
    each edge emitted when first traversed from either endpoint."""
    incident: list[list[int]] = [[] for _ in range(g.num_nodes)]
    keyed = sorted(range(g.num_edges), key=lambda i: (g.edges[i].label, g.edges[i].succ, g.edges[i].pred))
    for ei in keyed:
        e = g.edges[ei]
        incident[e.pred].append(ei)
        if e.succ != e.pred:
            incident[e.succ].append(ei)
    order: list[int] = []
    emitted = [False] * g.num_edges
    visited = [False] * g.num_nodes
    # Iterative DFS; the stack holds (node, iterator over its incident edges).
    def visit(start: int) -> None:
        visited[start] = True
        stack = [(start, iter(incident[start]))]
        while stack:
            v, it = stack[-1]
            for ei in it:
                if emitted[ei]:
                    continue
                emitted[ei] = True
                order.append(ei)
                e = g.edges[ei]
                u = e.succ if e.pred == v else e.pred
                if not visited[u]:
                    visited[u] = True
                    stack.append((u, iter(incident[u])))
                break
            else:
                stack.pop()

    starts = [] if root is None else [root]
    starts.extend(range(g.num_nodes))
    for s in starts:
        if not visited[s]:
            visit(s)
    return order


def serialize(g: TextGraph, root: int | None = None, edge_order: Sequence[int] | None = None) -> SerializedGraph:
    """Serialize a disambiguated graph (pairwise-distinct node labels).

    ``root`` selects the DFS start node; ``edge_order`` overrides the DFS
    with an explicit permutation of edge indices. Raises ``ValueError`` on
    an empty edge set, duplicate labels, or labels that cannot round-trip
    through the grammar.
    """
    if g.num_edges == 0:
        raise ValueError("cannot serialize a graph with no edges")
    if len(set(g.nodes)) != g.num_nodes:
        raise ValueError("graph must be disambiguated before serialization")
    if root is not None and not (0 <= root < g.num_nodes):
        raise ValueError(f"root {root} out of range")

    label_ids: dict[str, list[int]] = {}
    for label in set(g.nodes) | {e.label for e in g.edges}:
        ids = VOCAB.encode(label)
        _validate_label_tokens(ids, f"{label!r}")
        label_ids[label] = ids

    if edge_order is not None:
        order = list(edge_order)
        if sorted(order) != list(range(g.num_edges)):
            raise ValueError("edge_order must be a permutation of edge indices")
    else:
        order = _dfs_edge_order(g, root)

    tokens: list[int] = []
    parts: list[str] = []
    edge_last: list[int] = []
    spans: list[NodeInstance] = []
    occurrence: Counter = Counter()

    def emit_node(node: int) -> None:
        tokens.extend(label_ids[g.nodes[node]])
        spans.append(NodeInstance(node, occurrence[node], len(tokens) - 1))
        occurrence[node] += 1

    for ei in order:
        e = g.edges[ei]
        tokens.append(PN_ID)
        emit_node(e.pred)
        tokens.append(E_ID)
        tokens.extend(label_ids[e.label])
        tokens.append(SN_ID)
        emit_node(e.succ)
        edge_last.append(len(tokens) - 1)
        parts.append(f"<PN>{g.nodes[e.pred]}<E>{e.label}<SN>{g.nodes[e.succ]}")

    return SerializedGraph(
        string="".join(parts),
        tokens=tuple(tokens),
        edge_last_token=tuple(edge_last),
        node_instance_spans=tuple(spans),
    )


# Parser states, named for what the next token should supply.
EXPECT_PN = "expect_pn"
EXPECT_PN_LABEL = "expect_pn_label"
EXPECT_E_LABEL = "expect_e_label"
EXPECT_SN_LABEL = "expect_sn_label"
MALFORMED = "malformed"

_ERR_SYNTAX = "syntax"
_ERR_EMPTY_LABEL = "empty_label"
_ERR_DUPLICATE = "duplicate_edge"


class IncrementalParser:
    """Streaming parser over a (possibly malformed) serialization prefix.

    Feed token ids with ``push``; at any point the parser exposes the
    completed edges, their last-token positions, the closed node-label
    occurrences, and the current state. An edge counts as completed only
    once the token *after* its successor label has been seen (or ``finish``
    declares the input complete), because only then is the label known to
    have ended. Malformed input freezes the structure instead of raising,
    so generation can continue and the sample be scored unparsable later.
    """

    def __init__(self):
        self.edges: list[tuple[str, str, str]] = []
        self.edge_last_token: list[int] = []
        self.node_instances: list[tuple[str, int, int]] = []  # (label, occurrence, last_token)
        self.state = EXPECT_PN
        self.error: tuple[str, int] | None = None
        self._pos = -1
        self._label: list[int] = []
        self._saw_d = False
        self._d_digits = 0
        self._pred: str | None = None
        self._edge_label: str | None = None
        self._occurrence: Counter = Counter()
        self._seen_edges: set[tuple[str, str, str]] = set()

    @property
    def malformed(self) -> bool:
        return self.state == MALFORMED

    def _fail(self, kind: str) -> None:
        self.state = MALFORMED
        if self.error is None:
            self.error = (kind, self._pos)

    def _label_valid(self) -> bool:
        if not self._label:
            return False
        return not self._saw_d or self._d_digits > 0

    def _close_label(self) -> str:
        text = VOCAB.decode(self._label)
        self._label = []
        self._saw_d = False
        self._d_digits = 0
        return text

    def _record_instance(self, label: str, last_token: int) -> None:
        self.node_instances.append((label, self._occurrence[label], last_token))
        self._occurrence[label] += 1

    def _close_edge(self, last_token: int) -> None:
        succ = self._close_label()
        self._record_instance(succ, last_token)
        edge = (self._pred, self._edge_label, succ)
        if edge in self._seen_edges:
            # The occurrence above is kept: the succ label itself closed fine.
            self._fail(_ERR_DUPLICATE)
            return
        self._seen_edges.add(edge)
        self.edges.append(edge)
        self.edge_last_token.append(last_token)
        self._pred = None
        self._edge_label = None

    def _push_label_token(self, token: int) -> bool:
        """Accumulate one in-label token; False if it breaks the grammar."""
        if token == D_ID:
            if self._saw_d or not self._label:
                return False
            self._saw_d = True
        elif token < 8:
            return False
        elif self._saw_d:
            if token not in _DIGIT_IDS:
                return False
            self._d_digits += 1
        self._label.append(token)
        return True

    def push(self, token: int) -> None:
        if self.state == MALFORMED:
            return
        self._pos += 1
        pos = self._pos
        if self.state == EXPECT_PN:
            if token == PN_ID:
                self.state = EXPECT_PN_LABEL
            else:
                self._fail(_ERR_SYNTAX)
        elif self.state == EXPECT_PN_LABEL:
            if token == E_ID:
                if not self._label:
                    self._fail(_ERR_EMPTY_LABEL)
                elif not self._label_valid():
                    self._fail(_ERR_SYNTAX)
                else:
                    self._pred = self._close_label()
                    self._record_instance(self._pred, pos - 1)
                    self.state = EXPECT_E_LABEL
            elif not self._push_label_token(token):
                self._fail(_ERR_SYNTAX)
        elif self.state == EXPECT_E_LABEL:
            if token == SN_ID:
                if not self._label:
                    self._fail(_ERR_EMPTY_LABEL)
                elif not self._label_valid():
                    self._fail(_ERR_SYNTAX)
                else:
                    self._edge_label = self._close_label()
                    self.state = EXPECT_SN_LABEL
            elif not self._push_label_token(token):
                self._fail(_ERR_SYNTAX)
        elif self.state == EXPECT_SN_LABEL:
            if token == PN_ID:
                if not self._label:
                    self._fail(_ERR_EMPTY_LABEL)
                elif not self._label_valid():
                    self._fail(_ERR_SYNTAX)
                else:
                    self._close_edge(pos - 1)
                    if self.state != MALFORMED:
                        self.state = EXPECT_PN_LABEL
            elif not self._push_label_token(token):
                self._fail(_ERR_SYNTAX)

    def finish(self) -> None:
        """Declare the input complete, closing the final edge."""
        if self.state == MALFORMED:
            return
        if self.state == EXPECT_SN_LABEL and self._label_valid():
            self._pos += 1
            self._close_edge(self._pos - 1)
        elif self.state == EXPECT_SN_LABEL and self._label:
            self._fail(_ERR_SYNTAX)
        elif self.state == EXPECT_SN_LABEL:
            self._fail(_ERR_EMPTY_LABEL)
        else:
            self._fail(_ERR_SYNTAX)


def incremental_parse(tokens: Iterable[int], complete: bool = False) -> IncrementalParser:
    """Parse a token prefix; with ``complete=True`` the end of input closes
    the final edge (equivalent to ``deserialize`` on valid serializations)."""
    parser = IncrementalParser()
    for t in tokens:
        parser.push(t)
    if complete and not parser.malformed:
        parser.finish()
    return parser


def deserialize(text: str) -> TextGraph:
    """Invert ``serialize``. Node identity is resolved by the full label
    including any ``<D>k`` suffix. Raises ``GraphSyntaxError``,
    ``EmptyLabelError``, or ``DuplicateEdgeError`` on malformed input."""
    try:
        ids = VOCAB.encode(text)
    except EncodingError as exc:
        raise GraphSyntaxError(str(exc)) from exc
    parser = incremental_parse(ids, complete=True)
    if parser.error is not None:
        kind, pos = parser.error
        if kind == _ERR_DUPLICATE:
            raise DuplicateEdgeError(f"duplicate edge at token {pos}")
        if kind == _ERR_EMPTY_LABEL:
            raise EmptyLabelError(f"empty label at token {pos}")
        raise GraphSyntaxError(f"grammar violation at token {pos}")
    if not parser.edges:
        raise GraphSyntaxError("serialization contains no edges")
    node_ids: dict[str, int] = {}
    labels: list[str] = []
    edges: list[tuple[int, int, str]] = []
    for pred, elabel, succ in parser.edges:
        for lbl in (pred, succ):
            if lbl not in node_ids:
                node_ids[lbl] = len(labels)
                labels.append(lbl)
        edges.append((node_ids[pred], node_ids[succ], elabel))
    return TextGraph(labels, edges)
