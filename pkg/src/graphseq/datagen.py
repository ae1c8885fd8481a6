"""Synthetic (functional description, graph) datasets with exact oracles.

Graphs are random connected molecule-like graphs: a random spanning tree
guarantees connectivity, extra edges are added with probability shrinking
in the endpoints' current degree, and degrees are capped at 4. Node labels
are element symbols with known valence-electron counts, so both property
oracles are exactly computable: ``valency_electrons`` depends only on node
composition, ``ring_count`` (the cyclomatic number M - N + components)
only on structure.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import disambiguate, serialize
from .graphs import (
    TextGraph,
    canonical_key,
    format_record,
    parse_record,
    render_description,
    strip_disambiguation,
)

VALENCE_ELECTRONS = {
    "H": 1,
    "C": 4,
    "N": 5,
    "O": 6,
    "F": 7,
    "P": 5,
    "S": 6,
    "Cl": 7,
}

EDGE_LABELS = ("-", "=", "#")


class UnknownElementError(LookupError):
    """A node label is not an element in the valence table."""


class InfeasibleSpecError(RuntimeError):
    """The requested dataset sizes exceed the generatable distinct graphs."""


def valency_electrons(g: TextGraph, table: dict[str, int] | None = None) -> int:
    """Sum of per-element valence electrons over all nodes (disambiguation
    suffixes stripped); structure plays no role."""
    table = VALENCE_ELECTRONS if table is None else table
    total = 0
    for label in g.nodes:
        element = strip_disambiguation(label)
        if element not in table:
            raise UnknownElementError(f"unknown element {element!r}")
        total += table[element]
    return total


def ring_count(g: TextGraph) -> int:
    """Cyclomatic number M - N + C of the underlying undirected graph,
    i.e. the size of a cycle basis."""
    parent = list(range(g.num_nodes))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in g.edges:
        ra, rb = find(e.pred), find(e.succ)
        if ra != rb:
            parent[ra] = rb
    components = sum(1 for i in range(g.num_nodes) if find(i) == i)
    return g.num_edges - g.num_nodes + components


PROPERTY_ORACLES = {
    "valency_electrons": valency_electrons,
    "ring_count": ring_count,
}


def property_value(task: str, g: TextGraph) -> int:
    if task not in PROPERTY_ORACLES:
        raise ValueError(f"unknown task {task!r}")
    return PROPERTY_ORACLES[task](g)


@dataclass(frozen=True)
class DatasetSpec:
    task: str = "valency_electrons"
    train_size: int = 5000
    val_size: int = 200
    test_size: int = 200
    min_nodes: int = 2
    max_nodes: int = 19
    max_degree: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.task not in PROPERTY_ORACLES:
            raise ValueError(f"unknown task {self.task!r}")
        if min(self.train_size, self.val_size, self.test_size) < 1:
            raise ValueError("split sizes must be >= 1")
        if not (2 <= self.min_nodes <= self.max_nodes):
            raise ValueError("need 2 <= min_nodes <= max_nodes")
        if self.max_degree < 1:
            raise ValueError("max_degree must be >= 1")


def random_graph(rng: np.random.Generator, n_nodes: int, max_degree: int = 4,
                 symbols: Sequence[str] | None = None,
                 edge_labels: Sequence[str] = EDGE_LABELS) -> TextGraph:
    """One random connected degree-bounded graph."""
    symbols = tuple(VALENCE_ELECTRONS) if symbols is None else tuple(symbols)
    labels = [symbols[rng.integers(len(symbols))] for _ in range(n_nodes)]
    degree = [0] * n_nodes
    edges: list[tuple[int, int, str]] = []
    seen: set[tuple[int, int, str]] = set()

    def add(u: int, v: int) -> bool:
        label = edge_labels[rng.integers(len(edge_labels))]
        pred, succ = (u, v) if rng.integers(2) == 0 else (v, u)
        if (pred, succ, label) in seen:
            return False
        seen.add((pred, succ, label))
        edges.append((pred, succ, label))
        degree[pred] += 1
        degree[succ] += 1
        return True

    for i in range(1, n_nodes):
        candidates = [j for j in range(i) if degree[j] < max_degree]
        add(candidates[rng.integers(len(candidates))], i)

    for _ in range(n_nodes):
        u, v = rng.choice(n_nodes, size=2, replace=False)
        u, v = int(u), int(v)
        if degree[u] >= max_degree or degree[v] >= max_degree:
            continue
        if rng.random() < 1.0 / ((1 + degree[u]) * (1 + degree[v])):
            add(u, v)
    return TextGraph(labels, edges)


@dataclass(frozen=True)
class Record:
    desc: str
    graph: str


def _record_for(g: TextGraph, task: str) -> Record:
    target = property_value(task, g)
    serialized = serialize(disambiguate(g))
    return Record(desc=render_description(task, float(target)), graph=serialized.string)


def generate_records(spec: DatasetSpec) -> tuple[list[Record], list[Record], list[Record]]:
    """Deterministic (train, val, test) record lists. Validation and test
    are drawn first, so for a fixed seed the train stream is a stable
    prefix sequence: smaller train sizes are prefixes of larger ones, and
    both are disjoint from validation and test. All graphs are distinct
    under ``canonical_key``."""
    rng = np.random.default_rng(spec.seed)
    seen: set = set()

    def fresh() -> TextGraph:
        for _ in range(10000):
            n = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
            g = random_graph(rng, n, spec.max_degree)
            key = canonical_key(g)
            if key not in seen:
                seen.add(key)
                return g
        raise InfeasibleSpecError("could not draw a fresh graph; sizes too large for the node range")

    val = [_record_for(fresh(), spec.task) for _ in range(spec.val_size)]
    test = [_record_for(fresh(), spec.task) for _ in range(spec.test_size)]
    train = [_record_for(fresh(), spec.task) for _ in range(spec.train_size)]
    return train, val, test


def write_records(path, records: Sequence[Record]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(format_record(r.desc, r.graph) + "\n")
    os.replace(tmp, path)


def read_records(path) -> list[Record]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            desc, graph = parse_record(line)
            records.append(Record(desc=desc, graph=graph))
    return records


def target_stats(records: Sequence[Record]) -> dict[str, float]:
    from .graphs import parse_description

    values = np.asarray([parse_description(r.desc).target_value for r in records])
    return {
        "min": float(values.min()),
        "max": float(values.max()),
        "mean": float(values.mean()),
        "std": float(values.std()),
    }


def generate_dataset(spec: DatasetSpec, out_dir, train_sizes: Sequence[int] | None = None) -> dict[str, str]:
    """Write train/val/test record files plus a sidecar manifest. With
    several ``train_sizes`` the files nest: each smaller train file is a
    prefix of every larger one. Returns the written paths keyed by split."""
    sizes = sorted(set(train_sizes)) if train_sizes else [spec.train_size]
    full = DatasetSpec(
        task=spec.task,
        train_size=max(sizes),
        val_size=spec.val_size,
        test_size=spec.test_size,
        min_nodes=spec.min_nodes,
        max_nodes=spec.max_nodes,
        max_degree=spec.max_degree,
        seed=spec.seed,
    )
    train, val, test = generate_records(full)
    os.makedirs(out_dir, exist_ok=True)
    paths: dict[str, str] = {}
    lines = [
        f"task={spec.task}",
        f"seed={spec.seed}",
        f"min_nodes={spec.min_nodes}",
        f"max_nodes={spec.max_nodes}",
        f"max_degree={spec.max_degree}",
        f"val_size={spec.val_size}",
        f"test_size={spec.test_size}",
    ]
    for name, records in (("val", val), ("test", test)):
        path = os.path.join(out_dir, f"{name}.txt")
        write_records(path, records)
        paths[name] = path
        stats = target_stats(records)
        lines.append(
            f"stats.{name} n={len(records)} min={stats['min']:.6g} max={stats['max']:.6g} "
            f"mean={stats['mean']:.6g} std={stats['std']:.6g}"
        )
    for size in sizes:
        path = os.path.join(out_dir, f"train_{size}.txt")
        write_records(path, train[:size])
        paths[f"train_{size}"] = path
        stats = target_stats(train[:size])
        lines.append(
            f"stats.train_{size} n={size} min={stats['min']:.6g} max={stats['max']:.6g} "
            f"mean={stats['mean']:.6g} std={stats['std']:.6g}"
        )
    manifest_path = os.path.join(out_dir, "dataset_manifest.txt")
    tmp = f"{manifest_path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, manifest_path)
    paths["manifest"] = manifest_path
    return paths
