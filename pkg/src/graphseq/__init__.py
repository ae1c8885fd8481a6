"""Conditional text-graph generation.

Serializes directed labeled graphs into reversible token sequences,
trains a small decoder-only transformer with interleaved gated
message-passing layers to generate them from functional descriptions, and
evaluates parsability, property error, and diversity of the samples.
"""

from .graphs import TextGraph, FunctionalDescription, graph_equal, degree_sequence
from .codec import (
    SerializedGraph,
    Vocab,
    VOCAB,
    disambiguate,
    serialize,
    deserialize,
    incremental_parse,
    encode,
    decode,
)
from .maskgraph import (
    EdgeGraph,
    CorrespondenceGraph,
    build_edge_graph,
    build_correspondence_graph,
    build_mask,
)
from .model import ModelConfig, SamplePolicy, init_params, forward, graphsage_layer, backward, sample
from .training import LossSpec, TrainConfig, compute_loss, make_batches, train
from .datagen import DatasetSpec, valency_electrons, ring_count, generate_dataset
from .evaluation import parsability_score, mae, diversity_score, ttest_unpaired, evaluate

__all__ = [
    "TextGraph",
    "FunctionalDescription",
    "graph_equal",
    "degree_sequence",
    "SerializedGraph",
    "Vocab",
    "VOCAB",
    "disambiguate",
    "serialize",
    "deserialize",
    "incremental_parse",
    "encode",
    "decode",
    "EdgeGraph",
    "CorrespondenceGraph",
    "build_edge_graph",
    "build_correspondence_graph",
    "build_mask",
    "ModelConfig",
    "SamplePolicy",
    "init_params",
    "forward",
    "graphsage_layer",
    "backward",
    "sample",
    "LossSpec",
    "TrainConfig",
    "compute_loss",
    "make_batches",
    "train",
    "DatasetSpec",
    "valency_electrons",
    "ring_count",
    "generate_dataset",
    "parsability_score",
    "mae",
    "diversity_score",
    "ttest_unpaired",
    "evaluate",
]

__version__ = "0.1.0"
