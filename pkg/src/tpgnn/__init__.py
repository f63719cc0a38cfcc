"""Full-graph GNN training with tensor parallelism, on an in-process worker group.

Four engines share one model definition: a single-worker reference,
vertex-partitioned data parallelism, layer-wise tensor parallelism and
decoupled tensor parallelism with chunked, optionally pipelined,
propagation. Every collective is counted exactly so measured communication
can be checked against closed-form predictions.
"""
from .collective import CommLedger, WorkerGroup
from .costs import AnalyticCost, compare_measured_vs_predicted, predict_costs
from .decoupled import DecoupledConfig, ModelKind, decoupled_step, propagate, propagate_backward
from .engines import Dataset, EngineConfig, EngineKind, EpochReport, train
from .errors import (
    CollectiveError,
    ConfigError,
    ContractViolation,
    ParseError,
    ProtocolError,
    ShapeError,
    TpgnnError,
)
from .graph import Graph, NormMode, compute_norm, generate_synthetic, load_edge_list, partition_chunks
from .scheduler import build_comm_plan, chunked_propagate, peak_resident_rows

__all__ = [
    "AnalyticCost", "CollectiveError", "CommLedger", "ConfigError", "ContractViolation", "Dataset",
    "DecoupledConfig", "EngineConfig", "EngineKind", "EpochReport", "Graph", "ModelKind", "NormMode",
    "ParseError", "ProtocolError", "ShapeError", "TpgnnError", "WorkerGroup", "build_comm_plan",
    "chunked_propagate", "compare_measured_vs_predicted", "compute_norm", "decoupled_step",
    "generate_synthetic", "load_edge_list", "partition_chunks", "peak_resident_rows", "predict_costs",
    "propagate", "propagate_backward", "train",
]
