"""Experiment configuration: flat ``key = value`` files plus overrides.

Example::

    # two clusters of 10 vertices, decoupled GCN on 4 workers
    dataset = two-cluster
    size = 10
    engine = decoupled-tp
    workers = 4
    model = decoupled-gcn
    hidden = 16
    prop_rounds = 2
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoupled import DecoupledConfig, ModelKind
from .engines import Dataset, EngineConfig, EngineKind
from .errors import ConfigError, ParseError
from .graph import NormMode, SyntheticKind, generate_synthetic, load_edge_list

EDGE_LIST = "edge-list"


def _int_list(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    return [int(part) for part in text.split(",")]


def _flag(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


@dataclass
class ExperimentConfig:
    dataset: str = SyntheticKind.TWO_CLUSTER.value
    # synthetic generators
    size: int = 10
    p_in: float = 0.5
    p_out: float = 0.02
    noise: float = 1.0
    num_vertices: int | None = None
    exponent: float = 2.5
    avg_degree: float = 8.0
    feature_dim: int | None = None
    num_classes: int = 4
    # local files (edge-list datasets)
    edges: str | None = None
    features: str | None = None
    labels: str | None = None
    remap: bool = False
    # model and training
    model: str = ModelKind.DECOUPLED_GCN.value
    hidden: list[int] = field(default_factory=lambda: [16])
    prop_rounds: int = 2
    gamma: float = 1.0
    norm: str = NormMode.SYM_SELF_LOOP.value
    engine: str = EngineKind.SINGLE.value
    workers: int = 1
    chunks: int = 1
    pipelining: bool = False
    lr: float = 0.05
    epochs: int = 10
    seed: int = 0
    out: str = "results"

    def __post_init__(self):
        try:
            if self.dataset != EDGE_LIST:
                SyntheticKind(self.dataset)
            ModelKind(self.model)
            EngineKind(self.engine)
            NormMode(self.norm)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.dataset == EDGE_LIST:
            if not self.edges:
                raise ConfigError("dataset = edge-list needs 'edges = PATH'")
            if not self.labels:
                raise ConfigError("dataset = edge-list needs 'labels = PATH' (one integer per line)")
            for name in ("edges", "features", "labels"):
                path = getattr(self, name)
                if path and not Path(path).is_file():
                    raise ConfigError(f"{name} file not found: {path}")
        for name in ("workers", "chunks", "size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden layer widths must be positive")

    @classmethod
    def field_parser(cls, name: str):
        f = {f.name: f for f in dataclasses.fields(cls)}.get(name)
        if f is None:
            raise KeyError(name)
        kind = str(f.type)
        if name == "hidden":
            return _int_list
        if kind.startswith("bool"):
            return _flag
        if kind.startswith("int"):
            return int
        if kind.startswith("float"):
            return float
        return str

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], overrides: dict | None = None) -> "ExperimentConfig":
        values = {}
        for key, text in pairs.items():
            try:
                values[key] = cls.field_parser(key)(text)
            except KeyError:
                raise ConfigError(f"unknown config key {key!r}") from None
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls(**values)

    def model_config(self, feature_dim: int, num_classes: int) -> DecoupledConfig:
        dims = [feature_dim, *self.hidden, num_classes]
        return DecoupledConfig(dims, prop_rounds=self.prop_rounds, gamma=self.gamma,
                               model_kind=self.model, norm=self.norm)

    def load_dataset(self) -> Dataset:
        if self.dataset == EDGE_LIST:
            graph = load_edge_list(self.edges, self.num_vertices, remap=self.remap)
            labels = np.loadtxt(self.labels, dtype=np.int64, ndmin=1)
            if labels.size != graph.num_vertices:
                raise ConfigError(f"{self.labels}: {labels.size} labels for {graph.num_vertices} vertices")
            if self.features:
                features = np.loadtxt(self.features, dtype=np.float64, ndmin=2)
                if features.shape[0] != graph.num_vertices:
                    raise ConfigError(f"{self.features}: {features.shape[0]} rows for "
                                      f"{graph.num_vertices} vertices")
            else:
                rng = np.random.default_rng(self.seed)
                features = rng.normal(size=(graph.num_vertices, self.feature_dim or 16))
            return Dataset.from_arrays(graph, features, labels, self.seed)
        params = dict(size=self.size, p_in=self.p_in, p_out=self.p_out, noise=self.noise,
                      exponent=self.exponent, avg_degree=self.avg_degree,
                      num_classes=self.num_classes)
        if self.num_vertices is not None:
            params["num_vertices"] = self.num_vertices
        if self.feature_dim is not None:
            params["feature_dim"] = self.feature_dim
        graph, features, labels = generate_synthetic(self.dataset, params, self.seed)
        return Dataset.from_arrays(graph, features, labels, self.seed)

    def engine_config(self, dataset: Dataset) -> EngineConfig:
        num_classes = int(dataset.labels.max()) + 1
        model = self.model_config(dataset.features.shape[1], num_classes)
        return EngineConfig(self.engine, model, workers=self.workers, lr=self.lr, epochs=self.epochs,
                            seed=self.seed, chunks=self.chunks, pipelining=self.pipelining)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(source, lineno, f"expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError(source, lineno, "empty key")
        pairs[key.replace("-", "_")] = value
    return pairs


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return ExperimentConfig.from_pairs(parse_config_text(path.read_text(), str(path)), overrides)
