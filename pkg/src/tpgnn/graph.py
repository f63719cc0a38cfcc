"""Graph topology, normalization coefficients, chunking and graph ingestion."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .dense import even_ranges
from .errors import ConfigError, ParseError, ShapeError


def _csr(keys_major: np.ndarray, keys_minor: np.ndarray, n: int):
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, keys_major + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, keys_minor


class Graph:
    """Immutable directed graph over dense vertex ids ``[0, V)``.

    Both orientations are stored in CSR form with strictly ascending
    neighbor lists: ``in_indptr/in_indices`` lists the sources of each
    destination, ``out_indptr/out_indices`` the destinations of each source.
    """

    def __init__(self, num_vertices: int, src, dst):
        src = np.asarray(src, dtype=np.int64).ravel()
        dst = np.asarray(dst, dtype=np.int64).ravel()
        if src.shape != dst.shape:
            raise ShapeError("src and dst must have equal length")
        if num_vertices < 0:
            raise ConfigError("num_vertices must be >= 0")
        if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= num_vertices):
            raise ConfigError(f"edge endpoint outside [0, {num_vertices})")
        V = int(num_vertices)
        keys = np.unique(dst * V + src) if src.size else np.zeros(0, dtype=np.int64)
        d, s = np.divmod(keys, V) if V else (keys, keys)
        self.num_vertices = V
        self.in_indptr, self.in_indices = _csr(d, s, V)
        order = np.lexsort((d, s))
        self.out_indptr, self.out_indices = _csr(s[order], d[order], V)
        self.deg_in = np.diff(self.in_indptr)
        self.deg_out = np.diff(self.out_indptr)
        for arr in (self.in_indptr, self.in_indices, self.out_indptr, self.out_indices,
                    self.deg_in, self.deg_out):
            arr.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return int(self.in_indices.size)

    @cached_property
    def edge_dst(self) -> np.ndarray:
        """Destination of every edge, aligned with ``in_indices``."""
        out = np.repeat(np.arange(self.num_vertices, dtype=np.int64), self.deg_in)
        out.setflags(write=False)
        return out

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """``(src, dst)`` arrays in destination-major order."""
        return self.in_indices, self.edge_dst

    def in_neighbors(self, v: int) -> np.ndarray:
        return self.in_indices[self.in_indptr[v]:self.in_indptr[v + 1]]

    def out_neighbors(self, u: int) -> np.ndarray:
        return self.out_indices[self.out_indptr[u]:self.out_indptr[u + 1]]

    def transpose(self) -> "Graph":
        src, dst = self.edges()
        return Graph(self.num_vertices, dst, src)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.num_vertices == other.num_vertices
                and np.array_equal(self.in_indptr, other.in_indptr)
                and np.array_equal(self.in_indices, other.in_indices))

    def __hash__(self):
        return hash((self.num_vertices, self.num_edges))

    def __repr__(self):
        return f"Graph(V={self.num_vertices}, E={self.num_edges})"


# --- edge coefficients ----------------------------------------------------


class EdgeCoefficients:
    """Per-edge scalars over a fixed edge structure.

    ``src``/``dst``/``values`` are in destination-major order, sorted by
    ``(dst, src)``. This ordering is what fixes the accumulation order of
    aggregation, so every consumer must preserve it.
    """

    def __init__(self, structure: Graph, values):
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != structure.num_edges:
            raise ShapeError(f"{values.size} coefficients for {structure.num_edges} edges")
        if not np.all(np.isfinite(values)):
            raise ValueError("edge coefficients must be finite")
        values.setflags(write=False)
        self.structure = structure
        self.values = values

    @property
    def num_vertices(self) -> int:
        return self.structure.num_vertices

    @property
    def src(self) -> np.ndarray:
        return self.structure.in_indices

    @property
    def dst(self) -> np.ndarray:
        return self.structure.edge_dst

    @cached_property
    def src_major(self) -> np.ndarray:
        """Permutation putting edges in ``(src, dst)`` order (used by the transpose)."""
        perm = np.argsort(self.src, kind="stable")
        perm.setflags(write=False)
        return perm

    def with_values(self, values) -> "EdgeCoefficients":
        return type(self)._rebuild(self, values)

    @classmethod
    def _rebuild(cls, proto, values):
        return EdgeCoefficients(proto.structure, values)


class NormMode(str, enum.Enum):
    GCN_DEGREE = "gcn"
    SYM_SELF_LOOP = "sym"


class NormCoefficients(EdgeCoefficients):
    def __init__(self, structure: Graph, values, mode: NormMode):
        super().__init__(structure, values)
        self.mode = NormMode(mode)

    @classmethod
    def _rebuild(cls, proto, values):
        return NormCoefficients(proto.structure, values, proto.mode)

    def __repr__(self):
        return f"NormCoefficients(mode={self.mode.value}, E={self.values.size})"


class EdgeAttention(EdgeCoefficients):
    """Softmax-normalized attention weights, one per edge of ``structure``."""

    @classmethod
    def _rebuild(cls, proto, values):
        return EdgeAttention(proto.structure, values)


def compute_norm(graph: Graph, mode: NormMode | str = NormMode.SYM_SELF_LOOP) -> NormCoefficients:
    """Aggregation coefficients for ``graph``.

    ``gcn``: ``c_uv = 1 / sqrt(deg_in(v) * deg_out(u))`` over the original
    edges. A vertex with no in-edges gets a self-loop of weight 1 so that its
    own embedding is carried forward instead of collapsing to zero.

    ``sym``: the symmetrically normalized ``D^-1/2 (A + I) D^-1/2`` of the
    undirected version of ``graph`` (directed inputs are symmetrized first).
    """
    mode = NormMode(mode)
    V = graph.num_vertices
    src, dst = graph.edges()
    if mode is NormMode.GCN_DEGREE:
        lonely = np.flatnonzero(graph.deg_in == 0)
        structure = Graph(V, np.concatenate([src, lonely]), np.concatenate([dst, lonely]))
        s, d = structure.edges()
        values = np.ones(structure.num_edges)
        real = graph.deg_in[d] > 0
        values[real] = 1.0 / np.sqrt(graph.deg_in[d[real]] * graph.deg_out[s[real]])
        return NormCoefficients(structure, values, mode)

    loops = np.arange(V, dtype=np.int64)
    structure = Graph(V, np.concatenate([src, dst, loops]), np.concatenate([dst, src, loops]))
    s, d = structure.edges()
    # (A_sym + I) entries: 1 off the diagonal, 2 where the input already had a self-loop.
    weight = np.ones(structure.num_edges)
    has_loop = np.zeros(V, dtype=bool)
    has_loop[src[src == dst]] = True
    diag = s == d
    weight[diag & has_loop[s]] = 2.0
    deg = np.zeros(V)
    np.add.at(deg, d, weight)
    lo = np.minimum(s, d)
    hi = np.maximum(s, d)
    values = weight / np.sqrt(deg[lo] * deg[hi])
    return NormCoefficients(structure, values, mode)


# --- chunks ---------------------------------------------------------------


@dataclass(frozen=True)
class Chunk:
    """A contiguous destination range ``[dst_lo, dst_hi)`` and all its in-edges.

    The in-edges are the slice ``[edge_lo, edge_hi)`` of the parent graph's
    destination-major edge arrays; nothing is copied.
    """

    chunk_id: int
    dst_lo: int
    dst_hi: int
    edge_lo: int
    edge_hi: int
    src_set: np.ndarray
    graph: Graph = field(repr=False, compare=False)

    @property
    def dst_range(self) -> range:
        return range(self.dst_lo, self.dst_hi)

    @property
    def num_edges(self) -> int:
        return self.edge_hi - self.edge_lo

    @property
    def local_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR ``(indptr, indices)`` restricted to this chunk's destinations."""
        g = self.graph
        indptr = g.in_indptr[self.dst_lo:self.dst_hi + 1] - self.edge_lo
        return indptr, g.in_indices[self.edge_lo:self.edge_hi]

    @cached_property
    def src_major(self) -> np.ndarray:
        """Chunk-local permutation ordering this chunk's edges by ``(src, dst)``."""
        return np.argsort(self.graph.in_indices[self.edge_lo:self.edge_hi], kind="stable")


def partition_chunks(graph: Graph, num_chunks: int) -> list[Chunk]:
    V = graph.num_vertices
    if not 1 <= num_chunks <= max(V, 1) or V == 0:
        raise ConfigError(f"num_chunks must be in [1, {V}], got {num_chunks}")
    chunks = []
    for j, (lo, hi) in enumerate(even_ranges(V, num_chunks)):
        e_lo = int(graph.in_indptr[lo])
        e_hi = int(graph.in_indptr[hi])
        src_set = np.unique(graph.in_indices[e_lo:e_hi])
        src_set.setflags(write=False)
        chunks.append(Chunk(j, lo, hi, e_lo, e_hi, src_set, graph))
    return chunks


# --- ingestion ------------------------------------------------------------


def load_edge_list(path, num_vertices: int | None = None, *, remap: bool = False) -> Graph:
    """Read whitespace-separated ``src dst`` pairs, one per line.

    Blank lines and lines starting with ``#`` are ignored; duplicate edges
    collapse. With ``remap=True`` arbitrary integer ids are renumbered densely
    in ascending id order and ``num_vertices`` may be omitted.
    """
    path = Path(path)
    pairs = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ParseError(path, lineno, f"expected 'src dst', got {text!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(path, lineno, f"non-integer vertex id in {text!r}") from None
            if not remap and num_vertices is not None and not (
                0 <= u < num_vertices and 0 <= v < num_vertices
            ):
                raise ParseError(path, lineno, f"vertex id out of range [0, {num_vertices})")
            if u < 0 or v < 0:
                raise ParseError(path, lineno, "negative vertex id")
            pairs.append((u, v))
    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    if remap:
        ids, inverse = np.unique(arr.ravel(), return_inverse=True)
        arr = inverse.reshape(-1, 2)
        if num_vertices is None:
            num_vertices = ids.size
        elif ids.size > num_vertices:
            raise ConfigError(f"{ids.size} distinct ids exceed num_vertices={num_vertices}")
    elif num_vertices is None:
        num_vertices = int(arr.max()) + 1 if arr.size else 0
    return Graph(num_vertices, arr[:, 0], arr[:, 1])


class SyntheticKind(str, enum.Enum):
    TWO_CLUSTER = "two-cluster"
    POWER_LAW = "power-law"


def _two_cluster(params: dict, rng: np.random.Generator):
    size = int(params.get("size", 10))
    p_in = float(params.get("p_in", 0.5))
    p_out = float(params.get("p_out", 0.02))
    dim = int(params.get("feature_dim", 8))
    noise = float(params.get("noise", 1.0))
    if size < 1 or dim < 1:
        raise ConfigError("two-cluster needs size >= 1 and feature_dim >= 1")
    if not (0 <= p_in <= 1 and 0 <= p_out <= 1):
        raise ConfigError("two-cluster probabilities must lie in [0, 1]")
    V = 2 * size
    labels = np.repeat(np.arange(2, dtype=np.int64), size)
    iu, ju = np.triu_indices(V, k=1)
    same = labels[iu] == labels[ju]
    keep = rng.random(iu.size) < np.where(same, p_in, p_out)
    u, v = iu[keep], ju[keep]
    graph = Graph(V, np.concatenate([u, v]), np.concatenate([v, u]))
    centers = rng.choice([-0.5, 0.5], size=(2, dim))
    features = centers[labels] + noise * rng.standard_normal((V, dim))
    return graph, features, labels


def _power_law(params: dict, rng: np.random.Generator):
    V = int(params.get("num_vertices", 1000))
    exponent = float(params.get("exponent", 2.5))
    avg_degree = float(params.get("avg_degree", 8.0))
    dim = int(params.get("feature_dim", 16))
    classes = int(params.get("num_classes", 4))
    if V < 2 or exponent <= 1 or avg_degree <= 0 or dim < 1 or classes < 1:
        raise ConfigError("power-law needs V >= 2, exponent > 1, avg_degree > 0")
    # Chung-Lu style: expected degree of vertex i proportional to (i+1)^(-1/(exponent-1)),
    # so hubs sit at low ids.
    weights = np.arange(1, V + 1, dtype=np.float64) ** (-1.0 / (exponent - 1.0))
    p = weights / weights.sum()
    m = int(round(V * avg_degree / 2))
    u = rng.choice(V, size=m, p=p)
    v = rng.choice(V, size=m, p=p)
    keep = u != v
    u, v = u[keep], v[keep]
    graph = Graph(V, np.concatenate([u, v]), np.concatenate([v, u]))
    labels = rng.integers(0, classes, size=V)
    centers = rng.standard_normal((classes, dim))
    features = centers[labels] + rng.standard_normal((V, dim))
    return graph, features, labels


def generate_synthetic(kind: SyntheticKind | str, params: dict | None = None, seed: int = 0):
    """Build ``(graph, features, labels)`` deterministically from ``seed``.

    ``two-cluster`` params: ``size`` (per cluster), ``p_in``, ``p_out``,
    ``feature_dim``, ``noise``. Labels are the cluster ids.
    ``power-law`` params: ``num_vertices``, ``exponent``, ``avg_degree``,
    ``feature_dim``, ``num_classes``.
    Both produce undirected graphs stored with edges in both directions.
    """
    try:
        kind = SyntheticKind(kind)
    except ValueError:
        raise ConfigError(f"unknown synthetic graph kind {kind!r}") from None
    rng = np.random.default_rng(seed)
    params = dict(params or {})
    if kind is SyntheticKind.TWO_CLUSTER:
        return _two_cluster(params, rng)
    return _power_law(params, rng)


def split_masks(num_vertices: int, seed: int, fractions=(0.65, 0.25, 0.10)):
    """Random train/val/test boolean masks with the given fractions."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")
    perm = np.random.default_rng(seed).permutation(num_vertices)
    n_train = int(round(fractions[0] * num_vertices))
    n_val = int(round(fractions[1] * num_vertices))
    masks = []
    for lo, hi in ((0, n_train), (n_train, n_train + n_val), (n_train + n_val, num_vertices)):
        m = np.zeros(num_vertices, dtype=bool)
        m[perm[lo:hi]] = True
        masks.append(m)
    return tuple(masks)
