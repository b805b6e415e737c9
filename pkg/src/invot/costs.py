"""Cost parameterizations: Toeplitz, general off-diagonal, and graph shortest paths.

Every parameterization produces a raw nonnegative matrix whose diagonal is
pinned to the staying penalty ``c_bar``; :func:`build_cost` then normalizes it
onto P_{n x n}.
"""

import enum
import heapq
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError, UnreachablePair
from .simplex import normalize_matrix

DEFAULT_C_BAR = 10.0


class CostKind(str, enum.Enum):
    TOEPLITZ = "toeplitz"
    GENERAL = "general"
    GRAPH = "graph"


class Determinedness(str, enum.Enum):
    OVERDETERMINED = "overdetermined"
    UNDERDETERMINED = "underdetermined"
    SQUARE = "square"


@dataclass(frozen=True)
class DirectedGraph:
    n_vertices: int
    edges: tuple

    def __post_init__(self):
        edges = tuple((int(a), int(b)) for a, b in self.edges)
        seen = set()
        for a, b in edges:
            if not (0 <= a < self.n_vertices and 0 <= b < self.n_vertices):
                raise DomainError(f"edge ({a}, {b}) has a vertex outside [0, {self.n_vertices})")
            if a == b:
                raise DomainError(f"self-loop at vertex {a}")
            if (a, b) in seen:
                raise DomainError(f"duplicate edge ({a}, {b})")
            seen.add((a, b))
        object.__setattr__(self, "edges", edges)

    @property
    def m(self):
        return len(self.edges)

    @classmethod
    def from_undirected(cls, n_vertices, pairs):
        """Both orientations of every pair, in the order ``(a, b), (b, a)``."""
        edges = []
        for a, b in pairs:
            edges.extend([(a, b), (b, a)])
        return cls(n_vertices, tuple(edges))


@dataclass(frozen=True)
class PenaltySettings:
    c_bar: float = DEFAULT_C_BAR

    def __post_init__(self):
        if not self.c_bar > 0:
            raise DomainError("c_bar must be positive")


@dataclass(frozen=True)
class CostStructure:
    """Everything about the cost model except the free parameter values."""

    kind: CostKind
    n: int
    graph: DirectedGraph = None
    penalty: PenaltySettings = PenaltySettings()

    def __post_init__(self):
        object.__setattr__(self, "kind", CostKind(self.kind))
        if self.n < 2:
            raise DomainError("need at least two locations")
        if self.kind is CostKind.GRAPH:
            if self.graph is None:
                raise DomainError("graph-based cost requires a graph")
            if self.graph.n_vertices != self.n:
                raise ShapeError(f"graph has {self.graph.n_vertices} vertices, expected {self.n}")

    @property
    def n_params(self):
        if self.kind is CostKind.TOEPLITZ:
            return 2 * self.n - 2
        if self.kind is CostKind.GENERAL:
            return self.n * self.n - self.n
        return self.graph.m

    def param_labels(self):
        n = self.n
        if self.kind is CostKind.TOEPLITZ:
            return [f"sub{k}" for k in range(1, n)] + [f"super{k}" for k in range(1, n)]
        if self.kind is CostKind.GENERAL:
            return [f"W{i}_{j}" for i, j in off_diagonal_indices(n)]
        return [f"e{a}_{b}" for a, b in self.graph.edges]


@dataclass(frozen=True)
class CostParams:
    """A structure together with the flat vector of its free parameters."""

    structure: CostStructure
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.structure.n_params,):
            raise ShapeError(
                f"{self.structure.kind.value} cost with n={self.structure.n} needs "
                f"{self.structure.n_params} parameters, got shape {values.shape}"
            )
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise DomainError("cost parameters must be finite and nonnegative")
        object.__setattr__(self, "values", values)

    @classmethod
    def toeplitz(cls, f, n, penalty=PenaltySettings()):
        return cls(CostStructure(CostKind.TOEPLITZ, n, penalty=penalty), f)

    @classmethod
    def general(cls, w_off, penalty=PenaltySettings()):
        w_off = np.asarray(w_off, dtype=np.float64)
        if w_off.ndim != 2 or w_off.shape[0] != w_off.shape[1]:
            raise ShapeError("general cost needs a square matrix")
        if np.any(np.diag(w_off) != 0):
            raise DomainError("general cost latent must have a zero diagonal")
        n = w_off.shape[0]
        rows, cols = zip(*off_diagonal_indices(n))
        return cls(CostStructure(CostKind.GENERAL, n, penalty=penalty), w_off[list(rows), list(cols)])

    @classmethod
    def graph_based(cls, graph, f, penalty=PenaltySettings()):
        return cls(CostStructure(CostKind.GRAPH, graph.n_vertices, graph=graph, penalty=penalty), f)


def off_diagonal_indices(n):
    """Row-major ``(i, j)`` pairs with ``i != j``; the general-cost parameter order."""
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def toeplitz_index(i, j, n):
    """Position in the Toeplitz vector of the diagonal holding entry ``(i, j)``.

    The first ``n - 1`` entries are sub-diagonals (``j - i = -1 .. -(n-1)``),
    the last ``n - 1`` super-diagonals (``j - i = 1 .. n-1``).
    """
    d = j - i
    if d == 0:
        raise ValueError("the main diagonal is not parameterized")
    return -d - 1 if d < 0 else n - 2 + d


def embed_toeplitz(f, n, penalty=PenaltySettings()):
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (2 * n - 2,):
        raise ShapeError(f"Toeplitz vector for n={n} must have length {2 * n - 2}, got {f.shape}")
    w = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            w[i, j] = penalty.c_bar if i == j else f[toeplitz_index(i, j, n)]
    return w


def embed_general(w_off, n, penalty=PenaltySettings()):
    w_off = np.asarray(w_off, dtype=np.float64)
    if w_off.shape != (n * n - n,):
        raise ShapeError(f"general cost for n={n} needs {n * n - n} entries, got {w_off.shape}")
    w = np.full((n, n), penalty.c_bar)
    mask = ~np.eye(n, dtype=bool)
    w[mask] = w_off
    return w


def _dijkstra(adj, source, n):
    dist = [np.inf] * n
    dist[source] = 0.0
    heap = [(0.0, source)]
    done = [False] * n
    while heap:
        d, node = heapq.heappop(heap)
        if done[node]:
            continue
        done[node] = True
        for nb, w in adj[node]:
            nd = d + w
            if nd < dist[nb]:
                dist[nb] = nd
                heapq.heappush(heap, (nd, nb))
    return dist


def shortest_path_costs(graph, f, penalty=PenaltySettings()):
    """All-pairs directed shortest-path costs, one Dijkstra run per source.

    Raises :class:`UnreachablePair` for the first ``(i, j)`` (row-major) with
    no directed path.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (graph.m,):
        raise ShapeError(f"graph has {graph.m} edges, got {f.shape[0] if f.ndim else 0} weights")
    if np.any(f < 0):
        raise DomainError("edge weights must be nonnegative")
    n = graph.n_vertices
    adj = [[] for _ in range(n)]
    for (a, b), w in zip(graph.edges, f.tolist()):
        adj[a].append((b, w))
    w = np.empty((n, n))
    for i in range(n):
        dist = _dijkstra(adj, i, n)
        for j in range(n):
            if i != j and dist[j] == np.inf:
                raise UnreachablePair(i, j)
        w[i] = dist
        w[i, i] = penalty.c_bar
    return w


def embed(params):
    """Raw (unnormalized) cost matrix with the staying penalty on the diagonal."""
    s = params.structure
    if s.kind is CostKind.TOEPLITZ:
        w = embed_toeplitz(params.values, s.n, s.penalty)
    elif s.kind is CostKind.GENERAL:
        w = embed_general(params.values, s.n, s.penalty)
    else:
        w = shortest_path_costs(s.graph, params.values, s.penalty)
    off = w[~np.eye(s.n, dtype=bool)]
    if off.max() >= s.penalty.c_bar:
        raise DomainError(f"off-diagonal cost {off.max()!r} is not below the staying penalty {s.penalty.c_bar!r}")
    return w


def build_cost(params):
    """Normalized cost matrix in P_{n x n}."""
    return normalize_matrix(embed(params))


def normalized_params(params):
    """Parameter values divided by the total mass of the raw cost matrix.

    For Toeplitz and general costs these are exactly the corresponding entries
    of the normalized cost matrix.
    """
    return params.values / embed(params).sum()


def classify_determinedness(n, kind, m=None):
    """Compare the unknown count of a cost model with the ``n^2 - 1`` data equations."""
    kind = CostKind(kind)
    if n < 2:
        raise DomainError("n must be at least 2")
    if (kind is CostKind.GRAPH) != (m is not None):
        raise DomainError("m must be given exactly when the cost is graph-based")
    if kind is CostKind.TOEPLITZ:
        unknowns = 4 * n - 5
    elif kind is CostKind.GENERAL:
        unknowns = n * n + n - 3
    else:
        unknowns = 2 * n + m - 3
    equations = n * n - 1
    if unknowns < equations:
        return Determinedness.OVERDETERMINED
    if unknowns > equations:
        return Determinedness.UNDERDETERMINED
    return Determinedness.SQUARE


def read_edge_list(path):
    """Parse the plain-text edge list format: header ``n m`` then ``from to`` lines."""
    with open(path) as fh:
        lines = [ln.split("#", 1)[0].strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise ValueError(f"{path}: empty edge list")
    try:
        n, m = (int(x) for x in lines[0].split())
        edges = [tuple(int(x) for x in ln.split()) for ln in lines[1:]]
    except ValueError as exc:
        raise ValueError(f"{path}: malformed edge list ({exc})") from None
    if len(edges) != m or any(len(e) != 2 for e in edges):
        raise ValueError(f"{path}: header declares {m} edges, found {len(edges)} valid lines")
    return DirectedGraph(n, tuple(edges))


def write_edge_list(graph, path):
    with open(path, "w") as fh:
        fh.write(f"{graph.n_vertices} {graph.m}\n")
        for a, b in graph.edges:
            fh.write(f"{a} {b}\n")
