"""invot: Bayesian inverse optimal transport.

Recover source/target scalings and transport-cost parameters from an
observed (noisy) transport plan by MCMC, with exact and entropic forward
solvers.
"""

__version__ = "0.1.0"

from .costs import (
    CostKind,
    CostParams,
    CostStructure,
    Determinedness,
    DirectedGraph,
    PenaltySettings,
    build_cost,
    classify_determinedness,
    read_edge_list,
    shortest_path_costs,
)
from .errors import (
    CorruptFile,
    DegenerateLatent,
    DegenerateObservation,
    DomainError,
    EmptyChain,
    IngestError,
    InitializationError,
    InvOTError,
    NotConverged,
    ShapeError,
    UnreachablePair,
    VersionError,
)
from .mcmc import (
    EXACT,
    ChainConfig,
    ChainOutput,
    LatentState,
    coverage,
    forward_map,
    misfit,
    posterior_summary,
    run_chain,
)
from .pipeline import (
    ObservationRecord,
    generate_synthetic,
    ingest_migration_csv,
    load_chain,
    persist_chain,
)
from .simplex import Coupling, entropy, kl_divergence, normalize_matrix, normalize_vector
from .transport import SinkhornSettings, TransportProblem, solve_exact, solve_sinkhorn
