"""Forward optimal transport solvers.

Two routes are provided:

* :func:`solve_exact` -- the transportation simplex (MODI / u-v method) started
  from the northwest-corner basis. Pivot choices are deterministic, so
  non-unique optima always resolve to the same vertex.
* :func:`solve_sinkhorn` -- Sinkhorn scaling for the entropically regularized
  problem, i.e. the KL projection of the Gibbs kernel ``exp(-C/eps)`` onto the
  couplings with the prescribed marginals. Falls back to log-domain updates
  when the scaling vectors leave the representable range.

The ``*_plan`` functions are the raw array kernels used inside the sampler;
the ``solve_*`` wrappers validate inputs and return a :class:`SolveReport`.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NotConverged, ShapeError
from .simplex import COUPLING_ATOL, Coupling, as_prob_matrix, as_prob_vector, frobenius_inner

SCALING_UPPER = 1e150
SCALING_LOWER = 1e-150


@dataclass(frozen=True)
class TransportProblem:
    p: np.ndarray
    q: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        p = as_prob_vector(self.p)
        q = as_prob_vector(self.q)
        cost = as_prob_matrix(self.cost)
        if cost.shape != (p.size, q.size):
            raise ShapeError(f"cost shape {cost.shape} does not match marginals ({p.size}, {q.size})")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "cost", cost)

    @property
    def n(self):
        return self.p.size


@dataclass(frozen=True)
class SinkhornSettings:
    epsilon: float
    tolerance: float = 1e-9
    max_iterations: int = 100_000
    log_domain: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        if not self.tolerance > 0:
            raise DomainError("tolerance must be positive")
        if self.max_iterations < 1:
            raise DomainError("max_iterations must be at least 1")


@dataclass(frozen=True)
class SolveReport:
    coupling: Coupling
    objective: float
    iterations: int
    residual: float

    @property
    def plan(self):
        return self.coupling.plan


def transport_objective(cost, plan):
    """Total cost ``<C, T>`` of a plan (a :class:`Coupling` or a bare matrix)."""
    if isinstance(plan, Coupling):
        plan = plan.plan
    return frobenius_inner(cost, plan)


def marginal_residual(plan, p, q):
    plan = np.asarray(plan)
    return float(max(np.max(np.abs(plan.sum(axis=1) - p)), np.max(np.abs(plan.sum(axis=0) - q))))


# ---------------------------------------------------------------------------
# exact solver: transportation simplex


def _northwest_corner(supply, demand):
    m, n = len(supply), len(demand)
    s = list(supply)
    d = list(demand)
    flow = [[0.0] * n for _ in range(m)]
    basis = []
    i = j = 0
    while True:
        amount = s[i] if s[i] < d[j] else d[j]
        flow[i][j] = amount
        s[i] -= amount
        d[j] -= amount
        basis.append((i, j))
        if i == m - 1 and j == n - 1:
            break
        # degenerate ties step down, recording a zero basic cell
        if i < m - 1 and (s[i] == 0.0 or j == n - 1):
            i += 1
        else:
            j += 1
    return flow, basis


def _potentials(cost, basis, m, n):
    adj = [[] for _ in range(m + n)]
    for i, j in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    pot = [None] * (m + n)
    pot[0] = 0.0
    stack = [0]
    while stack:
        node = stack.pop()
        for nb in adj[node]:
            if pot[nb] is None:
                if node < m:
                    pot[nb] = cost[node][nb - m] - pot[node]
                else:
                    pot[nb] = cost[nb][node - m] - pot[node]
                stack.append(nb)
    return pot[:m], pot[m:], adj


def _tree_path(adj, start, goal):
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nb in adj[node]:
            if nb not in parent:
                parent[nb] = node
                queue.append(nb)
    path = [goal]
    while path[-1] != start:
        path.append(parent[path[-1]])
    path.reverse()
    return path


def exact_plan(p, q, cost):
    """Solve ``min <C, T>`` over couplings of ``p`` and ``q``.

    Returns ``(plan, pivots)``. The result is a basic feasible solution; the
    entering cell is the most negative reduced cost (lowest row, then column,
    on ties) and the leaving cell is the smallest decreasing flow (same
    tie-break). After a generous pivot budget the rule switches to Bland's
    first-negative choice, which cannot cycle.
    """
    m, n = len(p), len(q)
    c = np.asarray(cost, dtype=np.float64).tolist()
    flow, basis = _northwest_corner([float(x) for x in p], [float(x) for x in q])
    in_basis = set(basis)
    cmax = max(abs(x) for row in c for x in row)
    tol = 1e-12 * max(cmax, 1e-300)
    bland_after = 20 * m * n * (m + n)
    pivots = 0
    while True:
        u, v, adj = _potentials(c, basis, m, n)
        entering = None
        best = -tol
        bland = pivots >= bland_after
        for i in range(m):
            ci = c[i]
            ui = u[i]
            for j in range(n):
                if (i, j) in in_basis:
                    continue
                r = ci[j] - ui - v[j]
                if r < best:
                    best = r
                    entering = (i, j)
                    if bland:
                        break
            if bland and entering is not None:
                break
        if entering is None:
            break
        ei, ej = entering
        path = _tree_path(adj, ei, m + ej)
        leaving = None
        theta = None
        minus = []
        plus = []
        for k in range(len(path) - 1):
            a, b = path[k], path[k + 1]
            cell = (a, b - m) if a < m else (b, a - m)
            if k % 2 == 0:
                minus.append(cell)
                x = flow[cell[0]][cell[1]]
                if theta is None or x < theta or (x == theta and cell < leaving):
                    theta = x
                    leaving = cell
            else:
                plus.append(cell)
        for i, j in plus:
            flow[i][j] += theta
        for i, j in minus:
            flow[i][j] -= theta
        flow[leaving[0]][leaving[1]] = 0.0
        flow[ei][ej] = theta
        basis.remove(leaving)
        in_basis.discard(leaving)
        basis.append(entering)
        in_basis.add(entering)
        pivots += 1
    return np.array(flow, dtype=np.float64), pivots


def solve_exact(prob):
    """Exact optimal transport plan via the transportation simplex."""
    plan, pivots = exact_plan(prob.p, prob.q, prob.cost)
    coupling = Coupling(plan, prob.p, prob.q)
    return SolveReport(
        coupling=coupling,
        objective=transport_objective(prob.cost, plan),
        iterations=pivots,
        residual=marginal_residual(plan, prob.p, prob.q),
    )


# ---------------------------------------------------------------------------
# entropic solver: Sinkhorn scaling


def gibbs_kernel(cost, epsilon):
    """Elementwise ``exp(-C / epsilon)``."""
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    return np.exp(-np.asarray(cost, dtype=np.float64) / epsilon)


def sinkhorn_step(kernel, p, q, b):
    """One Sinkhorn sweep: ``a = p / (K b)`` then ``b = q / (K^T a)``."""
    a = p / (kernel @ b)
    b = q / (kernel.T @ a)
    return a, b


def _logsumexp_rows(x):
    xmax = np.max(x, axis=1, keepdims=True)
    return (xmax + np.log(np.sum(np.exp(x - xmax), axis=1, keepdims=True)))[:, 0]


def _sinkhorn_standard(p, q, cost, settings):
    kernel = np.exp(-cost / settings.epsilon)
    b = np.ones_like(q)
    residual = np.inf
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        kb = kernel @ b
        for it in range(1, settings.max_iterations + 1):
            a = p / kb
            b = q / (kernel.T @ a)
            if not (
                np.all(np.isfinite(a))
                and np.all(np.isfinite(b))
                and a.max() < SCALING_UPPER
                and b.max() < SCALING_UPPER
                and a.min() > SCALING_LOWER
                and b.min() > SCALING_LOWER
            ):
                return None
            kb = kernel @ b
            # columns are exact after the b-update; rows carry the residual
            residual = float(np.max(np.abs(a * kb - p)))
            if residual <= settings.tolerance:
                plan = a[:, None] * kernel * b[None, :]
                return plan, it
    raise NotConverged(
        f"Sinkhorn did not reach tolerance {settings.tolerance} in {settings.max_iterations} iterations",
        residual=residual,
        iterations=settings.max_iterations,
    )


def _sinkhorn_log(p, q, cost, settings):
    log_k = -cost / settings.epsilon
    log_p = np.log(p)
    log_q = np.log(q)
    log_b = np.zeros_like(q)
    residual = np.inf
    for it in range(1, settings.max_iterations + 1):
        log_a = log_p - _logsumexp_rows(log_k + log_b[None, :])
        log_b = log_q - _logsumexp_rows(log_k.T + log_a[None, :])
        row = np.exp(log_a + _logsumexp_rows(log_k + log_b[None, :]))
        residual = float(np.max(np.abs(row - p)))
        if residual <= settings.tolerance:
            plan = np.exp(log_a[:, None] + log_k + log_b[None, :])
            return plan, it
    raise NotConverged(
        f"log-domain Sinkhorn did not reach tolerance {settings.tolerance} "
        f"in {settings.max_iterations} iterations",
        residual=residual,
        iterations=settings.max_iterations,
    )


def sinkhorn_plan(p, q, cost, settings):
    """Entropic plan ``diag(a) K diag(b)``; returns ``(plan, iterations)``.

    Rows and columns with zero marginal mass are removed before scaling and
    reinserted as zeros.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    rows = p > 0
    cols = q > 0
    reduced = not (rows.all() and cols.all())
    if reduced:
        sub_p, sub_q, sub_c = p[rows], q[cols], cost[np.ix_(rows, cols)]
    else:
        sub_p, sub_q, sub_c = p, q, cost
    result = None
    if not settings.log_domain:
        result = _sinkhorn_standard(sub_p, sub_q, sub_c, settings)
    if result is None:
        result = _sinkhorn_log(sub_p, sub_q, sub_c, settings)
    sub_plan, iterations = result
    if not reduced:
        return sub_plan, iterations
    plan = np.zeros((p.size, q.size))
    plan[np.ix_(rows, cols)] = sub_plan
    return plan, iterations


def solve_sinkhorn(prob, settings):
    """Entropically regularized plan via Sinkhorn scaling."""
    plan, iterations = sinkhorn_plan(prob.p, prob.q, prob.cost, settings)
    residual = marginal_residual(plan, prob.p, prob.q)
    coupling = Coupling(plan, prob.p, prob.q, atol=max(COUPLING_ATOL, settings.tolerance))
    return SolveReport(
        coupling=coupling,
        objective=transport_objective(prob.cost, plan),
        iterations=iterations,
        residual=residual,
    )
