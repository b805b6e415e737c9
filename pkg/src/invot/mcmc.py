"""Bayesian inverse OT: forward map, misfit, posterior and the block sampler.

The latent state is ``(u, v, theta)``: unnormalized marginals ``u``, ``v`` and
the free cost parameters ``theta``, all with i.i.d. uniform priors on [0, 1].
Sampling uses random-walk Metropolis within Gibbs over the three blocks.

Random stream
-------------
Each chain owns ``numpy.random.Generator(Philox(seed))``. Initialization draws
``u`` (n uniforms), ``v`` (n uniforms), ``theta`` (d uniforms), mapped onto
(0.05, 1]. Every sweep then draws, in order: the u-block noise (n normals), one
uniform for the u accept test, the v-block noise, its uniform, the theta-block
noise, its uniform. The draws happen whether or not a block is updated, so
the stream layout never depends on the chain's path.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .costs import CostParams, CostStructure, build_cost, embed
from .errors import DegenerateLatent, DomainError, EmptyChain, InitializationError, InvOTError
from .simplex import normalize_vector
from .transport import SinkhornSettings, exact_plan, sinkhorn_plan

log = logging.getLogger(__name__)

BLOCKS = ("u", "v", "theta")
INIT_LOWER = 0.05
INIT_RETRIES = 10


@dataclass(frozen=True)
class ExactSolver:
    """Marker for the exact transportation-simplex forward solver."""

    def to_dict(self):
        return {"kind": "exact"}


EXACT = ExactSolver()


def solver_to_dict(solver):
    if isinstance(solver, ExactSolver):
        return solver.to_dict()
    return {
        "kind": "sinkhorn",
        "epsilon": solver.epsilon,
        "tolerance": solver.tolerance,
        "max_iterations": solver.max_iterations,
        "log_domain": solver.log_domain,
    }


def solver_from_dict(d):
    if d["kind"] == "exact":
        return EXACT
    return SinkhornSettings(d["epsilon"], d["tolerance"], d["max_iterations"], d["log_domain"])


def solve_plan(p, q, cost, solver):
    if isinstance(solver, ExactSolver):
        return exact_plan(p, q, cost)[0]
    return sinkhorn_plan(p, q, cost, solver)[0]


@dataclass(frozen=True)
class LatentState:
    u: np.ndarray
    v: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        for name in BLOCKS:
            a = np.array(getattr(self, name), dtype=np.float64)
            if a.ndim != 1:
                raise DomainError(f"latent block {name} must be a vector")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.u.size != self.v.size:
            raise DomainError("u and v must have the same length")

    def block(self, name):
        return getattr(self, name)

    def replace(self, name, value):
        parts = {b: getattr(self, b) for b in BLOCKS}
        parts[name] = value
        return LatentState(**parts)

    def in_box(self):
        return all(np.all((a >= 0.0) & (a <= 1.0)) for a in (self.u, self.v, self.theta))

    def flat(self):
        return np.concatenate([self.u, self.v, self.theta])

    @classmethod
    def from_flat(cls, x, n):
        x = np.asarray(x, dtype=np.float64)
        return cls(x[:n], x[n : 2 * n], x[2 * n :])

    def __eq__(self, other):
        if not isinstance(other, LatentState):
            return NotImplemented
        return all(np.array_equal(getattr(self, b), getattr(other, b)) for b in BLOCKS)

    __hash__ = None


@dataclass(frozen=True)
class ChainConfig:
    sigma: float
    delta_u: float
    delta_v: float
    delta_theta: float
    n_iterations: int
    burn_in: int = 0
    seed: int = 0
    solver: object = EXACT
    thinning: int = 1
    blocks: tuple = BLOCKS

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError("sigma must be positive")
        if not (self.delta_u > 0 and self.delta_v > 0 and self.delta_theta > 0):
            raise DomainError("proposal standard deviations must be positive")
        if self.n_iterations < 1 or not 0 <= self.burn_in < self.n_iterations:
            raise DomainError("need 0 <= burn_in < n_iterations")
        if self.thinning < 1:
            raise DomainError("thinning must be at least 1")
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks or any(b not in BLOCKS for b in self.blocks):
            raise DomainError(f"blocks must be a non-empty subset of {BLOCKS}")
        if not 0 <= self.seed < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")

    def delta(self, block):
        return {"u": self.delta_u, "v": self.delta_v, "theta": self.delta_theta}[block]

    def to_dict(self):
        return {
            "sigma": self.sigma,
            "delta_u": self.delta_u,
            "delta_v": self.delta_v,
            "delta_theta": self.delta_theta,
            "n_iterations": self.n_iterations,
            "burn_in": self.burn_in,
            "seed": self.seed,
            "solver": solver_to_dict(self.solver),
            "thinning": self.thinning,
            "blocks": list(self.blocks),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["solver"] = solver_from_dict(d["solver"])
        d["blocks"] = tuple(d.get("blocks", BLOCKS))
        return cls(**d)


@dataclass(eq=False)
class ChainOutput:
    """Result of :func:`run_chain`.

    ``samples`` holds flattened latent states ``[u, v, theta]`` (one row per
    retained sweep). ``accepted``, ``proposed`` and ``failures`` are per-block
    counters in the order u, v, theta; ``out_of_box`` counts proposals
    auto-rejected for leaving the prior box and ``failures`` those rejected
    because the forward solve raised. Both are included in ``proposed``.
    """

    structure: CostStructure
    samples: np.ndarray
    accepted: np.ndarray
    proposed: np.ndarray
    failures: np.ndarray
    out_of_box: np.ndarray
    misfit_trace: np.ndarray
    initial_state: np.ndarray
    initial_misfit: float
    sample_iterations: np.ndarray = field(default=None)

    @property
    def n(self):
        return self.structure.n

    @property
    def n_samples(self):
        return self.samples.shape[0]

    def states(self):
        return [LatentState.from_flat(row, self.n) for row in self.samples]

    @property
    def in_box(self):
        return self.proposed - self.out_of_box

    @property
    def acceptance_rates(self):
        """Per-block (u, v, theta) acceptance rates over proposals that stayed in the prior box."""
        return _rate(self.accepted, self.in_box)

    @property
    def overall_acceptance(self):
        return float(_rate(self.accepted.sum(), self.in_box.sum()))

    @property
    def raw_acceptance_rates(self):
        """Per-block rates with out-of-box proposals counted as rejections."""
        return _rate(self.accepted, self.proposed)

    @property
    def raw_overall_acceptance(self):
        return float(_rate(self.accepted.sum(), self.proposed.sum()))

    @property
    def running_means(self):
        """Cumulative averages of every latent component over the retained samples."""
        if self.n_samples == 0:
            return np.empty((0, self.samples.shape[1]))
        return np.cumsum(self.samples, axis=0) / np.arange(1, self.n_samples + 1)[:, None]

    def labels(self):
        n = self.n
        return [f"u{i}" for i in range(n)] + [f"v{i}" for i in range(n)] + self.structure.param_labels()

    def __eq__(self, other):
        if not isinstance(other, ChainOutput):
            return NotImplemented
        return (
            self.structure == other.structure
            and self.initial_misfit == other.initial_misfit
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in (
                    "samples",
                    "accepted",
                    "proposed",
                    "failures",
                    "out_of_box",
                    "misfit_trace",
                    "initial_state",
                    "sample_iterations",
                )
            )
        )


def _rate(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.maximum(den, 1), np.nan)


class ForwardModel:
    """The map (u, v, theta) -> transport plan, with a small cost-matrix cache."""

    def __init__(self, structure, solver=EXACT, cache_size=4):
        self.structure = structure
        self.solver = solver
        self._cache = OrderedDict()
        self._cache_size = cache_size

    def cost(self, theta):
        key = np.asarray(theta, dtype=np.float64).tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        c = build_cost(CostParams(self.structure, theta))
        self._cache[key] = c
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return c

    def plan(self, state):
        p = _normalize_fast(state.u)
        q = _normalize_fast(state.v)
        return solve_plan(p, q, self.cost(state.theta), self.solver)


def _normalize_fast(x):
    s = x.sum()
    if not s > 0:
        raise DegenerateLatent("latent block is identically zero")
    return x / s


def forward_map(state, structure, solver=EXACT):
    """Transport plan for the normalized marginals and cost encoded by ``state``."""
    normalize_vector(state.u)
    normalize_vector(state.v)
    return ForwardModel(structure, solver).plan(state)


def squared_distance(a, b):
    d = np.asarray(a) - np.asarray(b)
    return float(np.sum(d * d))


def misfit_from_plan(plan, observation, sigma):
    return squared_distance(observation, plan) / (2.0 * sigma * sigma)


def misfit(state, observation, sigma, structure, solver=EXACT):
    """Data misfit ``|T - G(state)|^2 / (2 sigma^2)``."""
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    return misfit_from_plan(forward_map(state, structure, solver), observation, sigma)


def log_posterior(state, observation, config, structure):
    """Unnormalized log posterior: ``-misfit`` inside the unit box, ``-inf`` outside."""
    if not state.in_box():
        return -math.inf
    return -misfit(state, observation, config.sigma, structure, config.solver)


def metropolis_probability(phi_current, phi_proposal):
    """``min(1, exp(phi_current - phi_proposal))`` for a symmetric proposal."""
    diff = phi_current - phi_proposal
    if diff >= 0:
        return 1.0
    return math.exp(diff)


def acceptance_probability(current, proposal, observation, config, structure):
    """Metropolis acceptance probability of moving from ``current`` to ``proposal``.

    Proposals outside the prior box have probability zero.
    """
    if not proposal.in_box():
        return 0.0
    phi_c = misfit(current, observation, config.sigma, structure, config.solver)
    phi_p = misfit(proposal, observation, config.sigma, structure, config.solver)
    return metropolis_probability(phi_c, phi_p)


@dataclass
class SweepResult:
    state: LatentState
    misfit: float
    accepted: np.ndarray
    proposed: np.ndarray
    failed: np.ndarray
    out_of_box: np.ndarray


def gibbs_sweep(state, phi, observation, model, config, rng):
    """One u -> v -> theta pass of random-walk Metropolis within Gibbs.

    ``phi`` is the misfit of ``state``; the returned :class:`SweepResult`
    carries the misfit of the new state so it never has to be recomputed.
    """
    accepted = np.zeros(3, dtype=np.int64)
    proposed = np.zeros(3, dtype=np.int64)
    failed = np.zeros(3, dtype=np.int64)
    outside = np.zeros(3, dtype=np.int64)
    inv_two_var = 1.0 / (2.0 * config.sigma * config.sigma)
    for k, name in enumerate(BLOCKS):
        current = state.block(name)
        noise = rng.normal(0.0, config.delta(name), current.size)
        threshold = rng.random()
        if name not in config.blocks:
            continue
        proposed[k] += 1
        candidate = current + noise
        if candidate.min() < 0.0 or candidate.max() > 1.0:
            outside[k] += 1
            continue
        new_state = state.replace(name, candidate)
        try:
            plan = model.plan(new_state)
        except InvOTError as exc:
            failed[k] += 1
            log.debug("forward solve failed on %s-block proposal: %s", name, exc)
            continue
        phi_new = squared_distance(observation, plan) * inv_two_var
        if threshold < metropolis_probability(phi, phi_new):
            state = new_state
            phi = phi_new
            accepted[k] += 1
    return SweepResult(state, phi, accepted, proposed, failed, outside)


def make_rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def initial_state(structure, rng):
    """Draw a starting point i.i.d. uniform on (0.05, 1]."""
    n, d = structure.n, structure.n_params
    span = 1.0 - INIT_LOWER
    u = 1.0 - span * rng.random(n)
    v = 1.0 - span * rng.random(n)
    theta = 1.0 - span * rng.random(d)
    return LatentState(u, v, theta)


def run_chain(observation, structure, config, start=None, callback=None):
    """Run random-walk Metropolis within Gibbs and collect the chain.

    Parameters
    ----------
    observation : (n, n) array
        Observed, normalized transport plan.
    structure : CostStructure
        Cost parameterization; fixes the length of ``theta``.
    config : ChainConfig
    start : LatentState, optional
        Starting point. Drawn from the seeded stream when omitted.
    callback : callable, optional
        Called as ``callback(iteration, state, misfit)`` after every sweep.

    Returns
    -------
    ChainOutput
    """
    observation = np.asarray(observation, dtype=np.float64)
    n = structure.n
    if observation.shape != (n, n):
        raise DomainError(f"observation shape {observation.shape} does not match n={n}")
    model = ForwardModel(structure, config.solver)
    rng = make_rng(config.seed)

    if start is not None:
        state = LatentState(start.u, start.v, start.theta)
        if state.theta.size != structure.n_params or state.u.size != n:
            raise DomainError("start state does not match the cost structure")
        phi = misfit_from_plan(model.plan(state), observation, config.sigma)
    else:
        for attempt in range(INIT_RETRIES):
            state = initial_state(structure, rng)
            try:
                phi = misfit_from_plan(model.plan(state), observation, config.sigma)
                break
            except InvOTError as exc:
                log.warning("initial forward solve failed (attempt %d): %s", attempt + 1, exc)
        else:
            raise InitializationError(f"no solvable starting point after {INIT_RETRIES} draws")

    start_flat = state.flat()
    start_phi = phi
    n_keep = len(range(config.burn_in, config.n_iterations, config.thinning))
    samples = np.empty((n_keep, start_flat.size))
    kept_at = np.empty(n_keep, dtype=np.int64)
    trace = np.empty(config.n_iterations)
    accepted = np.zeros(3, dtype=np.int64)
    proposed = np.zeros(3, dtype=np.int64)
    failures = np.zeros(3, dtype=np.int64)
    out_of_box = np.zeros(3, dtype=np.int64)
    slot = 0
    for it in range(config.n_iterations):
        res = gibbs_sweep(state, phi, observation, model, config, rng)
        state, phi = res.state, res.misfit
        accepted += res.accepted
        proposed += res.proposed
        failures += res.failed
        out_of_box += res.out_of_box
        trace[it] = phi
        if it >= config.burn_in and (it - config.burn_in) % config.thinning == 0:
            samples[slot] = state.flat()
            kept_at[slot] = it
            slot += 1
        if callback is not None:
            callback(it, state, phi)
    if failures.any():
        log.info("forward solver failed on %s proposals (u, v, theta)", failures.tolist())
    return ChainOutput(
        structure=structure,
        samples=samples,
        accepted=accepted,
        proposed=proposed,
        failures=failures,
        out_of_box=out_of_box,
        misfit_trace=trace,
        initial_state=start_flat,
        initial_misfit=start_phi,
        sample_iterations=kept_at,
    )


# ---------------------------------------------------------------------------
# posterior summaries


def normalized_samples(output):
    """Samples mapped to plotted quantities: M(u), M(v) and normalized cost parameters.

    Cost parameters are divided by the total mass of the raw cost matrix,
    which makes Toeplitz and general parameters equal to their entries in the
    normalized cost matrix.
    """
    n = output.n
    s = output.samples
    if s.shape[0] == 0:
        return s.copy()
    out = np.empty_like(s)
    out[:, :n] = s[:, :n] / s[:, :n].sum(axis=1, keepdims=True)
    out[:, n : 2 * n] = s[:, n : 2 * n] / s[:, n : 2 * n].sum(axis=1, keepdims=True)
    cache = {}
    for r, theta in enumerate(s[:, 2 * n :]):
        key = theta.tobytes()
        total = cache.get(key)
        if total is None:
            total = cache[key] = embed(CostParams(output.structure, theta)).sum()
        out[r, 2 * n :] = theta / total
    return out


def normalize_state(state, structure):
    """The normalized quantities of a single state, in :func:`normalized_samples` order."""
    theta = np.asarray(state.theta)
    total = embed(CostParams(structure, theta)).sum()
    return np.concatenate([state.u / state.u.sum(), state.v / state.v.sum(), theta / total])


@dataclass
class ComponentSummary:
    label: str
    mean: float
    std: float
    quantiles: dict
    bin_edges: np.ndarray
    counts: np.ndarray


def posterior_summary(output, quantiles=(0.025, 0.25, 0.5, 0.75, 0.975), bins=20):
    """Mean, std, quantiles and a histogram for every normalized component."""
    if output.n_samples < 2:
        raise EmptyChain("posterior summaries need at least two samples")
    x = normalized_samples(output)
    summaries = []
    for k, label in enumerate(output.labels()):
        col = x[:, k]
        lo, hi = col.min(), col.max()
        constant = lo == hi
        if constant:
            lo, hi = lo - 0.5e-3 * max(abs(lo), 1e-12), hi + 0.5e-3 * max(abs(hi), 1e-12)
        counts, edges = np.histogram(col, bins=bins, range=(lo, hi))
        qs = np.quantile(col, quantiles)
        summaries.append(
            ComponentSummary(
                label=label,
                # summed rounding would otherwise leave a ~1e-18 spread on a constant column
                mean=float(col[0]) if constant else float(col.mean()),
                std=0.0 if constant else float(col.std()),
                quantiles={float(q): float(v) for q, v in zip(quantiles, qs)},
                bin_edges=edges,
                counts=counts,
            )
        )
    return summaries


def coverage(output, truth, level=0.95):
    """For each normalized component, whether the truth lies in the central interval."""
    x = normalized_samples(output)
    if x.shape[0] == 0:
        raise EmptyChain("coverage needs samples")
    alpha = (1.0 - level) / 2.0
    lo = np.quantile(x, alpha, axis=0)
    hi = np.quantile(x, 1.0 - alpha, axis=0)
    t = normalize_state(truth, output.structure)
    return (t >= lo) & (t <= hi), lo, hi, t
