"""Observations in and chains out.

Synthetic observations follow solve -> add Gaussian noise -> clip negatives ->
renormalize. Migration tables are read from an origin/reporter CSV. Chains are
persisted as a JSON header line followed by line-oriented sections.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .costs import CostKind, CostStructure, DirectedGraph, PenaltySettings
from .errors import CorruptFile, DegenerateObservation, IngestError, VersionError
from .mcmc import (
    EXACT,
    ChainConfig,
    ChainOutput,
    ForwardModel,
    LatentState,
    make_rng,
    solver_from_dict,
    solver_to_dict,
)
from .simplex import as_prob_matrix

CHAIN_FORMAT = "invot-chain"
CHAIN_VERSION = 1
OBSERVATION_FORMAT = "invot-observation"
OBSERVATION_VERSION = 1
RECEIVING = "R"
SENDING = "S"


# ---------------------------------------------------------------------------
# structure <-> dict


def structure_to_dict(structure):
    d = {"kind": structure.kind.value, "n": structure.n, "c_bar": structure.penalty.c_bar}
    if structure.graph is not None:
        d["edges"] = [list(e) for e in structure.graph.edges]
    return d


def structure_from_dict(d):
    graph = None
    if d.get("edges") is not None:
        graph = DirectedGraph(d["n"], tuple(tuple(e) for e in d["edges"]))
    return CostStructure(CostKind(d["kind"]), d["n"], graph=graph, penalty=PenaltySettings(d["c_bar"]))


def state_to_dict(state):
    return {"u": state.u.tolist(), "v": state.v.tolist(), "theta": state.theta.tolist()}


def state_from_dict(d):
    return LatentState(d["u"], d["v"], d["theta"])


# ---------------------------------------------------------------------------
# observations


@dataclass(frozen=True)
class Synthetic:
    truth: LatentState
    sigma: float
    seed: int
    solver: object = EXACT

    def to_dict(self):
        return {
            "kind": "synthetic",
            "truth": state_to_dict(self.truth),
            "sigma": self.sigma,
            "seed": self.seed,
            "solver": solver_to_dict(self.solver),
        }


@dataclass(frozen=True)
class Ingested:
    source: str
    selection: object = RECEIVING

    def to_dict(self):
        sel = self.selection
        if isinstance(sel, dict):
            sel = {f"{a}>{b}": r for (a, b), r in sorted(sel.items())}
        return {"kind": "ingested", "source": self.source, "selection": sel}


def provenance_from_dict(d):
    if d["kind"] == "synthetic":
        return Synthetic(state_from_dict(d["truth"]), d["sigma"], d["seed"], solver_from_dict(d["solver"]))
    sel = d.get("selection", RECEIVING)
    if isinstance(sel, dict):
        sel = {tuple(k.split(">")): r for k, r in sel.items()}
    return Ingested(d["source"], sel)


@dataclass(frozen=True)
class ObservationRecord:
    observation: np.ndarray
    provenance: object
    structure: CostStructure = None
    labels: tuple = None

    def __post_init__(self):
        obs = as_prob_matrix(self.observation, atol=1e-8)
        object.__setattr__(self, "observation", obs)
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
            if len(self.labels) != obs.shape[0]:
                raise ValueError("one label per location is required")
        if self.structure is not None and self.structure.n != obs.shape[0]:
            raise ValueError("structure size does not match the observation")

    @property
    def n(self):
        return self.observation.shape[0]

    @property
    def truth(self):
        return self.provenance.truth if isinstance(self.provenance, Synthetic) else None

    def to_dict(self):
        return {
            "format": OBSERVATION_FORMAT,
            "version": OBSERVATION_VERSION,
            "n": self.n,
            "observation": self.observation.tolist(),
            "labels": list(self.labels) if self.labels is not None else None,
            "structure": structure_to_dict(self.structure) if self.structure is not None else None,
            "provenance": self.provenance.to_dict(),
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CorruptFile(f"{path}: not valid JSON ({exc})") from None
        if d.get("format") != OBSERVATION_FORMAT:
            raise CorruptFile(f"{path}: not an observation file")
        if d.get("version") != OBSERVATION_VERSION:
            raise VersionError(f"{path}: observation format version {d.get('version')!r} is not supported")
        structure = structure_from_dict(d["structure"]) if d.get("structure") else None
        return cls(np.array(d["observation"]), provenance_from_dict(d["provenance"]), structure, d.get("labels"))


def generate_synthetic(truth, structure, sigma, seed, solver=EXACT):
    """Noisy observation of the plan produced by ``truth``.

    Noise is i.i.d. ``N(0, sigma^2)`` per entry of the normalized plan, drawn
    from ``Philox(seed)``; negative entries are then set to zero and the
    matrix is rescaled to unit mass. With ``sigma == 0`` the clean plan is
    returned untouched.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if not truth.in_box():
        raise ValueError("truth must lie in the unit box")
    plan = ForwardModel(structure, solver).plan(truth)
    if sigma == 0:
        obs = plan
    else:
        noise = make_rng(seed).normal(0.0, sigma, plan.shape)
        obs = np.clip(plan + noise, 0.0, None)
        total = obs.sum()
        if not total > 0:
            raise DegenerateObservation("every entry was clipped to zero")
        obs = obs / total
    return ObservationRecord(obs, Synthetic(truth, sigma, seed, solver), structure)


# ---------------------------------------------------------------------------
# migration tables


@dataclass
class MigrationTable:
    """Reported origin-destination counts.

    ``reported[r]`` is an n x n array for reporter ``r`` in {"R", "S"}; rows
    the file did not provide are NaN.
    """

    country_codes: tuple
    reported: dict = field(default_factory=dict)
    source: str = ""

    def counts(self, selection=RECEIVING):
        n = len(self.country_codes)
        out = np.zeros((n, n))
        for i, a in enumerate(self.country_codes):
            for j, b in enumerate(self.country_codes):
                if i == j:
                    continue
                if isinstance(selection, dict):
                    reporter = selection.get((a, b), RECEIVING)
                else:
                    reporter = selection
                if reporter not in (RECEIVING, SENDING):
                    raise IngestError(f"unknown reporter {reporter!r} for pair {a}->{b}")
                value = self.reported[reporter][i, j]
                if math.isnan(value):
                    raise IngestError(f"{self.source}: no {reporter} count for pair {a}->{b} (row {a}, column {b})")
                out[i, j] = value
        return out


def read_migration_table(path):
    """Parse ``origin,reporter,<dest_1>,...,<dest_n>`` rows into a :class:`MigrationTable`."""
    path = os.fspath(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        if len(header) < 3 or header[0].lower() != "origin" or header[1].lower() != "reporter":
            raise IngestError(f"{path}: header must start with 'origin,reporter'")
        codes = tuple(header[2:])
        if len(set(codes)) != len(codes):
            raise IngestError(f"{path}: duplicate destination labels")
        index = {c: k for k, c in enumerate(codes)}
        n = len(codes)
        reported = {RECEIVING: np.full((n, n), np.nan), SENDING: np.full((n, n), np.nan)}
        seen = set()
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != n + 2:
                raise IngestError(f"{path}:{line_no}: expected {n + 2} fields, got {len(row)}")
            origin, reporter = row[0].strip(), row[1].strip().upper()
            if origin not in index:
                raise IngestError(f"{path}:{line_no}: origin {origin!r} is not a destination column")
            if reporter not in reported:
                raise IngestError(f"{path}:{line_no}: reporter must be R or S, got {reporter!r}")
            if (origin, reporter) in seen:
                raise IngestError(f"{path}:{line_no}: duplicate row for ({origin}, {reporter})")
            seen.add((origin, reporter))
            i = index[origin]
            for j, cell in enumerate(row[2:]):
                cell = cell.strip().replace(",", "").replace("_", "")
                try:
                    value = float(int(cell))
                except ValueError:
                    raise IngestError(f"{path}:{line_no}: count for {origin}->{codes[j]} is not an integer: {cell!r}") from None
                if value < 0:
                    raise IngestError(f"{path}:{line_no}: negative count for {origin}->{codes[j]}")
                reported[reporter][i, j] = value
    return MigrationTable(codes, reported, path)


def ingest_migration_csv(path, selection=RECEIVING, structure=None):
    """Read a migration table and turn the selected counts into an observation.

    ``selection`` is ``"R"`` (receiving-country reports), ``"S"`` (sending) or
    a dict ``{(origin, dest): "R" | "S"}``; pairs missing from the dict use
    receiving data. The diagonal is zeroed and the matrix scaled to unit mass.
    """
    table = read_migration_table(path)
    counts = table.counts(selection)
    np.fill_diagonal(counts, 0.0)
    total = counts.sum()
    if not total > 0:
        raise IngestError(f"{path}: selected counts are all zero")
    source = os.path.basename(os.fspath(path))
    return ObservationRecord(counts / total, Ingested(source, selection), structure, table.country_codes)


# ---------------------------------------------------------------------------
# chain persistence


def _fmt(x):
    return repr(float(x))


def persist_chain(output, config, path):
    """Write a chain file: JSON header line, ``#misfit`` and ``#samples`` sections, ``#end``.

    Floats are written with ``repr`` so they read back bit-identically.
    """
    labels = output.labels()
    header = {
        "format": CHAIN_FORMAT,
        "version": CHAIN_VERSION,
        "config": config.to_dict(),
        "structure": structure_to_dict(output.structure),
        "accepted": output.accepted.tolist(),
        "proposed": output.proposed.tolist(),
        "failures": output.failures.tolist(),
        "out_of_box": output.out_of_box.tolist(),
        "initial_state": [float(x) for x in output.initial_state],
        "initial_misfit": float(output.initial_misfit),
        "n_trace": int(output.misfit_trace.size),
        "n_samples": int(output.n_samples),
        "columns": labels,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        fh.write("#misfit\n")
        fh.writelines(_fmt(x) + "\n" for x in output.misfit_trace)
        fh.write("#samples\n")
        fh.write(",".join(["iteration"] + labels) + "\n")
        for it, row in zip(output.sample_iterations, output.samples):
            fh.write(",".join([str(int(it))] + [_fmt(x) for x in row]) + "\n")
        fh.write("#end\n")
    os.replace(tmp, path)


def _expect(lines, pos, marker, path):
    if pos >= len(lines) or lines[pos] != marker:
        raise CorruptFile(f"{path}: expected {marker!r} at line {pos + 1}")
    return pos + 1


def load_chain(path):
    """Inverse of :func:`persist_chain`; returns ``(ChainOutput, ChainConfig)``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorruptFile(f"{path}: empty chain file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path}: unreadable header ({exc})") from None
    if header.get("format") != CHAIN_FORMAT:
        raise CorruptFile(f"{path}: not a chain file")
    if header.get("version") != CHAIN_VERSION:
        raise VersionError(f"{path}: chain format version {header.get('version')!r} is not supported")
    n_trace, n_samples = header["n_trace"], header["n_samples"]
    pos = _expect(lines, 1, "#misfit", path)
    if pos + n_trace > len(lines):
        raise CorruptFile(f"{path}: misfit section truncated")
    try:
        trace = np.array([float(x) for x in lines[pos : pos + n_trace]])
    except ValueError:
        raise CorruptFile(f"{path}: misfit section truncated or malformed") from None
    pos = _expect(lines, pos + n_trace, "#samples", path)
    if pos >= len(lines) or lines[pos].split(",")[1:] != header["columns"]:
        raise CorruptFile(f"{path}: sample header does not match the declared columns")
    pos += 1
    width = len(header["columns"])
    rows = lines[pos : pos + n_samples]
    if len(rows) != n_samples:
        raise CorruptFile(f"{path}: expected {n_samples} sample rows, found {len(rows)}")
    samples = np.empty((n_samples, width))
    iterations = np.empty(n_samples, dtype=np.int64)
    for r, line in enumerate(rows):
        fields = line.split(",")
        if len(fields) != width + 1:
            raise CorruptFile(f"{path}: sample row {r} has {len(fields)} fields")
        try:
            iterations[r] = int(fields[0])
            samples[r] = [float(x) for x in fields[1:]]
        except ValueError:
            raise CorruptFile(f"{path}: sample row {r} is malformed") from None
    _expect(lines, pos + n_samples, "#end", path)
    output = ChainOutput(
        structure=structure_from_dict(header["structure"]),
        samples=samples,
        accepted=np.array(header["accepted"], dtype=np.int64),
        proposed=np.array(header["proposed"], dtype=np.int64),
        failures=np.array(header["failures"], dtype=np.int64),
        out_of_box=np.array(header["out_of_box"], dtype=np.int64),
        misfit_trace=trace,
        initial_state=np.array(header["initial_state"], dtype=np.float64),
        initial_misfit=header["initial_misfit"],
        sample_iterations=iterations,
    )
    return output, ChainConfig.from_dict(header["config"])
