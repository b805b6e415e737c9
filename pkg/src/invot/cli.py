"""Command-line interface: ``invot simulate | infer | diagnose | ingest``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

Options may also come from a flat ``key = value`` file passed with
``--config``; keys are the long option names with dashes or underscores.
Command-line flags override the file, which overrides built-in defaults.
The default output directory is ``$INVOT_OUTPUT_DIR`` (or the working
directory).
"""

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

from . import __version__, data
from .costs import CostKind, CostStructure, PenaltySettings, read_edge_list
from .diagnostics import default_components, format_acceptance, resolve_components, write_all
from .errors import (
    CorruptFile,
    DegenerateObservation,
    DomainError,
    EmptyChain,
    IngestError,
    InitializationError,
    NotConverged,
    ShapeError,
    UnreachablePair,
    VersionError,
)
from .mcmc import EXACT, ChainConfig, initial_state, make_rng, run_chain
from .pipeline import (
    ObservationRecord,
    generate_synthetic,
    ingest_migration_csv,
    load_chain,
    persist_chain,
    read_migration_table,
    state_from_dict,
    state_to_dict,
)
from .transport import SinkhornSettings

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ENV = "INVOT_OUTPUT_DIR"

log = logging.getLogger("invot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config_file(path):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{line_no}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, args, inputs, outputs, started, seed=None):
    doc = {
        "command": command,
        "version": __version__,
        "argv": list(args.argv),
        "config": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "argv")},
        "seed": seed,
        "inputs": {os.fspath(p): _sha256(p) for p in inputs},
        "outputs": [os.fspath(p) for p in outputs],
        "wall_time_s": time.time() - started,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, default=str)
        fh.write("\n")
    return path


def _out_dir(args):
    d = args.out_dir or os.environ.get(OUTPUT_ENV) or "."
    os.makedirs(d, exist_ok=True)
    return d


def _manifest_path(primary):
    root, _ = os.path.splitext(primary)
    return root + ".manifest.json"


def _solver(args):
    if args.solver == "exact":
        return EXACT
    if args.epsilon is None:
        raise UsageError("--solver sinkhorn requires --epsilon")
    return SinkhornSettings(args.epsilon, args.tolerance, args.max_sinkhorn_iterations, args.log_domain)


def resolve_input(path):
    """``path`` itself if it exists, else a bundled data file of that name."""
    if path is None or os.path.exists(path):
        return path
    bundled = data.path(os.path.basename(path))
    if bundled.is_file():
        return os.fspath(bundled)
    return path


def _structure(kind, n, graph_path, c_bar):
    if kind is None:
        raise UsageError("--cost is required")
    penalty = PenaltySettings(c_bar)
    if kind == "graph":
        if not graph_path:
            raise UsageError("--cost graph requires --graph")
        graph = read_edge_list(graph_path)
        if n is not None and n != graph.n_vertices:
            raise UsageError(f"--n {n} disagrees with the graph's {graph.n_vertices} vertices")
        return CostStructure(CostKind.GRAPH, graph.n_vertices, graph=graph, penalty=penalty)
    if graph_path:
        raise UsageError("--graph only applies to --cost graph")
    if n is None:
        raise UsageError(f"--cost {kind} requires --n")
    return CostStructure(CostKind(kind), n, penalty=penalty)


def _add_solver_flags(p):
    p.add_argument("--solver", choices=["exact", "sinkhorn"], help="forward solver (default exact)")
    p.add_argument("--epsilon", type=float, help="Sinkhorn regularization")
    p.add_argument("--tolerance", type=float, help="Sinkhorn marginal tolerance (default 1e-9)")
    p.add_argument("--max-sinkhorn-iterations", type=int, help="Sinkhorn iteration budget (default 100000)")
    p.add_argument("--log-domain", action="store_true", default=None, help="run Sinkhorn in the log domain")


def _add_cost_flags(p):
    p.add_argument("--cost", choices=[k.value for k in CostKind], help="cost parameterization")
    p.add_argument("--n", type=int, help="number of locations (implied by --graph)")
    p.add_argument("--graph", help="edge-list file for graph-based cost")
    p.add_argument("--c-bar", type=float, help="diagonal staying penalty (default 10)")


DEFAULTS = {
    "simulate": {
        "sigma": 0.04,
        "seed": 0,
        "solver": "exact",
        "tolerance": 1e-9,
        "max_sinkhorn_iterations": 100_000,
        "log_domain": False,
        "c_bar": 10.0,
    },
    "infer": {
        "sigma": 0.04,
        "delta2": [0.02, 0.02, 0.02],
        "iterations": 500_000,
        "burn_in": 300_000,
        "thinning": 1,
        "seed": 0,
        "chains": 1,
        "solver": "exact",
        "tolerance": 1e-9,
        "max_sinkhorn_iterations": 100_000,
        "log_domain": False,
    },
    "diagnose": {"bins": 20, "level": 0.95},
    "ingest": {"selection": "R", "c_bar": 10.0},
}

CONFIG_TYPES = {
    "sigma": float,
    "epsilon": float,
    "tolerance": float,
    "c_bar": float,
    "level": float,
    "n": int,
    "seed": int,
    "truth_seed": int,
    "iterations": int,
    "burn_in": int,
    "thinning": int,
    "chains": int,
    "bins": int,
    "max_sinkhorn_iterations": int,
    "delta2": lambda s: [float(x) for x in s.replace(",", " ").split()],
    "log_domain": lambda s: s.lower() in ("1", "true", "yes", "on"),
    "components": lambda s: s.replace(",", " ").split(),
}


def _apply_defaults(args, command):
    """Fill unset options from the config file, then from built-in defaults."""
    from_file = {}
    if getattr(args, "config", None):
        from_file = read_config_file(args.config)
    for key, raw in from_file.items():
        if not hasattr(args, key):
            raise UsageError(f"unknown config key {key!r} for {command}")
        if getattr(args, key) is None:
            conv = CONFIG_TYPES.get(key, str)
            try:
                setattr(args, key, conv(raw))
            except ValueError:
                raise UsageError(f"config key {key!r}: bad value {raw!r}") from None
    for key, value in DEFAULTS.get(command, {}).items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    return args


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    started = time.time()
    structure = _structure(args.cost, args.n, args.graph, args.c_bar)
    solver = _solver(args)
    inputs = [args.graph] if args.graph else []
    if args.truth:
        with open(args.truth) as fh:
            truth = state_from_dict(json.load(fh))
        inputs.append(args.truth)
    else:
        truth_seed = args.truth_seed if args.truth_seed is not None else args.seed + 1
        truth = initial_state(structure, make_rng(truth_seed))
    if truth.u.size != structure.n or truth.theta.size != structure.n_params:
        raise UsageError("truth does not match the cost structure")
    if args.sigma < 0:
        raise UsageError("--sigma must be nonnegative")
    record = generate_synthetic(truth, structure, args.sigma, args.seed, solver)
    out_dir = _out_dir(args)
    path = args.output or os.path.join(out_dir, f"observation-{structure.kind.value}-n{structure.n}-s{args.seed}.json")
    record.save(path)
    truth_path = os.path.splitext(path)[0] + ".truth.json"
    with open(truth_path, "w") as fh:
        json.dump(state_to_dict(truth), fh, indent=1)
    manifest = write_manifest(_manifest_path(path), "simulate", args, inputs, [path, truth_path], started, args.seed)
    print(f"wrote {path}\nwrote {truth_path}\nwrote {manifest}")
    return EXIT_OK


def _infer_structure(args, record):
    if args.cost is not None:
        c_bar = args.c_bar if args.c_bar is not None else PenaltySettings().c_bar
        return _structure(args.cost, args.n if args.n is not None else record.n, args.graph, c_bar)
    if record.structure is None:
        raise UsageError("observation has no cost structure; pass --cost (and --graph)")
    s = record.structure
    if args.c_bar is not None and args.c_bar != s.penalty.c_bar:
        s = CostStructure(s.kind, s.n, graph=s.graph, penalty=PenaltySettings(args.c_bar))
    return s


def _run_one(job):
    observation, structure, config = job
    return run_chain(observation, structure, config)


def cmd_infer(args):
    started = time.time()
    record = ObservationRecord.load(args.observation)
    structure = _infer_structure(args, record)
    args.c_bar = structure.penalty.c_bar
    if len(args.delta2) != 3 or min(args.delta2) <= 0:
        raise UsageError("--delta2 takes three positive proposal variances (u v theta)")
    if not 0 <= args.burn_in < args.iterations:
        raise UsageError("need 0 <= --burn-in < --iterations")
    if args.chains < 1:
        raise UsageError("--chains must be at least 1")
    solver = _solver(args)
    du, dv, dt = (math.sqrt(x) for x in args.delta2)
    configs = [
        ChainConfig(
            sigma=args.sigma,
            delta_u=du,
            delta_v=dv,
            delta_theta=dt,
            n_iterations=args.iterations,
            burn_in=args.burn_in,
            seed=args.seed + k,
            solver=solver,
            thinning=args.thinning,
        )
        for k in range(args.chains)
    ]
    jobs = [(record.observation, structure, cfg) for cfg in configs]
    if args.chains == 1:
        outputs = [_run_one(jobs[0])]
    else:
        with ProcessPoolExecutor(max_workers=min(args.chains, os.cpu_count() or 1)) as pool:
            outputs = list(pool.map(_run_one, jobs))
    out_dir = _out_dir(args)
    base = args.output or os.path.join(
        out_dir, f"chain-{structure.kind.value}-n{structure.n}-{solver_tag(solver)}-s{args.seed}.chain"
    )
    paths = []
    for k, (out, cfg) in enumerate(zip(outputs, configs)):
        if args.chains == 1:
            path = base
        else:
            root, ext = os.path.splitext(base)
            path = f"{root}.{k}{ext or '.chain'}"
        persist_chain(out, cfg, path)
        paths.append(path)
        print(f"chain {k} (seed {cfg.seed}): {path}")
        print(format_acceptance(out))
        print(f"misfit: initial {out.initial_misfit:.6g}  final {out.misfit_trace[-1]:.6g}  min {out.misfit_trace.min():.6g}")
    inputs = [args.observation] + ([args.graph] if args.graph else [])
    manifest = write_manifest(_manifest_path(paths[0]), "infer", args, inputs, paths, started, args.seed)
    print(f"wrote {manifest}")
    return EXIT_OK


def solver_tag(solver):
    if solver is EXACT or getattr(solver, "epsilon", None) is None:
        return "exact"
    return f"sinkhorn{solver.epsilon:g}"


def cmd_diagnose(args):
    started = time.time()
    output, config = load_chain(args.chain)
    if output.n_samples < 2:
        raise EmptyChain("the chain retained fewer than two samples")
    try:
        cols = resolve_components(output, args.components) if args.components else None
    except (IndexError, KeyError) as exc:
        raise UsageError(str(exc.args[0])) from None
    if cols is None:
        cols = resolve_components(output, default_components(output))
    truth = None
    inputs = [args.chain]
    if args.truth:
        with open(args.truth) as fh:
            truth = state_from_dict(json.load(fh))
        inputs.append(args.truth)
    elif args.observation:
        truth = ObservationRecord.load(args.observation).truth
        inputs.append(args.observation)
    if truth is not None and (truth.u.size != output.n or truth.theta.size != output.structure.n_params):
        raise UsageError("truth does not match the chain's cost structure")
    out_dir = _out_dir(args)
    stem = os.path.splitext(os.path.basename(args.chain))[0]
    paths = write_all(output, out_dir, stem, cols, bins=args.bins, truth=truth, level=args.level)
    manifest = write_manifest(
        os.path.join(out_dir, f"{stem}.diagnose.manifest.json"), "diagnose", args, inputs, paths, started, config.seed
    )
    print(format_acceptance(output))
    for p in paths + [manifest]:
        print(f"wrote {p}")
    return EXIT_OK


def _parse_pairs(items):
    selection = {}
    for item in items or []:
        try:
            pair, reporter = item.split("=")
            a, b = pair.split(":")
        except ValueError:
            raise UsageError(f"--pair expects ORIGIN:DEST=R|S, got {item!r}") from None
        reporter = reporter.strip().upper()
        if reporter not in ("R", "S"):
            raise UsageError(f"--pair reporter must be R or S, got {reporter!r}")
        selection[(a.strip(), b.strip())] = reporter
    return selection


def cmd_ingest(args):
    started = time.time()
    default = args.selection.upper()
    if default not in ("R", "S"):
        raise UsageError("--selection must be R or S")
    pairs = _parse_pairs(args.pair)
    selection = default
    if pairs:
        # pairs not listed fall back to the chosen default reporter
        codes = read_migration_table(args.csv).country_codes
        unknown = {c for pair in pairs for c in pair} - set(codes)
        if unknown:
            raise UsageError(f"--pair names unknown countries: {' '.join(sorted(unknown))}")
        selection = {(a, b): default for a in codes for b in codes if a != b}
        selection.update(pairs)
    structure = None
    inputs = [args.csv]
    if args.cost:
        structure = _structure(args.cost, args.n, args.graph, args.c_bar)
        if args.graph:
            inputs.append(args.graph)
    record = ingest_migration_csv(args.csv, selection, structure)
    out_dir = _out_dir(args)
    path = args.output or os.path.join(out_dir, os.path.splitext(os.path.basename(args.csv))[0] + ".observation.json")
    record.save(path)
    manifest = write_manifest(_manifest_path(path), "ingest", args, inputs, [path], started)
    print(f"countries: {' '.join(record.labels)}")
    print(f"wrote {path}\nwrote {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="invot", description="Bayesian inverse optimal transport toolkit")
    parser.add_argument("--version", action="version", version=f"invot {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a noisy synthetic observation")
    _add_cost_flags(p)
    _add_solver_flags(p)
    p.add_argument("--sigma", type=float, help="noise std on the normalized plan (default 0.04)")
    p.add_argument("--seed", type=int, help="noise seed (default 0)")
    p.add_argument("--truth", help="JSON file with the true latent state {u, v, theta}")
    p.add_argument("--truth-seed", type=int, help="seed for a random truth (default seed+1)")
    p.add_argument("--output", help="observation file to write")
    p.add_argument("--out-dir", help=f"output directory (default ${OUTPUT_ENV} or .)")
    p.add_argument("--config", help="flat key = value option file")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", help="sample the posterior with RwM-within-Gibbs")
    p.add_argument("--observation", required=True, help="observation JSON from simulate or ingest")
    _add_cost_flags(p)
    _add_solver_flags(p)
    p.add_argument("--sigma", type=float, help="likelihood noise std (default 0.04)")
    p.add_argument("--delta2", type=float, nargs=3, metavar=("U", "V", "THETA"),
                   help="proposal variances per block (default 0.02 0.02 0.02)")
    p.add_argument("--iterations", type=int, help="sweeps (default 500000)")
    p.add_argument("--burn-in", type=int, help="discarded sweeps (default 300000)")
    p.add_argument("--thinning", type=int, help="keep every k-th sweep after burn-in (default 1)")
    p.add_argument("--seed", type=int, help="chain seed (default 0); chain k uses seed+k")
    p.add_argument("--chains", type=int, help="independent chains run in parallel (default 1)")
    p.add_argument("--output", help="chain file to write")
    p.add_argument("--out-dir", help=f"output directory (default ${OUTPUT_ENV} or .)")
    p.add_argument("--config", help="flat key = value option file")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("diagnose", help="emit CSV/JSON reports for a chain")
    p.add_argument("--chain", required=True)
    p.add_argument("--components", nargs="+", help="labels or indices (default: first three of each block)")
    p.add_argument("--bins", type=int, help="histogram bins (default 20)")
    p.add_argument("--truth", help="truth JSON for a coverage report")
    p.add_argument("--observation", help="synthetic observation file carrying the truth")
    p.add_argument("--level", type=float, help="central interval level for coverage (default 0.95)")
    p.add_argument("--out-dir", help=f"output directory (default ${OUTPUT_ENV} or .)")
    p.add_argument("--config", help="flat key = value option file")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ingest", help="turn a migration CSV into an observation")
    p.add_argument("--csv", required=True)
    p.add_argument("--selection", help="reporter used for every pair: R (default) or S")
    p.add_argument("--pair", action="append", help="per-pair override ORIGIN:DEST=R|S (repeatable)")
    _add_cost_flags(p)
    p.add_argument("--output")
    p.add_argument("--out-dir", help=f"output directory (default ${OUTPUT_ENV} or .)")
    p.add_argument("--config", help="flat key = value option file")
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        _apply_defaults(args, args.command)
        for key in ("graph", "csv"):
            if getattr(args, key, None):
                setattr(args, key, resolve_input(getattr(args, key)))
        return args.func(args)
    except UsageError as exc:
        print(f"invot {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NotConverged, InitializationError) as exc:
        print(f"invot {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        IngestError,
        CorruptFile,
        VersionError,
        DegenerateObservation,
        UnreachablePair,
        DomainError,
        ShapeError,
        EmptyChain,
        OSError,
        ValueError,
    ) as exc:
        print(f"invot {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
