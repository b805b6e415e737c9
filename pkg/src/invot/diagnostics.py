"""Plot-ready reports for a finished chain: running means, histograms,
acceptance tables, misfit traces and truth coverage.

Everything here works on the normalized quantities M(u), M(v) and the
normalized cost parameters.
"""

import csv
import json
import os

import numpy as np

from .mcmc import coverage, normalized_samples, posterior_summary

BLOCK_NAMES = ("u", "v", "theta")


def default_components(output, per_block=3):
    """First ``per_block`` labels of each block."""
    labels = output.labels()
    n, d = output.n, output.structure.n_params
    spans = [(0, n), (n, 2 * n), (2 * n, 2 * n + d)]
    picked = []
    for lo, hi in spans:
        picked.extend(labels[lo : min(hi, lo + per_block)])
    return picked


def resolve_components(output, selection):
    """Map labels or integer indices to column indices; raises IndexError/KeyError."""
    labels = output.labels()
    index = {lab: k for k, lab in enumerate(labels)}
    cols = []
    for item in selection:
        if isinstance(item, int) or (isinstance(item, str) and item.lstrip("-").isdigit()):
            k = int(item)
            if not 0 <= k < len(labels):
                raise IndexError(f"component index {k} out of range [0, {len(labels)})")
            cols.append(k)
        else:
            if item not in index:
                raise KeyError(f"unknown component {item!r}")
            cols.append(index[item])
    return cols


def acceptance_table(output):
    """Acceptance rates in percent, keyed a (overall), a_u, a_v, a_theta."""
    rates = output.acceptance_rates
    raw = output.raw_acceptance_rates
    return {
        "a": 100.0 * output.overall_acceptance,
        "a_u": 100.0 * float(rates[0]),
        "a_v": 100.0 * float(rates[1]),
        "a_theta": 100.0 * float(rates[2]),
        "raw": {
            "a": 100.0 * output.raw_overall_acceptance,
            "a_u": 100.0 * float(raw[0]),
            "a_v": 100.0 * float(raw[1]),
            "a_theta": 100.0 * float(raw[2]),
        },
        "accepted": output.accepted.tolist(),
        "proposed": output.proposed.tolist(),
        "out_of_box": output.out_of_box.tolist(),
        "solver_failures": output.failures.tolist(),
    }


def format_acceptance(output):
    t = acceptance_table(output)
    return (
        f"acceptance (%)  a={t['a']:.1f}  a_u={t['a_u']:.1f}  a_v={t['a_v']:.1f}  a_theta={t['a_theta']:.1f}\n"
        f"incl. out-of-box a={t['raw']['a']:.1f}  a_u={t['raw']['a_u']:.1f}  "
        f"a_v={t['raw']['a_v']:.1f}  a_theta={t['raw']['a_theta']:.1f}"
    )


def normalized_running_means(output, cols):
    x = normalized_samples(output)[:, cols]
    if x.shape[0] == 0:
        return x
    return np.cumsum(x, axis=0) / np.arange(1, x.shape[0] + 1)[:, None]


def write_running_means(output, cols, path):
    labels = output.labels()
    means = normalized_running_means(output, cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([labels[k] for k in cols])
        for row in means:
            w.writerow([repr(float(x)) for x in row])
    return path


def write_histograms(output, cols, path, bins=20):
    """Long-format CSV: component, bin_left, bin_right, count."""
    summaries = posterior_summary(output, bins=bins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "bin_left", "bin_right", "count"])
        for k in cols:
            s = summaries[k]
            for lo, hi, c in zip(s.bin_edges[:-1], s.bin_edges[1:], s.counts):
                w.writerow([s.label, repr(float(lo)), repr(float(hi)), int(c)])
    return path


def write_summary(output, path, bins=20):
    summaries = posterior_summary(output, bins=bins)
    doc = {
        s.label: {
            "mean": s.mean,
            "std": s.std,
            "quantiles": {str(q): v for q, v in s.quantiles.items()},
        }
        for s in summaries
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return path


def write_misfit_trace(output, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "misfit"])
        for it, phi in enumerate(output.misfit_trace):
            w.writerow([it, repr(float(phi))])
    return path


def write_acceptance(output, path):
    with open(path, "w") as fh:
        json.dump(acceptance_table(output), fh, indent=1)
    return path


def coverage_report(output, truth, level=0.95):
    covered, lo, hi, t = coverage(output, truth, level)
    rows = [
        {"component": lab, "truth": float(tv), "lower": float(a), "upper": float(b), "covered": bool(c)}
        for lab, tv, a, b, c in zip(output.labels(), t, lo, hi, covered)
    ]
    return {"level": level, "fraction_covered": float(np.mean(covered)), "components": rows}


def write_coverage(output, truth, path, level=0.95):
    with open(path, "w") as fh:
        json.dump(coverage_report(output, truth, level), fh, indent=1)
    return path


def write_all(output, out_dir, stem, cols, bins=20, truth=None, level=0.95):
    """Write every report into ``out_dir``; returns the list of paths."""
    os.makedirs(out_dir, exist_ok=True)
    p = lambda name: os.path.join(out_dir, f"{stem}.{name}")  # noqa: E731
    paths = [
        write_running_means(output, cols, p("running_means.csv")),
        write_histograms(output, cols, p("histograms.csv"), bins),
        write_summary(output, p("summary.json"), bins),
        write_misfit_trace(output, p("misfit.csv")),
        write_acceptance(output, p("acceptance.json")),
    ]
    if truth is not None:
        paths.append(write_coverage(output, truth, p("coverage.json"), level))
    return paths
