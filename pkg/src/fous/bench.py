"""Labelling cost versus an all-pairs clustering pass, as counts and wall time."""

import time

import numpy as np

from fous.prototypes import DistanceCounter, PrototypeBank, assign_pseudo_labels, l2_normalize, pairwise_reference

BENCH_COLUMNS = ("n", "k", "label_evals", "pairwise_evals", "label_seconds", "pairwise_seconds")


def bench_sizes(sizes, k=320, dim=64, seed=0):
    """One row per ``N`` in ``sizes``; sizes below 2 are returned in ``skipped``."""
    rng = np.random.default_rng(seed)
    rows, skipped = [], []
    for n in sizes:
        if n < 2:
            skipped.append(n)
            continue
        feats = l2_normalize(rng.normal(size=(n, dim)))
        bank = PrototypeBank(l2_normalize(rng.normal(size=(k, dim))), np.arange(k))
        lab = DistanceCounter()
        t0 = time.perf_counter()
        assign_pseudo_labels(feats, bank, lab)
        t1 = time.perf_counter()
        ref = DistanceCounter()
        pairwise_reference(feats, ref)
        t2 = time.perf_counter()
        rows.append({
            "n": n, "k": k,
            "label_evals": lab.evaluations, "pairwise_evals": ref.evaluations,
            "label_seconds": t1 - t0, "pairwise_seconds": t2 - t1,
        })
    return rows, skipped


def loglog_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x``."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 2:
        raise ValueError("need at least two sizes to fit a slope")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def format_table(rows):
    lines = ["\t".join(BENCH_COLUMNS)]
    for r in rows:
        lines.append("\t".join(
            f"{r[c]:.6f}" if c.endswith("seconds") else str(r[c]) for c in BENCH_COLUMNS))
    return "\n".join(lines)
