#!/usr/bin/env python3
"""Regenerate the frozen statistical-oracle fixtures.

Draws randomized Welch t-test and Scheffe post hoc cases, computes the
reference answers with scipy's distributions, and freezes everything into
tests/data/stat_fixtures.json. The package's own implementations never
see scipy, so the frozen file is an independent cross-check.

Usage: python3 scripts/make_stat_fixtures.py
"""

import json
from pathlib import Path

import numpy as np
from scipy import stats

OUT = Path(__file__).resolve().parent.parent / "tests" / "data" / "stat_fixtures.json"
N_WELCH = 50
N_SCHEFFE = 50
SEED = 20240711


def welch_case(rng):
    na = int(rng.integers(3, 40))
    nb = int(rng.integers(3, 40))
    loc_a = float(rng.normal(0, 3))
    loc_b = loc_a + float(rng.normal(0, 2))
    scale_a = float(rng.uniform(0.2, 4.0))
    scale_b = float(rng.uniform(0.2, 4.0))
    a = rng.normal(loc_a, scale_a, size=na)
    b = rng.normal(loc_b, scale_b, size=nb)
    res = stats.ttest_ind(a, b, equal_var=False)
    # Welch-Satterthwaite dof, written out for older scipy without res.df
    va, vb = a.var(ddof=1), b.var(ddof=1)
    se2 = va / na + vb / nb
    dof = se2**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    if hasattr(res, "df"):
        assert abs(float(res.df) - dof) < 1e-9 * max(1.0, dof)
    return {
        "a": a.tolist(),
        "b": b.tolist(),
        "t": float(res.statistic),
        "dof": float(dof),
        "p": float(res.pvalue),
    }


def scheffe_case(rng):
    k = int(rng.integers(3, 7))
    alpha = float(rng.choice([0.01, 0.05]))
    groups = []
    for _ in range(k):
        n = int(rng.integers(4, 25))
        loc = float(rng.normal(0, 2))
        scale = float(rng.uniform(0.3, 3.0))
        groups.append(rng.normal(loc, scale, size=n).tolist())

    ns = np.array([len(g) for g in groups], dtype=float)
    means = np.array([np.mean(g) for g in groups])
    n_total = int(ns.sum())
    sse = sum(float(((np.array(g) - np.mean(g)) ** 2).sum()) for g in groups)
    mse = sse / (n_total - k)
    critical = (k - 1) * float(stats.f.isf(alpha, k - 1, n_total - k))
    stat = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            s = (means[i] - means[j]) ** 2 / (mse * (1 / ns[i] + 1 / ns[j]))
            stat[i, j] = stat[j, i] = s
    significant = (stat > critical).tolist()
    for i in range(k):
        significant[i][i] = False
    return {
        "groups": groups,
        "alpha": alpha,
        "mse": mse,
        "critical": critical,
        "statistic": stat.tolist(),
        "significant": significant,
    }


def main():
    rng = np.random.default_rng(SEED)
    fixtures = {
        "seed": SEED,
        "oracle": f"scipy {__import__('scipy').__version__}",
        "welch": [welch_case(rng) for _ in range(N_WELCH)],
        "scheffe": [scheffe_case(rng) for _ in range(N_SCHEFFE)],
    }
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(fixtures, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {OUT} ({N_WELCH} welch, {N_SCHEFFE} scheffe cases)")


if __name__ == "__main__":
    main()
