"""Recompute the frozen reference values in oracles.json.

Deliberately independent of the package: plain quadrature, fractions and
hand-written update rules only. Run from the repository root:

    python tests/oracles/make_oracles.py
"""

import json
import math
from fractions import Fraction
from pathlib import Path


def midpoint(f, n=200_000):
    h = 1.0 / n
    return sum(f((i + 0.5) * h) for i in range(n)) * h


def zero_mask_fraction(B):
    # unclipped: every token of the block stays clean with probability 1 - t
    return midpoint(lambda t: (1 - t) ** B)


def clipped_mean_masked(B):
    # Binomial(B, u) with u = max(t, 1/B); an empty draw is replaced by one
    def f(t):
        u = min(1.0, max(t, 1.0 / B))
        return B * u + (1 - u) ** B
    return midpoint(f)


def adamw_one_step(p, g, lr, wd, b1=0.9, b2=0.95, eps=1e-8):
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat = m / (1 - b1)
    v_hat = v / (1 - b2)
    return p - lr * wd * p - lr * m_hat / (math.sqrt(v_hat) + eps)


def sum_distribution(lo, hi):
    n = hi - lo + 1
    out = {}
    for x in range(lo, hi + 1):
        for y in range(lo, hi + 1):
            out[x + y] = out.get(x + y, 0) + Fraction(1, n * n)
    return {str(k): float(v) for k, v in sorted(out.items())}


def main():
    oracles = {
        "zero_mask_fraction": {str(B): zero_mask_fraction(B) for B in (1, 2, 4, 8)},
        "clipped_mean_masked": {str(B): clipped_mean_masked(B) for B in (1, 2, 4, 8)},
        "adamw_one_step": {
            "p": 1.0, "g": 0.5, "lr": 0.1, "wd": 0.1,
            "p_new": adamw_one_step(1.0, 0.5, 0.1, 0.1),
            "p_new_no_decay": adamw_one_step(1.0, 0.5, 0.1, 0.0),
        },
        "sum_distribution_1_4": sum_distribution(1, 4),
        "warmup_umax_half": 1e-3 + (1 - 1e-3) * 0.5,
        "uniform_logit_loss_V23": math.log(23),
    }
    path = Path(__file__).with_name("oracles.json")
    path.write_text(json.dumps(oracles, indent=2, sort_keys=True) + "\n")
    print(path)


if __name__ == "__main__":
    main()
