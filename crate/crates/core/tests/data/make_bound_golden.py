"""Regenerates bound_golden.json from the closed forms with 50-digit arithmetic."""

import json
from mpmath import mp, mpf, sqrt, log, ceil

mp.dps = 50


def exact_depth(n, a):
    total, level, d = 0, 1, 0
    while total < n:
        total += level
        level *= a
        d += 1
    return d if total == n else None


def full_tree(s, a, h, need_h=True):
    if s < 6 or a < 2:
        return False
    d = exact_depth(s - 3, a)
    return d is not None and (not need_h or h >= 3 * d)


def state_factor(s, a, h):
    return min(mpf(s), mpf(a) ** (mpf(h) / 3 - 2))


def evaluate(tid, H, A, S=None, T=None, eps=None, delta=None):
    h, a = mpf(H), mpf(A)
    ok = True
    if tid == "regret-s3":
        k = a
        e = (1 - 1 / k) * sqrt(k / T) / (2 * sqrt(2))
        ok = A >= 2 and H >= 2 and T >= 2 * A and e <= mpf(1) / 4
        raw = h * sqrt(a * T) / (32 * sqrt(2))
    elif tid == "regret-s4":
        e = (1 - 2 / (h * a)) * sqrt(h * a / T) / 4
        ok = H >= 4 and T >= H * A and e <= mpf(1) / 4
        raw = sqrt(h ** 3 * a * T) / 128
    elif tid == "regret-tree":
        ok = full_tree(S, A, H) and T >= H * S * A
        leaves = (1 - 1 / a) * (S - 3) + 1 / a
        k = (h / 3) * leaves * a
        e = (1 - 1 / k) * sqrt(k / T) / (2 * sqrt(2))
        ok = ok and e <= mpf(1) / 4
        raw = sqrt(h ** 3 * S * a * T) / (48 * sqrt(6))
    elif tid == "regret-tree-relaxed":
        ok = False
        raw = sqrt(state_factor(S, A, H)) * sqrt(h ** 3 * a * T)
    elif tid == "regret-stationary":
        ok = False
        raw = sqrt(h ** 2 * S * a * T)
    elif tid == "bpi-s4":
        ok = H >= 4 and eps <= (h / 2 - 1) / 8 and 2.4 * delta < 1
        raw = h ** 3 * a / eps ** 2 * log(1 / (mpf("2.4") * delta)) / 1024
    elif tid in ("bpi-tree", "pac-tree"):
        ok = full_tree(S, A, H) and H >= 4 and eps <= h / 24 and delta <= mpf(1) / 16
        base = h ** 3 * S * a / eps ** 2 * log(1 / delta)
        raw = base / 3456 if tid == "bpi-tree" else base / 6912 - 1
    elif tid in ("bpi-tree-relaxed", "pac-tree-relaxed"):
        ok = False
        base = state_factor(S, A, H) * h ** 3 * a / eps ** 2 * log(1 / delta)
        raw = base if tid == "bpi-tree-relaxed" else base - 1
    elif tid == "bpi-stationary":
        ok = False
        raw = S * a * h ** 2 / eps ** 2 * log(1 / delta)
    else:
        raise ValueError(tid)
    if raw < 0:
        ok = False
    return raw, ok


CASES = [
    ("regret-s3", dict(H=2, A=2, T=4)),
    ("regret-s3", dict(H=10, A=5, T=1000)),
    ("regret-s3", dict(H=4, A=3, T=5)),
    ("regret-s4", dict(H=4, A=2, T=100)),
    ("regret-s4", dict(H=3, A=2, T=100)),
    ("regret-s4", dict(H=20, A=6, T=100000)),
    ("regret-tree", dict(H=6, S=6, A=2, T=72)),
    ("regret-tree", dict(H=9, S=6, A=2, T=10000)),
    ("regret-tree", dict(H=12, S=10, A=2, T=5000)),
    ("regret-tree", dict(H=9, S=7, A=2, T=1000)),
    ("regret-tree-relaxed", dict(H=24, S=11, A=4, T=10000)),
    ("regret-tree-relaxed", dict(H=10, S=50, A=4, T=100000)),
    ("regret-tree-relaxed", dict(H=6, S=11, A=4, T=300)),
    ("regret-stationary", dict(H=9, S=6, A=2, T=1000)),
    ("regret-stationary", dict(H=12, S=16, A=3, T=50000)),
    ("bpi-s4", dict(H=8, A=2, eps=0.3, delta=0.1)),
    ("bpi-s4", dict(H=8, A=2, eps=0.3, delta=0.5)),
    ("bpi-s4", dict(H=16, A=5, eps=0.05, delta=0.01)),
    ("bpi-tree", dict(H=12, S=6, A=2, eps=0.5, delta=0.0625)),
    ("bpi-tree", dict(H=9, S=6, A=2, eps=0.1, delta=0.1)),
    ("bpi-tree", dict(H=30, S=16, A=3, eps=0.25, delta=0.001)),
    ("bpi-tree-relaxed", dict(H=12, S=20, A=4, eps=0.2, delta=0.05)),
    ("bpi-tree-relaxed", dict(H=7, S=100, A=5, eps=0.1, delta=0.01)),
    ("bpi-stationary", dict(H=6, S=6, A=2, eps=0.1, delta=0.05)),
    ("bpi-stationary", dict(H=10, S=9, A=2, eps=0.4, delta=0.2)),
    ("pac-tree", dict(H=12, S=6, A=2, eps=0.5, delta=0.0625)),
    ("pac-tree", dict(H=6, S=6, A=2, eps=0.25, delta=0.05)),
    ("pac-tree", dict(H=4, S=6, A=2, eps=0.15, delta=0.06)),
    ("pac-tree-relaxed", dict(H=12, S=20, A=4, eps=0.2, delta=0.05)),
    ("pac-tree-relaxed", dict(H=18, S=30, A=6, eps=0.5, delta=0.01)),
]

rows = []
for tid, kw in CASES:
    raw, ok = evaluate(tid, **kw)
    rows.append({
        "theoremId": tid,
        "inputs": kw,
        "value": float(max(raw, 0)),
        "rawValue": float(raw),
        "allPassed": bool(ok),
    })

with open(__file__.replace("make_bound_golden.py", "bound_golden.json"), "w") as f:
    json.dump(rows, f, indent=1)
    f.write("\n")
