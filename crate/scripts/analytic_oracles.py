#!/usr/bin/env python3
"""Independent recomputation of constants pinned in the Rust test suite.

Every value is derived here from first principles with the standard
library only, then compared against the literal the Rust tests assert.
A mismatch means either suite drifted. Run from anywhere:

    python3 scripts/analytic_oracles.py
"""

import json
import math
import sys
from pathlib import Path

FAILURES = []


def check(name, computed, expected, tol=0.0):
    ok = (
        computed == expected
        if tol == 0.0
        else abs(computed - expected) <= tol
    )
    status = "ok" if ok else "MISMATCH"
    print(f"{status:8s} {name}: computed {computed!r} expected {expected!r}")
    if not ok:
        FAILURES.append(name)


# ---- cross entropy of a uniform 4-class prediction, true class 0 ----
# per-pixel term is -ln(0.25); one pixel, so the two normalizations give
# ln4 (by valid pixels) and ln4/4 (by class count).
ln4 = -math.log(0.25)
check("uniform_ce_by_pixels", ln4, 1.3862943611198906)
check("uniform_ce_by_classes", ln4 / 4.0, 0.34657359027997264)

# ---- blended hierarchy loss on the same pixel ----
# taxonomy: 4 species -> 2 genera (2 species each) -> 1 taxon.
# species level: -ln(1/4)/4. genus level: group sums give (0.5, 0.5),
# true genus 0, so -ln(1/2)/2. taxon level: single group sums to 1,
# -ln(1) = 0. weights (1.0, 0.3, 0.1).
species = -math.log(0.25) / 4.0
genus = -math.log(0.5) / 2.0
taxon = 0.0
total = 1.0 * species + 0.3 * genus + 0.1 * taxon
check("hierarchical_uniform_total", total, 0.45054566736396443, tol=1e-15)
check("genus_term_weighted", 0.3 * genus, 0.10397207708399179, tol=1e-15)

# ---- IoU hand case, computed with set algebra ----
pred = [1, 1, 1, 1, 1, 0, 0, 0]
truth = [1, 1, 1, 0, 0, 1, 1, 0]
p = {i for i, v in enumerate(pred) if v == 1}
t = {i for i, v in enumerate(truth) if v == 1}
check("iou_hand_case", len(p & t) / len(p | t), 0.42857142857142855)

# ---- soft dice with half overlap ----
# 8 pixels of class 0; one-hot prediction hits 4 of them.
# dice = 1 - (2*I + eps) / (P + G + eps) with I=4, P=4, G=8, eps=1.
dice = 1.0 - (2.0 * 4.0 + 1.0) / (4.0 + 8.0 + 1.0)
check("dice_half_overlap", dice, 1.0 - 9.0 / 13.0)

# ---- temporal-collapse parameter count ----
# conv3d(3 -> 32, kernel 3x3x3) then conv3d(32 -> 64, kernel 2x3x3),
# each with one bias per output channel.
conv1 = 32 * 3 * 3 * 3 * 3 + 32
conv2 = 64 * 32 * 2 * 3 * 3 + 64
check("processor_conv1_params", conv1, 2624)
check("processor_conv2_params", conv2, 36928)
check("processor_total_params", conv1 + conv2, 39552)

# ---- first Adam step on a scalar: p=1, grad=0.5, lr=0.1 ----
beta1, beta2, eps = 0.9, 0.999, 1e-8
m = (1.0 - beta1) * 0.5
v = (1.0 - beta2) * 0.25
mhat = m / (1.0 - beta1)
vhat = v / (1.0 - beta2)
p1 = 1.0 - 0.1 * mhat / (math.sqrt(vhat) + eps)
check("adam_first_step", p1, 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), tol=1e-15)


# ---- largest-remainder column split ----
def column_split(cols, ratios, buffer):
    assignable = cols - 2 * buffer
    targets = [r * assignable for r in ratios]
    counts = [math.floor(x) for x in targets]
    remainders = sorted(
        range(3), key=lambda i: (-(targets[i] - counts[i]), i)
    )
    short = assignable - sum(counts)
    for i in remainders[:short]:
        counts[i] += 1
    return tuple(counts)


check("split_10_cols", column_split(10, (0.63, 0.16, 0.21), 1), (5, 1, 2))
check("split_8_cols", column_split(8, (0.63, 0.16, 0.21), 1), (4, 1, 1))

# ---- seasonal frame selection ----
# from dated tags pick June, the first two Septembers, and October;
# the second September is the reference frame (position 2 of 4).
tags = [
    "2021-05-01",
    "2021-06-15",
    "2021-07-20",
    "2021-08-30",
    "2021-09-02",
    "2021-09-21",
    "2021-10-10",
]
months = [int(t[5:7]) for t in tags]
june = months.index(6)
septembers = [i for i, m in enumerate(months) if m == 9][:2]
october = months.index(10)
picked = [june, septembers[0], septembers[1], october]
check("seasonal_selection", tuple(picked), (1, 4, 5, 6))
check("seasonal_reference_position", picked.index(septembers[1]), 2)

# ---- the shared taxonomy fixture is shaped as the tests assume ----
fixture = (
    Path(__file__).resolve().parent.parent
    / "crates/core/tests/fixtures/taxonomy_15.json"
)
data = json.loads(fixture.read_text())
genera_order = [g["name"] for g in data["genera"]]
taxa_order = list(dict.fromkeys(g["taxon"] for g in data["genera"]))
check("fixture_species", len(data["species"]), 15)
check("fixture_genera", len(genera_order), 11)
check("fixture_taxa", len(taxa_order), 3)
check(
    "fixture_excluded",
    [s["name"] for s in data["species"] if s.get("report_exclude")],
    ["Acer sp."],
)
check(
    "fixture_genera_resolve",
    all(s["genus"] in genera_order for s in data["species"]),
    True,
)

if FAILURES:
    print(f"\n{len(FAILURES)} oracle check(s) failed: {', '.join(FAILURES)}")
    sys.exit(1)
print("\nall oracle checks passed")
