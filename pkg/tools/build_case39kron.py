"""Regenerate src/stablefreq/data/case39kron.json.

Ten-machine equivalent of the New England 39-bus system:

* line susceptances 1/x from the standard branch table (resistance,
  line charging and off-nominal taps dropped, flat 1.0 p.u. voltages);
* each machine gets an internal node behind its transient reactance x'd;
* everything except the internal nodes is eliminated by Kron reduction;
* constant-power loads are moved to the internal nodes with the DC
  distribution factors of the same elimination;
* machine 1 (bus 31) is the slack and balances the total, so sum(p_m) = 0;
* M = 2H / w_s and D = D_pu / w_s with w_s = 2*pi*60, H and D on the
  100 MVA base as tabulated for this benchmark;
* actuation limits u_max drawn uniformly in [0.8, 1.0] x rating with
  seed 39, rating = scheduled machine output, u_min = -u_max.

Run:  python3 tools/build_case39kron.py
"""
import json
import math
from pathlib import Path

import numpy as np

BRANCHES = [  # from, to, x
    (1, 2, 0.0411), (1, 39, 0.025), (2, 3, 0.0151), (2, 25, 0.0086), (3, 4, 0.0213),
    (3, 18, 0.0133), (4, 5, 0.0128), (4, 14, 0.0129), (5, 6, 0.0026), (5, 8, 0.0112),
    (6, 7, 0.0092), (6, 11, 0.0082), (7, 8, 0.0046), (8, 9, 0.0363), (9, 39, 0.025),
    (10, 11, 0.0043), (10, 13, 0.0043), (13, 14, 0.0101), (14, 15, 0.0217), (15, 16, 0.0094),
    (16, 17, 0.0089), (16, 19, 0.0195), (16, 21, 0.0135), (16, 24, 0.0059), (17, 18, 0.0082),
    (17, 27, 0.0173), (21, 22, 0.014), (22, 23, 0.0096), (23, 24, 0.035), (25, 26, 0.0323),
    (26, 27, 0.0147), (26, 28, 0.0474), (26, 29, 0.0625), (28, 29, 0.0151), (12, 11, 0.0435),
    (12, 13, 0.0435), (6, 31, 0.025), (10, 32, 0.02), (19, 33, 0.0142), (20, 34, 0.018),
    (22, 35, 0.0143), (23, 36, 0.0272), (25, 37, 0.0232), (2, 30, 0.0181), (29, 38, 0.0156),
    (19, 20, 0.0138),
]
GEN_BUS = [31, 30, 32, 33, 34, 35, 36, 37, 38, 39]
H = [15.15, 21.0, 17.9, 14.3, 13.0, 17.4, 13.2, 12.15, 17.25, 250.0]
D_PU = [17.3, 11.8, 17.3, 17.3, 17.3, 17.3, 17.3, 17.3, 18.22, 18.22]
XD1 = [0.0697, 0.0310, 0.0531, 0.0436, 0.1320, 0.0500, 0.0490, 0.0570, 0.0570, 0.0060]
LOAD_MW = {3: 322.0, 4: 500.0, 7: 233.8, 8: 522.0, 12: 7.5, 15: 320.0, 16: 329.0, 18: 158.0,
           20: 628.0, 21: 274.0, 23: 247.5, 24: 308.6, 25: 224.0, 26: 139.0, 27: 281.0,
           28: 206.0, 29: 283.5, 31: 9.2, 39: 1104.0}
GEN_MW = {30: 250.0, 32: 650.0, 33: 632.0, 34: 508.0, 35: 650.0, 36: 560.0, 37: 540.0,
          38: 830.0, 39: 1000.0}
BASE_MVA = 100.0
F0 = 60.0


def build():
    nb, ng = 39, len(GEN_BUS)
    N = nb + ng  # internal nodes appended after the buses
    L = np.zeros((N, N))

    def link(a, b, x):
        L[a, a] += 1 / x
        L[b, b] += 1 / x
        L[a, b] -= 1 / x
        L[b, a] -= 1 / x

    for f, t, x in BRANCHES:
        link(f - 1, t - 1, x)
    for g, bus in enumerate(GEN_BUS):
        link(bus - 1, nb + g, XD1[g])

    keep = list(range(nb, N))
    elim = list(range(nb))
    Laa = L[np.ix_(keep, keep)]
    Lab = L[np.ix_(keep, elim)]
    Lbb = L[np.ix_(elim, elim)]
    red = Laa - Lab @ np.linalg.solve(Lbb, Lab.T)
    B = -red
    np.fill_diagonal(B, 0.0)
    B = 0.5 * (B + B.T)

    p_bus = np.zeros(nb)
    for bus, mw in LOAD_MW.items():
        p_bus[bus - 1] -= mw / BASE_MVA
    dist = -Lab @ np.linalg.solve(Lbb, p_bus)  # columns of the factor sum to one
    gen = np.array([GEN_MW.get(bus, 0.0) / BASE_MVA for bus in GEN_BUS])
    gen[0] = -p_bus.sum() - gen[1:].sum()  # slack balances
    p_m = gen + dist
    p_m -= p_m.sum() / ng  # remove rounding residue

    ws = 2 * math.pi * F0
    M = 2 * np.array(H) / ws
    D = np.array(D_PU) / ws
    rating = gen.copy()
    rng = np.random.default_rng(39)
    u_max = rating * rng.uniform(0.8, 1.0, ng)
    return {
        "name": "case39kron",
        "provenance": (__doc__ or "").strip().split("\n\nRun:")[0],
        "n": ng,
        "M": M.round(12).tolist(),
        "D": D.round(12).tolist(),
        "B": B.round(10).tolist(),
        "p_m": p_m.round(12).tolist(),
        "u_min": (-u_max).round(12).tolist(),
        "u_max": u_max.round(12).tolist(),
        "rating": rating.round(12).tolist(),
        "base_freq": F0,
    }


if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "src" / "stablefreq" / "data" / "case39kron.json"
    out.write_text(json.dumps(build(), indent=1) + "\n")
    print("wrote", out)
