"""Regenerate the bundled case files and the power-flow oracle fixtures.

Uses PYPOWER (an independent MATPOWER port) as the reference solver. The
bundled model has unity transformer ratios and no bus shunts, so the
reference cases are modified the same way before solving.
"""
import copy
import sys
from pathlib import Path

import numpy as np
from pypower.api import case14, case118, ppoption, rundcpf, runpf

HERE = Path(__file__).resolve().parent
DATA = HERE.parent.parent / "data"
KIND = {1: "1", 2: "2", 3: "3"}


def strip(ppc):
    ppc = copy.deepcopy(ppc)
    ppc["branch"][:, 8] = 0.0  # unity ratio
    ppc["branch"][:, 9] = 0.0
    ppc["bus"][:, 4] = 0.0
    ppc["bus"][:, 5] = 0.0
    return ppc


def write_case(ppc, name, title):
    bus, gen, br = ppc["bus"], ppc["gen"], ppc["branch"]
    vset = {int(b[0]): 1.0 for b in bus}
    for g in gen:
        vset[int(g[0])] = g[5]
    lines = [f"# {title}", "# Transcribed from the standard test-system archive; unity tap", "# ratios, bus shunts omitted. Loads and generation in MW/MVAr.", "",
             f"BASE {ppc['baseMVA']:g}", "", "BUS", "# id kind load_p load_q v_setpoint   (kind: 3 slack, 2 generator, 1 load)"]
    for b in bus:
        lines.append(f"{int(b[0])} {int(b[1])} {b[2]:g} {b[3]:g} {vset[int(b[0])]:g}")
    lines += ["", "GEN", "# bus p_gen"]
    agg = {}
    for g in gen:
        agg[int(g[0])] = agg.get(int(g[0]), 0.0) + g[1]
    for k in sorted(agg):
        lines.append(f"{k} {agg[k]:g}")
    lines += ["", "BRANCH", "# from to r x b_sh status"]
    for r in br:
        lines.append(f"{int(r[0])} {int(r[1])} {r[2]:g} {r[3]:g} {r[4]:g} {int(r[10])}")
    (DATA / f"{name}.case").write_text("\n".join(lines) + "\n")


def fixtures(ppc, name):
    ppc = strip(ppc)
    for g in ppc["gen"]:
        pass
    base = ppc["baseMVA"]
    opt = ppoption(VERBOSE=0, OUT_ALL=0, PF_TOL=1e-12)
    dc, ok = rundcpf(copy.deepcopy(ppc), opt)
    assert ok
    rows = []
    for k, r in enumerate(dc["branch"]):
        rows.append((f"flow_p:{k}", r[13] / base))
    pinj = {int(b[0]): -b[2] / base for b in dc["bus"]}
    for g in dc["gen"]:
        pinj[int(g[0])] += g[1] / base
    for b in dc["bus"]:
        rows.append((f"inj_p:{int(b[0])}", pinj[int(b[0])]))
    (HERE / f"{name}_dc.csv").write_text("meter,value\n" + "".join(f"{m},{v:.15e}\n" for m, v in rows))

    ac, ok = runpf(copy.deepcopy(ppc), opt)
    assert ok
    rows = []
    for k, r in enumerate(ac["branch"]):
        rows.append((f"flow_p:{k}", r[13] / base))
    for k, r in enumerate(ac["branch"]):
        rows.append((f"flow_q:{k}", r[14] / base))
    p = {int(b[0]): -b[2] / base for b in ac["bus"]}
    q = {int(b[0]): -b[3] / base for b in ac["bus"]}
    for g in ac["gen"]:
        p[int(g[0])] += g[1] / base
        q[int(g[0])] += g[2] / base
    for b in ac["bus"]:
        rows.append((f"inj_p:{int(b[0])}", p[int(b[0])]))
    for b in ac["bus"]:
        rows.append((f"inj_q:{int(b[0])}", q[int(b[0])]))
    for b in ac["bus"]:
        rows.append((f"vm:{int(b[0])}", b[7]))
    (HERE / f"{name}_ac.csv").write_text("meter,value\n" + "".join(f"{m},{v:.15e}\n" for m, v in rows))


if __name__ == "__main__":
    DATA.mkdir(exist_ok=True)
    write_case(strip(case14()), "case14", "IEEE 14-bus test system")
    write_case(strip(case118()), "case118", "IEEE 118-bus test system")
    fixtures(case14(), "case14")
    fixtures(case118(), "case118")
