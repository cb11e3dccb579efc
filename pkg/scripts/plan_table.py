"""Print the SLT step count N and per-step schedule for every built-in topology.

    python scripts/plan_table.py              # N for each topology and budget
    python scripts/plan_table.py ResNet20 0.25  # full schedule of one plan
"""

import sys

from slt_sim.errors import InfeasibleBudgetError
from slt_sim.memory import MemoryBudget
from slt_sim.planner import build_plan
from slt_sim.topology import builtin, builtin_names

BUDGETS = (0.125, 0.25, 0.33, 0.5, 0.66)
ROUNDS = 300


def table():
    print(f"{'topology':12s}" + "".join(f"{s:>9}" for s in BUDGETS))
    for name in builtin_names():
        topo = builtin(name)
        cells = []
        for s in BUDGETS:
            try:
                cells.append(str(build_plan(topo, MemoryBudget.from_reference(topo, s), ROUNDS).N))
            except InfeasibleBudgetError:
                cells.append("infeas.")
        print(f"{name:12s}" + "".join(f"{c:>9}" for c in cells))


def detail(name: str, s_ref: float):
    topo = builtin(name)
    plan = build_plan(topo, MemoryBudget.from_reference(topo, s_ref), ROUNDS)
    print(f"{name} at s_ref={s_ref}: N={plan.N}")
    for st in plan.stages:
        c = st.config
        print(f"  n={st.n:2d} K_F={c.k_f:2d} K_T={c.k_t:2d} s={c.s:.4f} rounds {st.start}-{st.end}")


if __name__ == "__main__":
    if len(sys.argv) == 3:
        detail(sys.argv[1], float(sys.argv[2]))
    else:
        table()
