"""Compiled vs. pure-Python physics core: timing and agreement.

    python3 benchmarks/bench_dynamics.py [--steps 200] [--robot 1]

Times one control period (10 physics substeps) and the mass-matrix /
bias-force evaluation for both backends on the same robot and state, then
reports the speedup and the largest state difference after the run.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from pal_loco.dynamics import SimConfig, Simulator, get_backend
from pal_loco.morphology import reference_robot


def time_steps(sim: Simulator, n: int, rng: np.random.Generator) -> tuple[float, np.ndarray]:
    targets = sim.model.nominal + 0.2 * rng.standard_normal((n, 12))
    t0 = time.perf_counter()
    for k in range(n):
        sim.step(targets[k])
    return (time.perf_counter() - t0) / n, np.concatenate([sim.state.q, sim.state.u])


def time_terms(core, pm, q, u, n: int) -> float:
    t0 = time.perf_counter()
    for _ in range(n):
        core.dynamics_terms(pm, q, u)
    return (time.perf_counter() - t0) / n


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200, help="control periods per backend")
    ap.add_argument("--robot", type=int, default=1, help="reference id")
    args = ap.parse_args()

    model = reference_robot(args.robot)
    rows = []
    finals = {}
    try:
        backends = {"compiled": get_backend("compiled"), "python": get_backend("python")}
    except ImportError:
        print("compiled core not built; only the Python fallback is available")
        backends = {"python": get_backend("python")}
    for name, core in backends.items():
        sim = Simulator(model, SimConfig(), backend=core)
        sim.reset_nominal(0.02)
        n = args.steps if name == "compiled" else max(1, args.steps // 10)
        per_step, _ = time_steps(sim, n, np.random.default_rng(0))
        terms = time_terms(core, sim.pm, sim.state.q.copy(), sim.state.u.copy(), 10 * n)
        rows.append((name, n, per_step, terms))
        # agreement on the shared prefix
        ref = Simulator(model, SimConfig(), backend=core)
        ref.reset_nominal(0.02)
        _, finals[name] = time_steps(ref, 20, np.random.default_rng(0))

    print(f"robot {model.name}, 10 substeps per control period")
    print(f"{'backend':10s} {'periods':>8s} {'ms/period':>10s} {'us/M,h':>10s}")
    for name, n, per_step, terms in rows:
        print(f"{name:10s} {n:8d} {per_step * 1e3:10.3f} {terms * 1e6:10.1f}")
    if len(rows) == 2:
        print(f"speedup per control period: {rows[1][2] / rows[0][2]:.0f}x")
        diff = np.max(np.abs(finals["compiled"] - finals["python"]))
        print(f"max |state difference| after 20 periods: {diff:.2e}")


if __name__ == "__main__":
    main()
