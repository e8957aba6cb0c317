"""Iterations each solver needs for one entry of J^{-1} on a random SPD matrix."""

from ccrb import QmpProblem, solve_gd, solve_mm, stopping_rule
from ccrb.matrix import direct_solve, random_spd
from ccrb.precond import jacobi_majorizer
from ccrb.solvers import selector

n, kappa = 40, 1e3
J = random_spd(n, kappa, seed=1)
B = selector(n, 0)
exact = direct_solve(J, B)[0, 0]
prob = QmpProblem(J, B)
stop = stopping_rule("bound_delta", 1e-8, 1_000_000, reference=exact)

print(f"n={n} kappa={kappa:g}  [J^-1]_11 = {exact:.10f}")
print(f"{'solver':<14}{'iters':>8}{'rho':>10}{'bound':>16}")
runs = {"mm": solve_mm(prob, jacobi_majorizer(J), stop=stop)}
for rule in ("richardson", "gauss_seidel", "steepest", "cg", "pcg"):
    runs[rule] = solve_gd(prob, rule, stop=stop)
for name, r in runs.items():
    print(f"{name:<14}{r.iterations:>8}{r.rho_predicted:>10.4f}{r.bound:>16.10f}")
