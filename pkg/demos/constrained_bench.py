"""Constrained solver table on the synthetic flow-sampling instance."""
from ccrb.bench import constrained_instance, run_bench
from ccrb.fss import FlowModel, fss_fisher, zipf_distribution
from ccrb.solvers import selector

theta = zipf_distribution(200)
F = fss_fisher(FlowModel(theta, alpha=4.0, p=0.25))
inst = constrained_instance(F.J, selector(200, 0), "sum-to-zero", theta, "zipf200")
res = run_bench(inst, eps=1e-6)
print(f"{res.instance}: reference bound {res.reference:.8f}, K = {F.K_used}, "
      f"direct cost {res.direct_flops:.3g} flops\n")
print(res.to_csv())
