"""Step through a random allocation instance and watch the potentials."""
import numpy as np

from kserver_lab.allocation import expected_servers, potential_phi_h, random_instance, run_allocation

rng = np.random.default_rng(3)
inst = random_instance(rng, d=3, k=3, T=12, eps=0.5)
run = run_allocation(inst, record_segments=True)

print("w =", inst.w, " quotas =", inst.kappa_pattern())
print(f"{'t':>2} {'loc':>3} {'kappa':>5} {'hit':>7} {'move':>7} {'events':>6} {'phi_h':>7}  servers")
for t, (st, c, s) in enumerate(zip(inst.steps, run.costs, run.states[1:]), start=1):
    e = np.round(expected_servers(s), 3)
    print(f"{t:>2} {st.location:>3} {st.kappa:>5} {c.hit:>7.3f} {c.movement:>7.3f} "
          f"{c.event_count:>6} {potential_phi_h(s):>7.3f}  {e}")

print("totals:", {key: round(float(v), 4) for key, v in run.totals().items()})
print("audit violations:", len(run.diag.violations()))
