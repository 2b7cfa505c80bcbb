"""Fractional cost on the two-location instance that favours fractional play.

Every integral strategy pays at least about T/2 on this instance, while the
uniform fractional witness pays roughly T/(2k).
"""
import numpy as np

from kserver_lab.allocation import run_allocation, state_to_distributions
from kserver_lab.harness import evaluate_fractional, gen_gap_instance, gap_witness_exact
from kserver_lab.oracle import brute_force_allocation_opt

T = 20
print(f"{'k':>2} {'integral OPT':>13} {'witness':>8} {'online':>8}")
for k in range(1, 6):
    inst = gen_gap_instance(k, T)
    opt = brute_force_allocation_opt(inst).cost
    w_hit, w_move = evaluate_fractional(inst, gap_witness_exact(k))
    run = run_allocation(inst, eps=1.0)
    tot = run.totals()
    online = tot["hit"] + tot["movement"]
    print(f"{k:>2} {opt:>13.3f} {float(w_hit + w_move):>8.3f} {online:>8.3f}")

# the online state drifts towards the witness as k grows
run = run_allocation(gen_gap_instance(3, T), eps=1.0)
print("final server-count distributions (k=3), rows are locations:")
print(np.round(state_to_distributions(run.states[-1]), 3))
