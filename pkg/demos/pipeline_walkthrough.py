"""Metric to randomized servers in one call, then a look at the report."""
import numpy as np

from kserver_lab import PipelineConfig, random_metric, run_pipeline
from kserver_lab.harness import report_csv

rng = np.random.default_rng(0)
m = random_metric(8, rng)
cfg = PipelineConfig(k=2, T=25, seed=5, metric=m, kind="random-leaf", samples=20)
r = run_pipeline(cfg)

print("sigma:", r.sigma, " depth plain/weighted:", r.depth_plain, r.depth_weighted)
print("requests:", r.requests)
print("offline optimum (tree, metric):", r.opt["tree"], r.opt["metric"])
for key, v in r.ratios.items():
    print(f"{key:>24}: {v:.3f}")
print("heuristic bound beta:", round(r.predicted["beta"], 2))
print("embedding audit:", r.predicted["embedding"])
print("violations:", r.violations)

# the first few rows of the per-step CSV
print("\n".join(report_csv(r).splitlines()[:6]))
