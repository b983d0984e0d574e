"""
Sweeping the anchor weight
==========================

``run_ablation`` reuses each seed's base model across the grid and writes a
long-format table ready for plotting.
"""
import csv
import tempfile
from collections import defaultdict

from conformal_unlearning import harness

out = tempfile.mkdtemp(prefix="cpmu-ablation-")
cfg = harness.parse_config("seeds=0,1,2\n")
cfg.output_dir = out

###############################################################################
# Larger lambda keeps the weights closer to the starting point.

table = harness.run_ablation(cfg, "lambda", [0.0, 1e-3, 1.0])
rows = defaultdict(list)
with open(table, newline="") as fh:
    for r in csv.DictReader(fh):
        rows[r["sweep_value"]].append(r)
for value, rs in rows.items():
    disp = sum(float(r["displacement"]) for r in rs) / len(rs)
    h = sum(float(r["h_ce"]) for r in rs) / len(rs)
    print(f"lambda={value:6s} displacement={disp:.4f} H(CE)={h:.3f}")
print("table:", table)
