"""Train every ablation variant on the synthetic benchmark and write a report.

Runs land under $DRMGF_OUTPUT_ROOT (default ./runs); rerunning reuses the
same content-addressed directories.

    python demos/ablation.py [seeds]
"""
import sys

import numpy as np

from drmgf import bench
from drmgf.config import RunConfig

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 1)
methods = ("dr-mgf", "meta-gf-only", "dr-avgf", "sgd-joint")
dirs = []
for method in methods:
    eps = []
    for seed in seeds:
        rec, run_dir = bench.run_experiment(RunConfig(method=method, seed=seed, probe_conflict=True))
        dirs.append(run_dir)
        eps.append(bench.epochs_to_threshold(rec, 0.8))
    late = np.mean(rec.artifacts["conflict"][len(rec.artifacts["conflict"]) // 2:])
    print(f"{method:13s} epochs to 0.8: {np.mean(eps):.2f}  final test acc {np.round(rec.final['test_acc'], 3)}"
          f"  late conflict {late:.3f}")

tables = bench.emit_report(dirs, bench.output_root() / "report")
print("report tables:", ", ".join(str(p) for p in tables.values()))
