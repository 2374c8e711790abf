"""Sample gradient conflict and measured convergence gain during joint SGD
on the synthetic multi-exit benchmark and report their correlation.

    python demos/conflict_vs_gain.py [epochs]
"""
import sys

from drmgf import bench
from drmgf.config import RunConfig
from drmgf.diagnostics import conflict_gain_study

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 14
cfg = RunConfig(method="sgd-joint")
data = bench.build_data(cfg)
model = bench.build_model(cfg, data)

study = conflict_gain_study(model, data, epochs, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size)
print(f"{len(study.samples)} samples ({study.dropped} dropped)")
print(f"pearson(C, G) = {study.pearson():.3f}")
# the correlation is over all samples; single samples are noisy
for s in sorted(study.samples, key=lambda s: -s.C)[:5]:
    print(f"  step {s.t:4d} pair {s.pair}  C={s.C:.3f}  G={s.G:+.3f}")
