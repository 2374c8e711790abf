"""Two tasks on a 2-D landscape with conflicting minimizers.

Joint SGD and PCGrad settle on a compromise; DR-MGF lets each task follow
its own route and reaches both per-task optima.

    python demos/toy_landscape.py [epochs]
"""
import sys

from drmgf.toy import toy_problem

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
res = toy_problem(("dr-mgf", "dr-avgf", "sgd-joint", "pcgrad"), epochs=epochs)

print(f"per-task optima: {res.optima[0]:.2e} {res.optima[1]:.2e}")
for method, run in res.runs.items():
    gaps = [f - o for f, o in zip(run.final_losses, res.optima)]
    pts = " ".join(f"({p[0]:.3f}, {p[1]:.3f})" for p in run.task_points[-1])
    print(f"{method:10s} gaps {gaps[0]:.2e} {gaps[1]:.2e}  task points {pts}")
