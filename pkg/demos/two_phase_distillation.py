"""Train a flow teacher, then distil it into an RGB-only student.

Run:  python demos/two_phase_distillation.py            (reduced, about a minute)
      python demos/two_phase_distillation.py --desk     (8 classes, 64 clips each, 32x32, about 25 minutes)

Phase 1 fits the teacher on TV-L1 flow.  Phase 2 freezes it and trains
students on RGB with cross-entropy plus lambda times the squared feature
distance; lambda = 0 is the plain RGB baseline.  The script prints the
per-epoch Loss1 trajectory and the validation accuracy of every student.
"""

import argparse
import time

from bers.checkpoint import parameter_hash
from bers.synthvid import DatasetSpec, generate
from bers.train import FlowSource, TrainConfig, evaluate, grid_search_lambda, train_teacher

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--desk", action="store_true", help="full desk-scale configuration")
parser.add_argument("--grid", default="0,0.1,1,10", help="comma-separated lambda candidates")
args = parser.parse_args()

if args.desk:
    spec, config = DatasetSpec(), TrainConfig()
else:
    spec = DatasetSpec(num_classes=4, clips_per_class=24, frames=6, height=24, width=24, size_min=6, size_max=9)
    config = TrainConfig(epochs=12, milestones=(8,))
data = generate(spec)
flows = FlowSource()

start = time.monotonic()
flows.batch(data.clips)
print(f"{len(data)} clips, flow precomputed in {time.monotonic() - start:.0f} s")

teacher, tlog = train_teacher(data, config, flows=flows)
train_acc = evaluate(teacher, data.subset("train"), flows=flows).accuracy
print(f"teacher: train accuracy {train_acc:.3f}, val accuracy {tlog.records[-1].val_acc:.3f}")

frozen = parameter_hash(teacher)
result = grid_search_lambda(data, teacher, config, [float(v) for v in args.grid.split(",")], flows=flows)
assert parameter_hash(teacher) == frozen, "teacher changed during phase 2"

print("\nlambda  Loss1 epoch 1 -> final   ratio   val accuracy")
for lam, acc in result.table.items():
    loss1 = result.logs[lam].column("Loss1")
    print(f"{lam:6g}  {loss1[0]:13.4f} -> {loss1[-1]:.4f}  {loss1[-1] / loss1[0]:6.3f}   {acc:.3f}")
print(f"\ngrid choice: lambda = {result.best_lam:g}; teacher parameters unchanged")
test = evaluate(result.students[result.best_lam], data.subset("test"))
print(f"chosen student test accuracy (RGB only): {test.accuracy:.3f}")
