"""
Synthetic shift benchmark and adversarial pre-training
======================================================

A walk through the first half of the method on the default benchmark:
four source classes, seven target classes (three of them never seen in the
source), and a small affine shift between the domains.

Run with ``python demos/01_benchmark_and_pretraining.py``.
"""
# %%
# Build the benchmark. Every class is a Gaussian blob; the target domain is
# rotated and translated, and holds three extra classes.
import numpy as np

from scda import adapter, net
from scda.adapter import RunState, TrainConfig
from scda.data import ShiftSpec, generate
from scda.numkit import Rng

seed = 0
spec = ShiftSpec()
source, target = generate(spec, Rng(seed).child("data"))
print("source", source.features.shape, "classes", sorted(set(source.labels.tolist())))
print("target", target.features.shape, "classes", sorted(set(target.ground_truth.tolist())))

# %%
# The classifier starts with one output per known class plus a single
# "unknown" output. Pre-training pushes the confusion between known classes
# and that unknown output towards one half, so target samples that look like
# no source class drift into it.
cfg = TrainConfig(seed=seed)
rng = Rng(seed)
model = adapter.build_model(cfg, source.dim, source.num_classes, rng.child("init"))
state = RunState(model, f_sgd=adapter._sgd(cfg), c_sgd=adapter._sgd(cfg))
adapter.pretrain(state, source, target, cfg, rng.child("pretrain"))

for rec in state.loss_curve[:: max(1, len(state.loss_curve) // 5)]:
    print(f"epoch {rec['epoch']:3d}  L_s {rec['l_s']:.3f}  L_adv {rec['l_adv']:.3f}  "
          f"L_kcc {rec['l_kcc']:.3f}")

# %%
# Where did the target samples land? Rows are true classes (4, 5, 6 are the
# implicit ones), columns are predictions (4 is the unknown output).
_, probs, _ = net.forward(model.f, model.c, target.features)
pred = probs.argmax(1)
table = np.zeros((spec.num_classes, model.c.out_dim), dtype=int)
np.add.at(table, (target.ground_truth, pred), 1)
print(table)
