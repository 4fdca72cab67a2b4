"""
Estimating the number of implicit classes
=========================================

After pre-training, confident target samples are clustered for a range of
cluster counts. Two signals pick the count: clustering accuracy on the
samples pseudo-labelled as known classes, and the knee of the SSE curve.

Run with ``python demos/02_discovery_sweep.py [seed]``.
"""
# %%
import sys

from scda import adapter, discovery
from scda.adapter import RunState, TrainConfig
from scda.data import ShiftSpec, generate
from scda.numkit import Rng

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
source, target = generate(ShiftSpec(), Rng(seed).child("data"))
cfg = TrainConfig(seed=seed)
rng = Rng(seed)
model = adapter.build_model(cfg, source.dim, source.num_classes, rng.child("init"))
state = RunState(model, f_sgd=adapter._sgd(cfg), c_sgd=adapter._sgd(cfg))
adapter.pretrain(state, source, target, cfg, rng.child("pretrain"))

# %%
# Lowest-entropy half of every predicted class, split by whether the
# prediction was a known class or the unknown output.
cands = discovery.select_candidates(model.f, model.c, target.features, cfg.pca_dim)
print(f"{len(cands.kn_index)} known candidates, {len(cands.im_index)} implicit candidates, "
      f"features reduced to {cands.features.shape[1]} dims")

# %%
# The sweep. Clusters that match the known pseudo-labels one-to-one give
# CA = 1; the SSE curve bends where the true number of blobs is reached.
est = discovery.estimate_k(cands, cfg.k_max, rng.child("estimate"), cfg.kmeans_restarts,
                           cfg.kmeans_max_iter, cfg.kneedle_sensitivity,
                           tie_break=cfg.ca_tie_break)
print(" total k        SSE     CA")
for k, sse, ca in est.sweep:
    print(f"{k:8d} {sse:10.2f} {ca:6.3f}")
print(f"k_CA {est.k_ca}, k_elbow {est.k_elbow} -> k_hat {est.k_hat}, "
      f"implicit classes k* = {est.k_star}")

# %%
# The implicit candidates are then split into k* pseudo classes, which the
# next training phase treats as real labels.
res = discovery.assign_pseudo_classes(cands, est.k_star, rng.child("assign"))
print("pseudo-class sizes", [len(g) for g in res.pseudo_classes])
