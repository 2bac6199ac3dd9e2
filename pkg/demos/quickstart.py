"""
Quickstart
==========

Generate a small synthetic place-recognition set, train the encoder with
proxy-guided batches and report recall@K on held-out queries.
"""

# %%
# A synthetic dataset
# -------------------
# Places cluster around shared archetypes, so places from the same archetype
# are the hard negatives a good sampler should put in one batch.

from gpm import generate
from gpm.dataset import make_eval_split
from gpm.evaluation import recall_at_k
from gpm.training import preset, train

cfg = preset("desk")
cfg.apply(["generator.n_places=400", "generator.n_archetypes=20", "epochs=5"])
ds = generate(cfg.generator)
print(ds.n_places, "places,", len(ds.features), "images of dim", ds.feature_dim)

# %%
# Raw features as a baseline

split = make_eval_split(ds, cfg.holdout_fraction, cfg.seed)
print("raw features:", recall_at_k(None, split).recall_at)

# %%
# Train
# -----
# Epoch 0 uses a random plan; later epochs group places whose cached proxies
# are nearest neighbours.

res = train(cfg, ds)
for row in res.epochs:
    print(row["epoch"], row["plan_mode"], round(row["mean_loss"], 4), round(row["recall@1"], 3))
print("final:", res.final_recall)
print("bank:", res.cost)
