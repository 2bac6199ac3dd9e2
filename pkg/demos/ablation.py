"""
Sampler and mining ablation
===========================

Random vs proxy-guided batches, with and without online hard mining, for
one loss on a reduced dataset.  Also shows how many triplets or pairs in a
batch carry gradient.
"""

# %%
from gpm.dataset import generate
from gpm.experiments import epoch_fractions, run_cells, ablation_cells
from gpm.training import preset

base = preset("desk")
base.apply(["generator.n_places=600", "generator.n_archetypes=20", "epochs=8"])
ds = generate(base.generator)

rows = run_cells(ablation_cells(base, losses=("triplet",), seeds=(0,)), base, ds)
for r in rows:
    print(f"ohm={r['ohm']} gpm={r['gpm']} recall@1={r['recall@1']:.3f}")

# %%
# Informative fraction per epoch

for r in rows:
    if r["ohm"]:
        print("gpm" if r["gpm"] else "random", " ".join(f"{f:.2f}" for f in epoch_fractions(r)))

# %%
# Cache size of the proxy bank at 65k places, 4 bytes per float

from gpm.evaluation import cache_size_table

for d, gb in cache_size_table(65_000, (32, 128, 1024), 4).items():
    print(d, f"{gb:.4f} GB")
