"""
Building a batch plan from cached proxies
=========================================

Three tight clusters of place proxies.  The greedy planner repeatedly picks
a random place and takes its M nearest remaining neighbours, so each cluster
becomes one tuple.
"""

# %%
import numpy as np

from gpm.sampler import MemoryBank, build_batch_plan

rng = np.random.default_rng(3)
M = 4
centers = rng.normal(size=(3, 8)) * 5
pts = np.repeat(centers, M, axis=0) + 0.01 * rng.normal(size=(3 * M, 8))
pts /= np.linalg.norm(pts, axis=1, keepdims=True)

bank = MemoryBank(8)
for pid, c in enumerate(pts):
    bank.update(pid, c, epoch=0)
print(bank.coverage(range(3 * M)), "coverage,", bank.nbytes(4), "bytes at 4 bytes/float")

# %%
plan = build_batch_plan(bank, M, rng_seed=0)
for t in plan.tuples:
    print(sorted(t))

# %%
# Thirteen places with M=4 leave a short final tuple.

bank.update(99, pts[0], epoch=0)
print([len(t) for t in build_batch_plan(bank, M, rng_seed=0).tuples])
