"""
Checking the hand-written backward pass
=======================================

Every loss and the full encoder + proxy head graph are compared against
central finite differences.
"""

# %%
import numpy as np

from gpm.losses import LOSS_KINDS, LossConfig, embedding_loss
from gpm.model import EncoderConfig, Model
from gpm.numerics import ParamTensor, finite_diff_check

rng = np.random.default_rng(0)
labels = np.repeat(np.arange(6), 2)

# %%
# Losses on unit embeddings

for kind in LOSS_KINDS:
    emb = rng.normal(size=(12, 8))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    cfg = LossConfig(kind=kind, contrastive_neg_margin=0.2)
    p = ParamTensor(emb)
    p.grad[...] = embedding_loss(emb, labels, cfg)[1]
    err = finite_diff_check(lambda q: embedding_loss(q.value, labels, cfg)[0].value, p)
    print(f"{kind:17s} max rel err {err:.1e}")

# %%
# The composite graph: L(x) + L(z)

model = Model(EncoderConfig(input_dim=6, hidden_dim=10, embed_dim=8, proxy_dim=4))
F = rng.normal(size=(12, 6))
cfg = LossConfig(kind="multi_similarity")


def total(_):
    eb = model.forward(F, labels)
    return embedding_loss(eb.x, labels, cfg)[0].value + embedding_loss(eb.z, labels, cfg)[0].value


eb = model.forward(F, labels)
model.zero_grad()
model.backward(eb, embedding_loss(eb.x, labels, cfg)[1], embedding_loss(eb.z, labels, cfg)[1])
for p in model.params():
    print(f"{p.name:10s} {finite_diff_check(total, p):.1e}")
