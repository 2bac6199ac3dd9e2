import numpy as np
import pytest

from gpm.dataset import EvalSplit, GeneratorConfig, generate, make_eval_split
from gpm.evaluation import (
    cache_size_table,
    cost_report,
    recall_at_k,
    true_match_ranks,
)
from gpm.model import EncoderConfig, Model
from gpm.sampler import MemoryBank
from gpm.evaluation import bank_cost_report


def split_from(q, qp, r, rp):
    return EvalSplit(np.asarray(q, float), np.asarray(qp), np.asarray(r, float), np.asarray(rp), {}, {})


def brute_force_recall(q, qp, r, rp, k):
    hits = 0
    for i in range(len(q)):
        order = sorted(range(len(r)), key=lambda j: (-float(np.dot(q[i], r[j])), j))
        hits += any(rp[j] == qp[i] for j in order[:k])
    return hits / len(q)


def test_self_retrieval():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 5))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    rep = recall_at_k(None, split_from(x, np.arange(20), x, np.arange(20)))
    assert rep.recall_at[1] == 1.0


@pytest.mark.parametrize("seed", range(4))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    q, r = rng.normal(size=(30, 4)), rng.normal(size=(80, 4))
    qp, rp = rng.integers(0, 10, 30), rng.integers(0, 10, 80)
    rep = recall_at_k(None, split_from(q, qp, r, rp), ks=(1, 2, 5, 10))
    for k in (1, 2, 5, 10):
        assert rep.recall_at[k] == brute_force_recall(q, qp, r, rp, k)


def test_ties_broken_by_reference_index():
    q = np.array([[1.0, 0.0]])
    r = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert recall_at_k(None, split_from(q, [7], r, [3, 7]), ks=(1, 2)).recall_at == {1: 0.0, 2: 1.0}
    assert recall_at_k(None, split_from(q, [7], r, [7, 3]), ks=(1,)).recall_at == {1: 1.0}
    assert true_match_ranks(q, np.array([7]), r, np.array([3, 7])).tolist() == [1]


def test_random_embeddings_chance_level():
    # Monte Carlo: one reference per place -> recall@1 ~ 1/N
    N, trials = 20, 300
    hits = []
    for t in range(trials):
        rng = np.random.default_rng(t)
        q, r = rng.normal(size=(N, 8)), rng.normal(size=(N, 8))
        hits.append(recall_at_k(None, split_from(q, np.arange(N), r, np.arange(N)), ks=(1,)).recall_at[1])
    p = 1 / N
    sigma = np.sqrt(p * (1 - p) / (N * trials))
    assert abs(np.mean(hits) - p) < 3 * sigma


def test_monotone_and_side_effect_free():
    ds = generate(GeneratorConfig(n_places=50, feature_dim=6, n_archetypes=5))
    sp = make_eval_split(ds, 0.2, 0)
    model = Model(EncoderConfig(input_dim=6, hidden_dim=8, embed_dim=6, proxy_dim=2))
    a = recall_at_k(model, sp)
    b = recall_at_k(model, sp)
    assert a == b
    assert a.recall_at[1] <= a.recall_at[5] <= a.recall_at[10]
    assert a.n_queries == 50 and a.n_references == 250


def test_empty_queries_rejected():
    with pytest.raises(ValueError):
        recall_at_k(None, split_from(np.zeros((0, 2)), [], np.eye(2), [0, 1]))


def test_cost_report_published_sizes():
    assert cost_report(65_000, 128).bank_bytes == 33_280_000
    assert cost_report(65_000, 128).bank_gb == pytest.approx(0.03328)
    assert cost_report(65_000, 32).bank_gb == pytest.approx(0.00832)
    assert cost_report(65_000, 256).bank_bytes == 2 * cost_report(65_000, 128).bank_bytes
    assert cost_report(130_000, 128).bank_bytes == 2 * cost_report(65_000, 128).bank_bytes
    table = cache_size_table()
    assert list(table) == [32, 64, 128, 256, 512, 1024]


def test_bank_cost_report():
    bank = MemoryBank(4)
    for i in range(10):
        bank.update(i, np.eye(4)[i % 4], 0)
    rep = bank_cost_report(bank, {"plan_build_seconds": 0.5}, bytes_per_float=8)
    assert rep.bank_bytes == 10 * 4 * 8 == bank.nbytes(8)
    assert rep.plan_build_seconds == 0.5
