import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpm.model import EncoderConfig, Model
from gpm.numerics import DegenerateInputError
from gpm.sampler import (
    BatchPlan,
    EpochEnd,
    MemoryBank,
    Sampler,
    SamplerConfig,
    bank_bytes,
    build_batch_plan,
    compute_place_proxy,
    knn_search,
    random_plan,
)


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def filled_bank(proxies, ids=None):
    bank = MemoryBank(proxies.shape[1])
    ids = range(len(proxies)) if ids is None else ids
    for i, c in zip(ids, proxies):
        bank.update(i, c, 0)
    return bank


def assert_partition(plan, ids, M):
    flat = plan.place_ids()
    assert sorted(flat) == sorted(ids)
    assert len(flat) == len(set(flat))
    assert all(len(t) == M for t in plan.tuples[:-1])
    assert 1 <= len(plan.tuples[-1]) <= M


def test_proxy_of_copies():
    u = np.array([0.6, 0.0, 0.8])
    np.testing.assert_allclose(compute_place_proxy(np.tile(u, (4, 1))), u, atol=1e-15)


def test_proxy_antipodal_is_degenerate():
    with pytest.raises(DegenerateInputError):
        compute_place_proxy(np.array([[1.0, 0.0], [-1.0, 0.0]]))


def test_proxy_mean_then_normalize():
    rng = np.random.default_rng(0)
    rows = unit_rows(rng, 4, 5)
    mean = [sum(rows[k, j] for k in range(4)) / 4 for j in range(5)]
    norm = sum(m * m for m in mean) ** 0.5
    np.testing.assert_allclose(compute_place_proxy(rows), [m / norm for m in mean], atol=1e-14)


def test_bank_upsert():
    bank = MemoryBank(2)
    bank.update(7, [1.0, 0.0], 0)
    assert len(bank) == 1
    bank.update(7, [0.0, 1.0], 3)
    assert len(bank) == 1
    np.testing.assert_array_equal(bank.get(7), [0.0, 1.0])
    assert bank.last_update_epoch(7) == 3
    with pytest.raises(ValueError):
        bank.update(8, [2.0, 0.0], 0)


def test_bank_is_detached_from_model():
    model = Model(EncoderConfig(input_dim=4, hidden_dim=6, embed_dim=5, proxy_dim=3))
    feats = np.random.default_rng(1).normal(size=(4, 4))
    z = model.forward(feats).z
    bank = MemoryBank(3)
    bank.update(0, compute_place_proxy(z), 0)
    stored = bank.get(0).copy()
    for p in model.params():
        p.value += 1.0
    z[...] = 0.0
    np.testing.assert_array_equal(bank.get(0), stored)


def test_bank_dump_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    bank = filled_bank(unit_rows(rng, 20, 6), ids=range(100, 120))
    bank.update(105, unit_rows(rng, 1, 6)[0], 4)
    bank.dump(tmp_path / "bank.csv")
    back = MemoryBank.load(tmp_path / "bank.csv")
    ids, P = bank.as_arrays()
    ids2, P2 = back.as_arrays()
    np.testing.assert_array_equal(ids, ids2)
    assert P.tobytes() == P2.tobytes()
    assert back.last_update_epoch(105) == 4


def sort_oracle(ids, refs, query, k):
    sims = [(-float(np.dot(r, query)), int(i)) for i, r in zip(ids, refs)]
    return [i for _, i in sorted(sims)[:k]]


def test_knn_examples():
    rng = np.random.default_rng(3)
    refs = unit_rows(rng, 30, 4)
    ids = np.arange(30) * 2
    assert knn_search(ids, refs, refs[7], 1)[0] == 14
    assert sorted(knn_search(ids, refs, refs[0], 30).tolist()) == ids.tolist()
    with pytest.raises(ValueError):
        knn_search(ids, refs, refs[0], 31)


@pytest.mark.parametrize("seed", range(5))
def test_knn_matches_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    refs = unit_rows(rng, 200, 8)
    ids = rng.permutation(1000)[:200]
    q = unit_rows(rng, 1, 8)[0]
    assert knn_search(ids, refs, q, 8).tolist() == sort_oracle(ids, refs, q, 8)


def test_knn_ties_by_smaller_id():
    refs = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]])
    ids = np.array([9, 4, 6, 1])
    assert knn_search(ids, refs, np.array([1.0, 0.0]), 2).tolist() == [4, 6]


def test_plan_orthogonal_bank():
    bank = filled_bank(np.eye(10))
    plan = build_batch_plan(bank, 2, rng_seed=0)
    assert len(plan) == 5
    assert_partition(plan, range(10), 2)


def test_plan_remainder_sizes():
    rng = np.random.default_rng(4)
    plan = build_batch_plan(filled_bank(unit_rows(rng, 10, 3)), 4, rng_seed=1)
    assert [len(t) for t in plan.tuples] == [4, 4, 2]
    assert_partition(plan, range(10), 4)


def clustered_bank(rng, G, M, d=16, spread=0.01):
    centers = unit_rows(rng, G, d) * 5
    pts = np.repeat(centers, M, axis=0) + spread * rng.normal(size=(G * M, d))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    ids = rng.permutation(G * M)
    truth = {frozenset(ids[g * M:(g + 1) * M].tolist()) for g in range(G)}
    return filled_bank(pts, ids), truth


@pytest.mark.parametrize("G,M", [(2, 4), (5, 8), (12, 3)])
def test_plan_recovers_clusters(G, M):
    rng = np.random.default_rng(G * 10 + M)
    bank, truth = clustered_bank(rng, G, M)
    plan = build_batch_plan(bank, M, rng_seed=G)
    assert {frozenset(t) for t in plan.tuples} == truth


def test_plan_deterministic_and_empty_bank():
    rng = np.random.default_rng(5)
    bank = filled_bank(unit_rows(rng, 50, 4))
    assert build_batch_plan(bank, 6, 9).tuples == build_batch_plan(bank, 6, 9).tuples
    with pytest.raises(ValueError):
        build_batch_plan(MemoryBank(3), 4, 0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 300), M=st.integers(2, 16), seed=st.integers(0, 2**32 - 1))
def test_plan_partition_property(n, M, seed):
    rng = np.random.default_rng(seed)
    plan = build_batch_plan(filled_bank(unit_rows(rng, n, 5)), M, seed)
    assert_partition(plan, range(n), M)


def test_plan_dump_round_trip(tmp_path):
    plan = BatchPlan([[3, 1, 2], [5, 4]], epoch_built_for=2, mode="gpm")
    plan.dump(tmp_path / "plan.txt")
    back = BatchPlan.load(tmp_path / "plan.txt")
    assert back == plan


def test_random_plan_partition():
    plan = random_plan(range(23), 5, np.random.default_rng(0))
    assert_partition(plan, range(23), 5)


def test_batch_size_published_defaults():
    s = Sampler(SamplerConfig(M=60, K=4, mode="random"), {i: 8 for i in range(600)})
    s.epoch_boundary(MemoryBank(4), 0)
    batch = s.next_batch()
    assert len(batch) == 60
    assert sum(len(idx) for _, idx in batch) == 240
    assert all(len(set(idx)) == 4 for _, idx in batch)


def test_small_place_sampled_with_replacement():
    s = Sampler(SamplerConfig(M=2, K=4, mode="random"), {0: 3, 1: 6})
    picks = s.pick_images(0)
    assert len(picks) == 4 and set(picks) == {0, 1, 2}


def test_sampler_config_validation():
    for bad in (SamplerConfig(M=1), SamplerConfig(K=1), SamplerConfig(mode="hard")):
        with pytest.raises(ValueError):
            bad.validate()


def drive_epoch(sampler, bank, epoch, rng, dim):
    seen = []
    for batch in sampler:
        for pid, _ in batch:
            bank.update(pid, unit_rows(rng, 1, dim)[0], epoch)
            seen.append(pid)
    return seen


@pytest.mark.parametrize("mode", ["gpm", "random"])
def test_epoch_boundary_bootstrap_and_coverage(mode):
    counts = {i: 5 for i in range(37)}
    s = Sampler(SamplerConfig(M=4, K=2, mode=mode, seed=1), counts)
    bank = MemoryBank(3)
    rng = np.random.default_rng(0)
    assert s.epoch_boundary(bank, 0).mode == "random"
    seen = drive_epoch(s, bank, 0, rng, 3)
    assert sorted(seen) == list(range(37))
    assert len(bank) == 37
    plan = s.epoch_boundary(bank, 1)
    assert plan.mode == mode
    assert sorted(plan.place_ids()) == list(range(37))
    assert sorted(drive_epoch(s, bank, 1, rng, 3)) == list(range(37))
    with pytest.raises(EpochEnd):
        s.next_batch()


def test_partial_bank_falls_back_to_random():
    s = Sampler(SamplerConfig(M=2, K=2, mode="gpm"), {i: 2 for i in range(6)})
    bank = filled_bank(np.eye(3))
    assert s.epoch_boundary(bank, 4).mode == "random"


def test_bank_bytes_formula():
    assert bank_bytes(65_000, 128, 4) == 33_280_000
    assert bank_bytes(65_000, 256, 4) == 2 * bank_bytes(65_000, 128, 4)
