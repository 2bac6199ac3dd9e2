import numpy as np
import pytest

from gpm import dataset as dsmod
from gpm.dataset import DatasetFormatError, GeneratorConfig, generate, make_eval_split
from gpm.evaluation import recall_at_k

SMALL = GeneratorConfig(n_places=60, images_min=4, images_max=7, feature_dim=8, n_archetypes=6, seed=3)


def test_generate_deterministic_per_seed():
    a, b = generate(SMALL), generate(SMALL)
    assert a == b
    c = generate(GeneratorConfig(**{**SMALL.__dict__, "seed": 4}))
    assert not np.array_equal(a.features, c.features)


def test_dataset_invariants():
    ds = generate(SMALL)
    ds.validate()
    assert len(set(ds.place_ids.tolist())) == ds.n_places == 60
    assert ds.counts.min() >= 4 and ds.counts.max() <= 7
    assert np.bincount(ds.archetypes).tolist() == [10] * 6


def test_zero_within_place_noise():
    ds = generate(GeneratorConfig(**{**SMALL.__dict__, "sigma_place": 0.0}))
    for p in ds.place_ids:
        imgs = ds.images(p)
        assert np.all(imgs == imgs[0])


def test_one_archetype_per_place():
    ds = generate(GeneratorConfig(**{**SMALL.__dict__, "n_archetypes": 60}))
    assert sorted(ds.archetypes.tolist()) == list(range(60))


def test_archetype_similarity_structure():
    ds = generate(GeneratorConfig(n_places=500, n_archetypes=20, feature_dim=32, seed=0))
    c = ds.place_centers()
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    S = c @ c.T
    same = ds.archetypes[:, None] == ds.archetypes[None, :]
    np.fill_diagonal(same, False)
    cross = ds.archetypes[:, None] != ds.archetypes[None, :]
    assert S[same].mean() > S[cross].mean() + 0.3


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(sigma_place=0.2, sigma_archetype=0.1).validate()
    with pytest.raises(ValueError):
        GeneratorConfig(n_places=10, n_archetypes=11).validate()
    with pytest.raises(ValueError):
        GeneratorConfig(images_min=1).validate()


def raw_recall(sigma_place, sigma_archetype):
    cfg = GeneratorConfig(n_places=400, feature_dim=16, n_archetypes=10, sigma_place=sigma_place,
                          sigma_archetype=sigma_archetype, seed=1)
    ds = generate(cfg)
    return recall_at_k(None, make_eval_split(ds, 0.2, 0)).recall_at[1]


def test_difficulty_knob_is_monotone():
    easy, mid, hard = raw_recall(0.03, 0.1), raw_recall(0.06, 0.1), raw_recall(0.09, 0.1)
    assert easy > mid > hard


def test_save_load_round_trip(tmp_path):
    ds = generate(SMALL)
    dsmod.save(ds, tmp_path / "d.gpm")
    back = dsmod.load(tmp_path / "d.gpm")
    assert back == ds
    assert back.features.tobytes() == ds.features.tobytes()


def test_truncated_file(tmp_path):
    ds = generate(SMALL)
    path = tmp_path / "d.gpm"
    dsmod.save(ds, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-13])
    with pytest.raises(DatasetFormatError, match="byte offset"):
        dsmod.load(path)
    path.write_bytes(raw[:40])
    with pytest.raises(DatasetFormatError, match=":2:"):
        dsmod.load(path)
    path.write_bytes(b"hello")
    with pytest.raises(DatasetFormatError):
        dsmod.load(path)


def test_duplicate_place_id(tmp_path):
    ds = generate(SMALL)
    ds.place_ids[5] = ds.place_ids[4]
    dsmod.save(ds, tmp_path / "d.gpm")
    with pytest.raises(DatasetFormatError, match="duplicate place_id"):
        dsmod.load(tmp_path / "d.gpm")


def test_export_csv(tmp_path):
    ds = generate(SMALL)
    dsmod.export_csv(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert len(lines) == 1 + int(ds.counts.sum())
    assert float(lines[1].split(",")[4]) == ds.features[0, 0]


def test_split_examples():
    ds = generate(GeneratorConfig(n_places=30, images_min=4, images_max=4, feature_dim=4, n_archetypes=3))
    empty = make_eval_split(ds, 0.0, 0)
    assert len(empty.query_places) == 0 and len(empty.ref_places) == 120
    sp = make_eval_split(ds, 0.25, 0)
    for p in ds.place_ids.tolist():
        assert len(sp.query_index[p]) == 1 and len(sp.reference_index[p]) == 3
        assert not set(sp.query_index[p]) & set(sp.reference_index[p])
    sp2 = make_eval_split(ds, 0.25, 0)
    assert sp2.query_index == sp.query_index
    np.testing.assert_array_equal(sp2.query_features, sp.query_features)


def test_split_skips_places_without_reference(caplog):
    ds = generate(GeneratorConfig(n_places=4, images_min=2, images_max=2, feature_dim=3, n_archetypes=2))
    sp = make_eval_split(ds, 0.9, 0)
    assert len(sp.query_places) == 0
    assert "skipped" in caplog.text


def test_subset_keeps_reference_images():
    ds = generate(SMALL)
    sp = make_eval_split(ds, 0.25, 1)
    train = ds.subset(sp.reference_index)
    for p in ds.place_ids.tolist():
        np.testing.assert_array_equal(train.images(p), ds.images(p)[sp.reference_index[p]])
