import numpy as np
import pytest
from scipy import ndimage

from cmaformer.data import (
    BACKGROUND,
    ORGAN,
    TUMOR,
    ArrayDataset,
    DatasetManifest,
    generate_dataset,
    load_dataset,
    mark_labeled_fraction,
    save_dataset,
    split_dataset,
)
from cmaformer.errors import ConfigError, DataError
from cmaformer.model import ModelConfig
from cmaformer.training import TrainConfig, Trainer, fit


@pytest.fixture(scope="module")
def small():
    return generate_dataset(40, 32, seed=3)


def test_same_seed_same_hash(small):
    _, m1 = small
    _, m2 = generate_dataset(40, 32, seed=3)
    assert m1.hash == m2.hash
    assert generate_dataset(40, 32, seed=4)[1].hash != m1.hash


def test_sample_invariants(small):
    for r in small[0]:
        tumor, fg = r.label == TUMOR, r.label > BACKGROUND
        assert r.image.shape == (1, 32, 32) and r.image.dtype == np.float32
        assert set(np.unique(r.label)) <= {BACKGROUND, ORGAN, TUMOR}
        assert tumor.any()
        assert (r.label == ORGAN).sum() > 0 and fg.sum() > tumor.sum()
        # tumors sit strictly inside the organ: never touching background
        grown = ndimage.binary_dilation(tumor, structure=ndimage.generate_binary_structure(2, 1))
        assert not (grown & ~fg).any()
        organ_frac = fg.mean()
        assert 0.08 <= organ_frac <= 0.40


def test_long_tail_fraction():
    records, _ = generate_dataset(100, 64, seed=0)
    frac = np.mean([(r.label == TUMOR).mean() for r in records])
    assert frac < 0.05


@pytest.mark.parametrize("n,h", [(19, 64), (20, 16)])
def test_degenerate_sizes(n, h):
    with pytest.raises(ConfigError):
        generate_dataset(n, h)


def test_non_square_rejected():
    with pytest.raises(ConfigError):
        generate_dataset(20, 32, 48)


def test_split_sizes_and_partition():
    _, m = generate_dataset(100, 32, seed=1)
    m = split_dataset(m, (0.8, 0.15, 0.05))
    parts = [m.ids_in(s) for s in ("train", "val", "test")]
    assert [len(p) for p in parts] == [80, 15, 5]
    assert sorted(sum(parts, [])) == sorted(m.ids)
    assert split_dataset(m, (0.8, 0.15, 0.05)).split == m.split
    assert split_dataset(m, (0.8, 0.15, 0.05), seed=9).split != m.split


@pytest.mark.parametrize("ratios", [(0.8, 0.1, 0.05), (1.2, -0.1, -0.1), (0.5, 0.5)])
def test_bad_ratios(small, ratios):
    with pytest.raises(ConfigError):
        split_dataset(small[1], ratios)


def test_labeled_fraction():
    _, m = generate_dataset(100, 32, seed=1)
    assert m.labeled_ids() == m.ids_in("train")
    half = mark_labeled_fraction(m, 0.5, seed=2)
    assert len(half.labeled_ids()) == 40 and len(half.unlabeled_ids()) == 40
    assert set(half.labeled) == set(m.ids_in("train"))
    assert mark_labeled_fraction(m, 1.0).labeled_ids() == m.ids_in("train")
    for bad in (0.0, 1.5):
        with pytest.raises(ConfigError):
            mark_labeled_fraction(m, bad)


def test_hash_tracks_content(small):
    _, m = small
    flipped = m.copy(labeled={**m.labeled, m.ids_in("train")[0]: False})
    assert flipped.hash != m.hash
    moved = m.copy(sample_hashes={**m.sample_hashes, m.ids[0]: "0" * 64})
    assert moved.hash != m.hash
    assert m.copy().hash == m.hash


def test_disk_round_trip(small, tmp_path):
    records, m = small
    save_dataset(str(tmp_path), records, m)
    loaded, m2 = load_dataset(str(tmp_path))
    assert m2.hash == m.hash
    for a, b in zip(records, loaded):
        assert np.array_equal(a.image, b.image) and np.array_equal(a.label, b.label)
        assert b.content_hash() == m.sample_hashes[b.sample_id]


def test_load_errors(small, tmp_path):
    with pytest.raises(DataError):
        load_dataset(str(tmp_path / "missing"))
    records, m = small
    save_dataset(str(tmp_path), records, m)
    (tmp_path / "masks" / f"{m.ids[0]}.png").unlink()
    with pytest.raises(DataError):
        load_dataset(str(tmp_path))
    raw = m.to_json()
    raw["seed"] += 1
    with pytest.raises(DataError):
        DatasetManifest.from_json(raw)


def test_unlabeled_labels_never_reach_training(small):
    records, m = small
    m = mark_labeled_fraction(m, 0.5, seed=0)
    cfg = ModelConfig(img_size=32, stage_widths=(8, 16), depths=(1, 1), heads=(2, 2), stem_width=4, rates=(1, 2))

    def trajectory(data):
        tr = Trainer(cfg, cfg=TrainConfig(batch_size=4), max_steps=20, seed=0)
        recs = fit(tr, data, m, epochs=2)
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in recs]

    clean = ArrayDataset(records)
    corrupted = ArrayDataset(records)
    rng = np.random.default_rng(0)
    for i in m.unlabeled_ids():
        row = corrupted.index[i]
        corrupted.labels[row] = rng.integers(0, 3, size=corrupted.labels[row].shape)
    assert trajectory(clean) == trajectory(corrupted)
