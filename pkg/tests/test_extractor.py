import numpy as np
import pytest
from sklearn.base import clone

from landmark_retrieval.cleaner import clean_dataset
from landmark_retrieval.config import DbscanParams, SyntheticWorldConfig, build_config
from landmark_retrieval.cutmix import Corner, corner_cutmix, patch_slices
from landmark_retrieval.exceptions import ConfigError
from landmark_retrieval.extractor import (
    CHANNELS,
    FeatureExtractor,
    ToyExtractor,
    as_labeled,
    cell_bounds,
    generate_pixel_world,
    generate_synthetic_dataset,
    mixed_views,
    toy_extract,
)
from landmark_retrieval.io import encode_embeddings


def test_toy_extract_deterministic_and_shaped():
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))
    a, b = toy_extract(img), toy_extract(img.copy())
    assert a.shape == (4, 4, CHANNELS)
    assert a.tobytes() == b.tobytes()
    assert toy_extract(np.zeros((16, 16, 1))).shape == (4, 4, CHANNELS)


def test_black_and_white_differ():
    assert not np.array_equal(toy_extract(np.zeros((16, 16, 3))), toy_extract(np.ones((16, 16, 3))))


def intersects(a: slice, b: slice) -> bool:
    return a.start < b.stop and b.start < a.stop


@pytest.mark.parametrize("corner", list(Corner))
@pytest.mark.parametrize("fraction", [0.2, 0.45, 0.7])
def test_locality_of_pasted_patch(corner, fraction):
    rng = np.random.default_rng(int(corner) * 10 + int(fraction * 100))
    base = rng.uniform(size=(32, 32, 3))
    mixed = corner_cutmix(rng.uniform(size=(32, 32, 3)), base, corner, fraction)
    before, after = toy_extract(base), toy_extract(mixed)
    rows, cols = patch_slices(32, 32, corner, fraction)
    bounds = cell_bounds(32, 32)
    touched = 0
    for i in range(4):
        for j in range(4):
            r, c = bounds[i][j]
            if intersects(r, rows) and intersects(c, cols):
                touched += 1
            else:
                np.testing.assert_array_equal(after[i, j], before[i, j])
    assert 0 < touched < 16


def test_toy_extractor_estimator():
    imgs = np.random.default_rng(1).uniform(size=(3, 16, 16, 3))
    ex = ToyExtractor()
    assert isinstance(ex, FeatureExtractor)
    assert clone(ex).get_params() == {"pooling": "gap", "gem_p": 3.0}
    assert ex.fit_transform(imgs).shape == (3, CHANNELS)
    assert ToyExtractor("gem").transform(imgs).shape == (3, CHANNELS)
    assert ToyExtractor(None).transform(imgs).shape == (3, 4, 4, CHANNELS)
    with pytest.raises(ValueError):
        ToyExtractor("max").transform(imgs)


def test_dataset_counts_norms_and_ids():
    cfg = SyntheticWorldConfig(categories=6, modes_per_category=2, points_per_mode=10, noise_fraction=0.25, seed=3)
    ds = generate_synthetic_dataset(cfg)
    n_clean = 6 * 2 * 10
    assert len(ds.train) == n_clean + round(n_clean * 0.25 / 0.75)
    assert len(ds.gallery) == 6 * 2 * cfg.gallery_per_mode
    assert len(ds.queries) == 6 * 2 * cfg.queries_per_mode
    for split in ds:
        for r in split:
            assert abs(np.linalg.norm(r.vector) - 1) <= 1e-6
            assert 0 <= r.label < 6
    ids = [{r.id for r in split} for split in ds]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert sum(mode == -1 for _, mode in ds.origin.values()) == 40
    recs = ds.manifest_records()
    assert {r["split"] for r in recs} == {"train", "gallery", "query"}
    assert len(recs) == sum(len(s) for s in ds)


def test_dataset_deterministic():
    cfg = SyntheticWorldConfig(categories=4, seed=11)
    a, b = generate_synthetic_dataset(cfg), generate_synthetic_dataset(cfg)
    for sa, sb in zip(a, b):
        assert encode_embeddings(sa) == encode_embeddings(sb)
    assert a.manifest_records() == b.manifest_records()
    c = generate_synthetic_dataset(cfg.model_copy(update={"seed": 12}))
    assert encode_embeddings(c.train) != encode_embeddings(a.train)


def test_clean_world_is_bijection():
    cfg = SyntheticWorldConfig(categories=8, modes_per_category=1, noise_fraction=0.0, seed=2)
    ds = generate_synthetic_dataset(cfg)
    out, report = clean_dataset(ds.train, DbscanParams())
    assert report.dropped == 0 and report.rescued == 0 and report.new_category_count == 8
    old = {r.id: r.label for r in ds.train}
    pairs = {(old[r.id], r.label) for r in out}
    assert len(pairs) == 8 and len({p[0] for p in pairs}) == 8 and len({p[1] for p in pairs}) == 8


def test_two_mode_world_doubles_categories():
    cfg = SyntheticWorldConfig(categories=10, modes_per_category=2, noise_fraction=0.2, seed=4)
    ds = generate_synthetic_dataset(cfg)
    _, report = clean_dataset(ds.train, DbscanParams())
    assert 18 <= report.new_category_count <= 22
    for cat in report.categories:
        assert len(cat.new_labels) >= 2


def test_invalid_noise_fraction():
    with pytest.raises(ConfigError, match="noise_fraction"):
        build_config({"world": {"noise_fraction": 1.5}})
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(SyntheticWorldConfig.model_construct(noise_fraction=1.0))


def test_pixel_world_shapes_and_occlusion():
    cfg = SyntheticWorldConfig(kind="pixel", categories=3, modes_per_category=1, points_per_mode=4,
                               gallery_per_mode=2, queries_per_mode=3, noise_fraction=0.0, image_size=16, seed=5)
    pw = generate_pixel_world(cfg)
    assert pw.train_images.shape == (12, 16, 16, 3)
    assert pw.gallery_images.shape == (6, 16, 16, 3)
    assert pw.query_images.shape == pw.clean_query_images.shape == (9, 16, 16, 3)
    for occluded, clean in zip(pw.query_images, pw.clean_query_images):
        diff = np.argwhere(np.any(occluded != clean, axis=2))
        assert len(diff)
        r0, c0 = diff.min(axis=0)
        r1, c1 = diff.max(axis=0)
        # changes stay inside a rectangle touching two image edges
        assert (r0 == 0 or r1 == 15) and (c0 == 0 or c1 == 15)
    again = generate_pixel_world(cfg)
    assert again.query_images.tobytes() == pw.query_images.tobytes()


def test_mixed_views():
    rng = np.random.default_rng(6)
    imgs = rng.uniform(size=(6, 16, 16, 3))
    labels = np.array([0, 0, 1, 1, 2, 2])
    feats, partner_labels, partners = mixed_views(imgs, labels, 2, seed=3)
    assert feats.shape == (2, 6, CHANNELS)
    assert partner_labels.shape == partners.shape == (2, 6)
    assert np.all(partner_labels != labels[None])
    np.testing.assert_array_equal(partner_labels, labels[partners])
    again = mixed_views(imgs, labels, 2, seed=3)
    assert again[0].tobytes() == feats.tobytes()


def test_as_labeled():
    rows = as_labeled(np.eye(12), range(12), "t")
    assert rows[0].id == "t00" and rows[11].id == "t11" and rows[5].label == 5
