import json
import os

import numpy as np
import pytest

from flowseg.data import (
    DataConfig,
    PatchDataset,
    PatchPair,
    SeismicSection,
    build_datasets,
    dataset_digest,
    extract_patch_grid,
    filter_boundary_patches,
    grid_anchors,
    grid_stride,
    hflip_augment,
    load_dataset,
    load_section,
    normalize_image,
    salt_fraction,
    save_dataset,
    save_section,
    source_hashes,
    velocity_to_mask,
)
from flowseg.demo import make_demo_section, write_demo_bundle
from flowseg.tensor import ShapeError, save_array


def band_section(height=64, width=128, band=(24, 40), splits=None):
    """Section with a horizontal salt band; analytic patch fractions."""
    rng = np.random.default_rng(0)
    image = rng.normal(size=(height, width))
    mask = np.zeros((height, width))
    mask[band[0] : band[1], :] = 1.0
    if splits is None:
        splits = [("train", 0, width // 2), ("val", width // 2, 3 * width // 4),
                  ("test", 3 * width // 4, width)]
    return SeismicSection(image=image, mask=mask, splits=splits, section_id=0)


def test_normalize_oracle_and_idempotence():
    out = normalize_image(np.array([[0.0, 2.0]]))
    assert np.array_equal(out, np.array([[-1.0, 1.0]]))
    img = np.random.default_rng(1).normal(size=(20, 30)) * 3 + 5
    n1 = normalize_image(img)
    assert abs(n1.mean()) < 1e-10 and abs(n1.std() - 1.0) < 1e-10
    assert np.abs(normalize_image(n1) - n1).max() < 1e-12
    with pytest.raises(ValueError):
        normalize_image(np.full((4, 4), 3.3))


def test_velocity_to_mask_examples():
    assert np.array_equal(velocity_to_mask(np.array([1.0, 3.0, 5.0]), 4, 0, 10),
                          np.array([0.0, 0.0, 1.0]))
    v = np.array([2.0, 7.0, 9.0])
    assert np.array_equal(velocity_to_mask(v, 2.0, 0, 10), np.ones(3))
    # 99 clips down to 10, which reaches the threshold
    assert np.array_equal(velocity_to_mask(np.array([1.0, 99.0]), 10, 0, 10),
                          np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        velocity_to_mask(v, 5, 10, 0)
    with pytest.raises(ValueError):
        velocity_to_mask(v, 50, 0, 10)


def test_grid_counts():
    assert grid_stride(64, 0.9) == 6
    assert grid_stride(64, 0.1) == 58
    assert grid_anchors(64, 64, 6) == [0]
    assert len(grid_anchors(128, 64, 6)) == 12  # 11 regular + far edge
    assert grid_anchors(128, 64, 58) == [0, 58, 64]
    with pytest.raises(ValueError):
        grid_anchors(32, 64, 6)
    with pytest.raises(ValueError):
        grid_stride(64, 1.0)
    with pytest.raises(ValueError):
        grid_stride(64, -0.1)


def test_grid_covers_section_and_overlap_fraction():
    sec = band_section(64, 100, splits=[("train", 0, 100)])
    patch, overlap = 16, 0.7
    pairs = extract_patch_grid(sec, patch, overlap)
    covered = np.zeros((64, 100), dtype=bool)
    stride = grid_stride(patch, overlap)
    for p in pairs:
        r, c, _, _ = p.origin
        covered[r : r + patch, c : c + patch] = True
        assert np.array_equal(p.x, sec.image[r : r + patch, c : c + patch])
    assert covered.all()
    # adjacent regular anchors overlap by 1 - stride/patch along each axis
    rows = sorted({p.origin[0] for p in pairs})
    frac = 1.0 - (rows[1] - rows[0]) / patch
    assert abs(frac - (1.0 - stride / patch)) < 1.0 / patch + 1e-12


def test_salt_fraction_examples():
    assert salt_fraction(np.zeros((8, 8))) == 0.0
    half = np.zeros((64, 64))
    half[:, :32] = 1.0
    assert salt_fraction(half) == 0.5
    y = np.zeros(4096)
    y[:410] = 1.0
    assert abs(salt_fraction(y.reshape(64, 64)) - 0.1001) < 5e-5
    assert salt_fraction(y.reshape(64, 64)) == 410 / 4096
    with pytest.raises(ValueError):
        salt_fraction(np.full((4, 4), 0.5))


def make_pair(frac, patch=20, flipped=False):
    # patch 20: fractions that are multiples of 0.0025 are exact
    y = np.zeros(patch * patch)
    y[: int(round(frac * patch * patch))] = 1.0
    x = np.random.default_rng(2).normal(size=(patch, patch))
    return PatchPair(x=x, y=y.reshape(patch, patch), origin=(0, 0, 0, flipped))


def test_filter_inclusive_bounds_and_order():
    pairs = [make_pair(f) for f in (0.0, 0.1, 0.5, 0.9, 1.0, 0.3)]
    kept = filter_boundary_patches(pairs)
    assert [salt_fraction(p.y) for p in kept] == [0.1, 0.5, 0.9, 0.3]
    assert all(k is pairs[i] for k, i in zip(kept, (1, 2, 3, 5)))
    with pytest.raises(ValueError):
        filter_boundary_patches(pairs, lo=0.9, hi=0.1)


def test_hflip_doubles_and_preserves():
    pairs = [make_pair(0.25), make_pair(0.5)]
    snap = [(p.x.copy(), p.y.copy()) for p in pairs]
    out = hflip_augment(pairs)
    assert len(out) == 4
    assert out[0] is pairs[0] and out[1] is pairs[1]
    for orig, flip in zip(out[:2], out[2:]):
        assert np.array_equal(flip.x, orig.x[:, ::-1])
        assert np.array_equal(flip.y, orig.y[:, ::-1])
        assert flip.origin[3] is True and orig.origin[3] is False
        assert salt_fraction(flip.y) == salt_fraction(orig.y)
        assert np.array_equal(flip.x[:, ::-1], orig.x)  # flip twice = identity
    for p, (x0, y0) in zip(pairs, snap):
        assert np.array_equal(p.x, x0) and np.array_equal(p.y, y0)


def test_hflip_symmetric_patch():
    x = np.tile(np.array([1.0, 2.0, 2.0, 1.0]), (4, 1))
    y = np.tile(np.array([0.0, 1.0, 1.0, 0.0]), (4, 1))
    p = PatchPair(x=x, y=y, origin=(3, 5, 0, False))
    out = hflip_augment([p])
    assert np.array_equal(out[1].x, p.x) and np.array_equal(out[1].y, p.y)
    assert out[1].origin == (3, 5, 0, True)


def expected_band_keep_count(height, band, patch, stride, lo=0.1, hi=0.9):
    """Row anchors whose patch salt fraction falls inside [lo, hi]."""
    keep = 0
    for r in grid_anchors(height, patch, stride):
        overlap = max(0, min(r + patch, band[1]) - max(r, band[0]))
        frac = overlap * patch / (patch * patch)
        if lo <= frac <= hi:
            keep += 1
    return keep


def test_build_datasets_counting_oracle():
    sec = band_section(64, 128, band=(24, 40))
    cfg = DataConfig(patch=16)
    gen, seg = build_datasets([sec], cfg)

    stride_g = grid_stride(16, 0.9)
    n_rows_keep = expected_band_keep_count(64, (24, 40), 16, stride_g)
    for split, lo, hi in sec.splits:
        cols = len(grid_anchors(hi - lo, 16, stride_g))
        if split in ("train", "val"):
            assert len(gen.pairs[split]) == 2 * n_rows_keep * cols

    stride_s = grid_stride(16, 0.1)
    rows_s = len(grid_anchors(64, 16, stride_s))
    for split, lo, hi in sec.splits:
        cols = len(grid_anchors(hi - lo, 16, stride_s))
        assert len(seg.pairs[split]) == 2 * rows_s * cols  # every anchor, no filter


def test_build_datasets_fraction_bounds_and_hygiene():
    sec = band_section(64, 128)
    gen, seg = build_datasets([sec], DataConfig(patch=16))
    for split, pairs in gen.pairs.items():
        for p in pairs:
            assert 0.1 <= salt_fraction(p.y) <= 0.9
    # no origin rectangle crosses its split's column interval
    bounds = {label: (lo, hi) for label, lo, hi in sec.splits}
    seen = set()
    for ds in (gen, seg):
        for split, pairs in ds.pairs.items():
            lo, hi = bounds[split]
            for p in pairs:
                r, c, sid, flipped = p.origin
                assert lo <= c and c + 16 <= hi
                key = (id(ds), r, c, sid, flipped)
                assert key not in seen
                seen.add(key)


def test_build_datasets_normalization_recorded():
    sec = band_section(64, 128)
    raw_mean, raw_std = sec.image.mean(), sec.image.std()
    gen, seg = build_datasets([sec], DataConfig(patch=16))
    stats = gen.manifest["normalization"]["0"]
    assert stats["mean"] == pytest.approx(raw_mean) and stats["std"] == pytest.approx(raw_std)
    recon = np.concatenate([p.x.ravel() for p in seg.pairs["train"]])
    assert abs(recon.mean()) < 0.3  # normalized scale, not raw


def test_build_datasets_empty_split_errors():
    # all-salt section: the generative filter drops every patch
    sec = band_section(64, 128, band=(0, 64))
    with pytest.raises(ValueError, match="empty"):
        build_datasets([sec], DataConfig(patch=16))
    with pytest.raises(ValueError, match="split label"):
        build_datasets(
            [band_section(64, 128, splits=[("train", 0, 64), ("holdout", 64, 128)])],
            DataConfig(patch=16),
        )


def test_section_validation():
    img = np.zeros((8, 8))
    with pytest.raises(ValueError):
        SeismicSection(img + np.arange(8), np.zeros((8, 8)),
                       [("train", 0, 4), ("val", 3, 8)])  # overlap
    with pytest.raises(ValueError):
        SeismicSection(img, np.zeros((8, 8)), [("train", 0, 4), ("val", 5, 8)])  # gap
    with pytest.raises(ValueError):
        SeismicSection(img, np.full((8, 8), 0.5), [("train", 0, 8)])
    with pytest.raises(ShapeError):
        SeismicSection(img, np.zeros((8, 7)), [("train", 0, 8)])


def test_dataset_save_load_roundtrip(tmp_path):
    sec = band_section(64, 128)
    gen, _ = build_datasets([sec], DataConfig(patch=16))
    out = os.path.join(tmp_path, "gen")
    save_dataset(gen, out)
    back = load_dataset(out)
    assert back.counts() == gen.counts()
    assert back.manifest["patch"] == 16 and back.manifest["filter_lo"] == 0.1
    for split in gen.pairs:
        for a, b in zip(gen.pairs[split], back.pairs[split]):
            assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
            assert a.origin == b.origin


def test_dataset_rebuild_byte_identical(tmp_path):
    sec = band_section(64, 128)
    cfg = DataConfig(patch=16)
    dirs = []
    for name in ("a", "b"):
        gen, _ = build_datasets([band_section(64, 128)], cfg)
        out = os.path.join(tmp_path, name)
        save_dataset(gen, out)
        dirs.append(out)
    assert dataset_digest(dirs[0]) == dataset_digest(dirs[1])
    # and a changed pair changes the digest
    gen, _ = build_datasets([sec], cfg)
    gen.pairs["train"][0].x[0, 0] += 1.0
    out = os.path.join(tmp_path, "c")
    save_dataset(gen, out)
    assert dataset_digest(out) != dataset_digest(dirs[0])


def test_section_bundle_roundtrip(tmp_path):
    sec = band_section(32, 64, band=(10, 20), splits=[("train", 0, 32), ("val", 32, 48), ("test", 48, 64)])
    desc = save_section(sec, str(tmp_path), name="s")
    back = load_section(desc)
    assert np.array_equal(back.image, sec.image)
    assert np.array_equal(back.mask, sec.mask)
    assert back.splits == sec.splits
    hashes = source_hashes(desc)
    assert set(hashes) == {"s.json", "s_image.bin", "s_mask.bin"}


def test_section_velocity_descriptor(tmp_path):
    vel = np.array([[1000.0, 3000.0], [5000.0, 2000.0]])
    img = np.array([[0.1, 0.2], [0.3, 0.4]])
    save_array(os.path.join(tmp_path, "v.bin"), vel)
    save_array(os.path.join(tmp_path, "i.bin"), img)
    desc_path = os.path.join(tmp_path, "sec.json")
    with open(desc_path, "w") as fh:
        json.dump({"image": "i.bin", "velocity": "v.bin",
                   "splits": [["train", 0, 1], ["val", 1, 2]]}, fh)
    sec = load_section(desc_path, threshold=4000, clip_lo=1000, clip_hi=4600)
    assert np.array_equal(sec.mask, np.array([[0.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(ValueError, match="threshold"):
        load_section(desc_path)


def test_demo_section_properties():
    a = make_demo_section(64, 256, seed=4)
    b = make_demo_section(64, 256, seed=4)
    c = make_demo_section(64, 256, seed=5)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    assert not np.array_equal(a.image, c.image)
    assert set(np.unique(a.mask)) <= {0.0, 1.0}
    assert 0.1 < a.mask.mean() < 0.7
    assert np.all(np.isfinite(a.image))
    assert [s[0] for s in a.splits] == ["train", "val", "test"]


def test_demo_bundle_feeds_pipeline(tmp_path):
    desc = write_demo_bundle(str(tmp_path), seed=1)
    sec = load_section(desc)
    gen, seg = build_datasets([sec], DataConfig(patch=16))
    assert all(len(v) > 0 for v in gen.pairs.values())
    assert all(len(v) > 0 for v in seg.pairs.values())
