"""Dataset construction for patch-based training.

Sections (2-D seismic images with binary salt masks and labeled column
split ranges) are normalized per image, cut into overlapping square
patches, optionally filtered by salt fraction, augmented by horizontal
flipping, and persisted in a flat binary layout with a manifest that
suffices to rebuild the dataset byte-for-byte.

Two datasets come out of one set of sections:

* generative: dense 90%-overlap grids from the train and val splits,
  keeping only patches whose salt fraction lies in [0.1, 0.9];
* segmentation: sparse 10%-overlap grids from every split, unfiltered.

Grids never cross a split boundary; each split's columns are gridded
independently.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from flowseg.tensor import ShapeError, load_array, save_array

MANIFEST = "manifest.json"


@dataclass
class SeismicSection:
    """2-D image + binary mask + labeled column intervals."""

    image: np.ndarray
    mask: np.ndarray
    splits: list  # [(label, col_lo, col_hi), ...), half-open intervals
    section_id: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        self.mask = np.asarray(self.mask, dtype=float)
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise ShapeError(
                f"section: image {self.image.shape} and mask {self.mask.shape} "
                "must be equal 2-D shapes"
            )
        bad = (self.mask != 0.0) & (self.mask != 1.0)
        if bad.any():
            raise ValueError("section: mask must be binary")
        w = self.image.shape[1]
        intervals = sorted((lo, hi, label) for label, lo, hi in self.splits)
        cursor = 0
        for lo, hi, label in intervals:
            if lo != cursor or hi <= lo:
                raise ValueError(
                    f"section: split intervals must be disjoint and cover the "
                    f"width, got gap or overlap at column {lo} ({label})"
                )
            cursor = hi
        if cursor != w:
            raise ValueError(f"section: splits cover columns 0..{cursor}, image width is {w}")


@dataclass
class PatchPair:
    """One training example: image patch, mask patch, provenance."""

    x: np.ndarray
    y: np.ndarray
    origin: tuple  # (row, col, section_id, flipped)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.shape != self.y.shape or self.x.ndim != 2 or self.x.shape[0] != self.x.shape[1]:
            raise ShapeError(
                f"pair: x {self.x.shape} and y {self.y.shape} must be equal square 2-D shapes"
            )


@dataclass
class PatchDataset:
    """Pairs grouped by split plus the manifest that regenerates them."""

    pairs: dict  # split -> list[PatchPair]
    manifest: dict = field(default_factory=dict)

    def counts(self) -> dict:
        return {k: len(v) for k, v in self.pairs.items()}


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Center and scale by the image's own mean and population std."""
    img = np.asarray(img, dtype=float)
    std = img.std()
    if std == 0.0:
        raise ValueError("normalize: constant image has zero standard deviation")
    return (img - img.mean()) / std


def velocity_to_mask(vel: np.ndarray, threshold: float, clip_lo: float, clip_hi: float) -> np.ndarray:
    """Binary mask: 1 where the clipped velocity reaches the threshold."""
    if clip_lo >= clip_hi:
        raise ValueError(f"velocity_to_mask: empty clip range [{clip_lo}, {clip_hi}]")
    if not clip_lo <= threshold <= clip_hi:
        raise ValueError(
            f"velocity_to_mask: threshold {threshold} outside clip range [{clip_lo}, {clip_hi}]"
        )
    vel = np.asarray(vel, dtype=float)
    return (np.clip(vel, clip_lo, clip_hi) >= threshold).astype(float)


def grid_stride(patch: int, overlap_frac: float) -> int:
    if not 0.0 <= overlap_frac < 1.0:
        raise ValueError(f"grid: overlap fraction must be in [0, 1), got {overlap_frac}")
    return max(1, int(round(patch * (1.0 - overlap_frac))))


def grid_anchors(extent: int, patch: int, stride: int) -> list:
    """Anchor offsets 0, stride, 2*stride, ... plus a final far-edge anchor
    when the last regular step stops short of extent - patch."""
    if patch > extent:
        raise ValueError(f"grid: patch {patch} exceeds extent {extent}")
    last = extent - patch
    anchors = list(range(0, last + 1, stride))
    if anchors[-1] != last:
        anchors.append(last)
    return anchors


def extract_patch_grid(
    section: SeismicSection,
    patch: int,
    overlap_frac: float,
    col_range: tuple | None = None,
) -> list:
    """Cut the section (or one of its column intervals) into a regular grid
    of PatchPairs.  Stride is round(patch * (1 - overlap)), floored at 1."""
    stride = grid_stride(patch, overlap_frac)
    h, w = section.image.shape
    lo, hi = (0, w) if col_range is None else col_range
    rows = grid_anchors(h, patch, stride)
    cols = grid_anchors(hi - lo, patch, stride)
    out = []
    for r in rows:
        for c in cols:
            cc = lo + c
            out.append(
                PatchPair(
                    x=section.image[r : r + patch, cc : cc + patch].copy(),
                    y=section.mask[r : r + patch, cc : cc + patch].copy(),
                    origin=(r, cc, section.section_id, False),
                )
            )
    return out


def salt_fraction(y: np.ndarray) -> float:
    y = np.asarray(y, dtype=float)
    bad = (y != 0.0) & (y != 1.0)
    if bad.any():
        raise ValueError(f"salt_fraction: mask must be binary, found {y[bad].flat[0]!r}")
    return float(y.mean())


def filter_boundary_patches(pairs: list, lo: float = 0.1, hi: float = 0.9) -> list:
    """Keep pairs whose salt fraction lies in [lo, hi], bounds inclusive."""
    if lo >= hi:
        raise ValueError(f"filter: lo {lo} must be below hi {hi}")
    return [p for p in pairs if lo <= salt_fraction(p.y) <= hi]


def hflip_augment(pairs: list) -> list:
    """Originals followed by left-right mirrored copies (x and y both)."""
    flipped = [
        PatchPair(
            x=np.ascontiguousarray(p.x[:, ::-1]),
            y=np.ascontiguousarray(p.y[:, ::-1]),
            origin=(p.origin[0], p.origin[1], p.origin[2], True),
        )
        for p in pairs
    ]
    return list(pairs) + flipped


@dataclass
class DataConfig:
    patch: int = 16
    gen_overlap: float = 0.9
    seg_overlap: float = 0.1
    filter_lo: float = 0.1
    filter_hi: float = 0.9
    seed: int = 0


GEN_SPLITS = ("train", "val")
SEG_SPLITS = ("train", "val", "test")


def build_datasets(sections: list, config: DataConfig, normalize: bool = True) -> tuple:
    """Build (generative, segmentation) PatchDatasets.  Each section image
    is normalized by its own mean and population std first (recorded in the
    manifests); pass normalize=False for pre-normalized inputs.  Raises
    when a required split comes out empty."""
    norm_stats = {}
    gen_pairs = {s: [] for s in GEN_SPLITS}
    seg_pairs = {s: [] for s in SEG_SPLITS}
    for sec in sections:
        if normalize:
            stats = {"mean": float(sec.image.mean()), "std": float(sec.image.std())}
            norm_stats[str(sec.section_id)] = stats
            sec = SeismicSection(
                image=normalize_image(sec.image),
                mask=sec.mask,
                splits=sec.splits,
                section_id=sec.section_id,
            )
        for label, lo, hi in sec.splits:
            if label not in SEG_SPLITS:
                raise ValueError(f"build: unknown split label {label!r}")
            if label in GEN_SPLITS:
                grid = extract_patch_grid(sec, config.patch, config.gen_overlap, (lo, hi))
                kept = filter_boundary_patches(grid, config.filter_lo, config.filter_hi)
                gen_pairs[label] += hflip_augment(kept)
            seg_grid = extract_patch_grid(sec, config.patch, config.seg_overlap, (lo, hi))
            seg_pairs[label] += hflip_augment(seg_grid)
    for label in GEN_SPLITS:
        if not gen_pairs[label]:
            raise ValueError(f"build: generative split {label!r} is empty after filtering")
    for label in SEG_SPLITS:
        if not seg_pairs[label]:
            raise ValueError(f"build: segmentation split {label!r} is empty")

    def manifest(kind, overlap, filtered):
        m = {
            "kind": kind,
            "patch": config.patch,
            "overlap": overlap,
            "seed": config.seed,
            "normalization": norm_stats,
        }
        if filtered:
            m["filter_lo"] = config.filter_lo
            m["filter_hi"] = config.filter_hi
        return m

    gen = PatchDataset(gen_pairs, manifest("generative", config.gen_overlap, True))
    seg = PatchDataset(seg_pairs, manifest("segmentation", config.seg_overlap, False))
    return gen, seg


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_dataset(ds: PatchDataset, out_dir: str, extra_meta: dict | None = None) -> str:
    """Write pairs/<split>/<index>_{x,y}.bin plus manifest.json.  The
    write order and file contents are deterministic, so rebuilding the
    same dataset produces byte-identical output."""
    pairs_dir = os.path.join(out_dir, "pairs")
    manifest = dict(ds.manifest)
    if extra_meta:
        manifest.update(extra_meta)
    splits_meta = {}
    for split in sorted(ds.pairs):
        split_dir = os.path.join(pairs_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        origins = []
        for i, p in enumerate(ds.pairs[split]):
            save_array(os.path.join(split_dir, f"{i:05d}_x.bin"), p.x)
            save_array(os.path.join(split_dir, f"{i:05d}_y.bin"), p.y)
            r, c, sid, flipped = p.origin
            origins.append([int(r), int(c), int(sid), bool(flipped)])
        splits_meta[split] = {"count": len(ds.pairs[split]), "origins": origins}
    manifest["splits"] = splits_meta
    path = os.path.join(out_dir, MANIFEST)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)
    return out_dir


def load_dataset(out_dir: str) -> PatchDataset:
    with open(os.path.join(out_dir, MANIFEST)) as fh:
        manifest = json.load(fh)
    pairs = {}
    for split, meta in manifest.get("splits", {}).items():
        split_dir = os.path.join(out_dir, "pairs", split)
        items = []
        for i in range(meta["count"]):
            x = load_array(os.path.join(split_dir, f"{i:05d}_x.bin"))
            y = load_array(os.path.join(split_dir, f"{i:05d}_y.bin"))
            r, c, sid, flipped = meta["origins"][i]
            items.append(PatchPair(x=x, y=y, origin=(r, c, sid, bool(flipped))))
        pairs[split] = items
    manifest_rest = {k: v for k, v in manifest.items() if k != "splits"}
    manifest_rest["splits"] = manifest["splits"]
    return PatchDataset(pairs, manifest_rest)


def dataset_digest(out_dir: str) -> str:
    """sha256 over every file in the dataset directory, path-ordered."""
    h = hashlib.sha256()
    for root, dirs, files in os.walk(out_dir):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            h.update(os.path.relpath(full, out_dir).encode())
            with open(full, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def save_section(sec: SeismicSection, out_dir: str, name: str = "section") -> str:
    """Persist a section as two arrays plus a JSON descriptor; returns the
    descriptor path."""
    os.makedirs(out_dir, exist_ok=True)
    img_path = os.path.join(out_dir, f"{name}_image.bin")
    mask_path = os.path.join(out_dir, f"{name}_mask.bin")
    save_array(img_path, sec.image)
    save_array(mask_path, sec.mask)
    desc = {
        "image": os.path.basename(img_path),
        "mask": os.path.basename(mask_path),
        "splits": [[label, int(lo), int(hi)] for label, lo, hi in sec.splits],
        "section_id": int(sec.section_id),
    }
    desc_path = os.path.join(out_dir, f"{name}.json")
    with open(desc_path, "w") as fh:
        json.dump(desc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return desc_path


def load_section(desc_path: str, threshold: float | None = None,
                 clip_lo: float | None = None, clip_hi: float | None = None) -> SeismicSection:
    """Load a section descriptor.  The descriptor names either a mask
    array or a velocity array; a velocity needs threshold and clip bounds
    to derive the mask."""
    base = os.path.dirname(desc_path)
    with open(desc_path) as fh:
        desc = json.load(fh)
    image = load_array(os.path.join(base, desc["image"]))
    if "mask" in desc:
        mask = load_array(os.path.join(base, desc["mask"]))
    elif "velocity" in desc:
        if threshold is None or clip_lo is None or clip_hi is None:
            raise ValueError("load_section: velocity input needs threshold and clip bounds")
        vel = load_array(os.path.join(base, desc["velocity"]))
        mask = velocity_to_mask(vel, threshold, clip_lo, clip_hi)
    else:
        raise ValueError("load_section: descriptor names neither mask nor velocity")
    splits = [(label, lo, hi) for label, lo, hi in desc["splits"]]
    return SeismicSection(image=image, mask=mask, splits=splits,
                          section_id=desc.get("section_id", 0))


def source_hashes(desc_path: str) -> dict:
    """sha256 of the descriptor and the arrays it references."""
    base = os.path.dirname(desc_path)
    with open(desc_path, "rb") as fh:
        raw = fh.read()
    out = {os.path.basename(desc_path): _sha256_bytes(raw)}
    desc = json.loads(raw)
    for key in ("image", "mask", "velocity"):
        if key in desc:
            with open(os.path.join(base, desc[key]), "rb") as fh:
                out[desc[key]] = _sha256_bytes(fh.read())
    return out
