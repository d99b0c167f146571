"""Dataset construction: synthetic paired patches, patch extraction, splits, augmentation.

Synthetic samples stand in for knee radiograph patches. Each patch is a
smooth bone-like texture crossed by a dark horizontal band (the joint
space). KL-2 samples have the band narrowed to about half width and a
bright blob on its margin. A severity value in [0, 1] drives both cues, so
ambiguity mixing moves a sample continuously toward the other class.

Every random draw comes from a stream keyed by ``(seed, sample_id[, epoch])``,
so results do not depend on generation order or worker count.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .confidence import GRADES, grade_index, largest_remainder
from .errors import DataError, GeometryError
from .imaging import sample_bilinear

log = logging.getLogger(__name__)


@dataclass
class PatchPair:
    lateral: np.ndarray
    medial: np.ndarray


@dataclass
class SampleRecord:
    sample_id: str
    lateral: np.ndarray
    medial: np.ndarray
    grade: str
    meta: dict = field(default_factory=dict)

    @property
    def label(self):
        return GRADES.index(self.grade)


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list

    def check_disjoint(self):
        seen = {}
        for name in ("train", "val", "test"):
            for r in getattr(self, name):
                if r.sample_id in seen and seen[r.sample_id] != name:
                    raise DataError(f"{r.sample_id} appears in {seen[r.sample_id]} and {name}")
                seen[r.sample_id] = name


def _key(sample_id):
    return int.from_bytes(hashlib.sha256(sample_id.encode("utf-8")).digest()[:8], "little")


def keyed_rng(seed, sample_id, *extra):
    return np.random.default_rng([int(seed), _key(sample_id), *map(int, extra)])


# ------------------------------------------------------------------ patches

def extract_patches(joint_image, joint_box, patch_size=128):
    """Crop the lateral (left third) and medial (right third) patches of a joint box.

    ``joint_box`` is ``(x0, y0, width, height)`` in pixels. Both thirds are
    resampled bilinearly to ``patch_size`` squares; the medial patch is
    mirrored left-right.
    """
    img = np.asarray(joint_image, dtype=np.float64)
    if img.ndim != 2:
        raise GeometryError(f"joint image must be 2-D grayscale, got shape {img.shape}")
    x0, y0, w, h = (float(v) for v in joint_box)
    if w < 3 or h < 1:
        raise GeometryError(f"degenerate joint box {joint_box}")
    if x0 < 0 or y0 < 0 or x0 + w > img.shape[1] or y0 + h > img.shape[0]:
        raise GeometryError(f"joint box {joint_box} outside image of shape {img.shape}")
    third = w / 3.0
    lateral = sample_bilinear(img, x0, y0, third, h, patch_size, patch_size)
    medial = sample_bilinear(img, x0 + 2.0 * third, y0, third, h, patch_size, patch_size)
    return PatchPair(lateral=lateral, medial=np.fliplr(medial).copy())


# ---------------------------------------------------------------- generator

def _render_patch(rng, size, severity, base_width, narrowing):
    """Draw one patch; returns (image, signal_mask, band_width)."""
    width = base_width * (1.0 - severity * (1.0 - narrowing)) * rng.uniform(0.95, 1.05)
    center = size / 2.0 + rng.uniform(-size / 16.0, size / 16.0)
    tilt = rng.uniform(-0.05, 0.05)
    blob_x = rng.uniform(size / 4.0, 3.0 * size / 4.0)
    blob_side = 1 if rng.random() < 0.5 else -1
    coarse = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16.0)
    coarse /= coarse.std() + 1e-12
    fine = rng.standard_normal((size, size))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    band_center = center + tilt * (xx - size / 2.0)
    dist = np.abs(yy - band_center)
    # soft-edged band: 1 inside, 0 outside, ~1 px transition
    band = 1.0 / (1.0 + np.exp((dist - width / 2.0) / 0.7))
    img = 0.62 + 0.08 * coarse + 0.03 * fine
    img = img * (1.0 - band) + (0.18 + 0.03 * fine) * band

    radius = size / 12.0
    by = center + tilt * (blob_x - size / 2.0) + blob_side * (width / 2.0 + radius * 0.6)
    r2 = (yy - by) ** 2 + (xx - blob_x) ** 2
    img = img + 0.35 * severity * np.exp(-r2 / (2.0 * radius**2))

    mask = (dist <= width / 2.0 + 1.0) | ((r2 <= (2.0 * radius) ** 2) & (severity > 0))
    return np.clip(img, 0.0, 1.0), mask, width


def synth_sample(sample_id, grade, patch_size=64, ambiguity=0.0, label_noise=0.0, seed=0):
    """Generate one deterministic sample keyed by ``(seed, sample_id)``."""
    rng = keyed_rng(seed, sample_id)
    flipped = rng.random() < label_noise
    mixed = rng.random() < ambiguity
    t = rng.random() * min(1.0, 1.5 * ambiguity)
    t = t if mixed else 0.0
    k = grade_index(grade)
    severity = t if k == 0 else 1.0 - t
    narrowing = float(np.clip(rng.normal(0.5, 0.05), 0.35, 0.65))
    base_width = patch_size / 4.0 * rng.uniform(0.9, 1.1)
    lat, mask_lat, w_lat = _render_patch(rng, patch_size, severity, base_width, narrowing)
    med, mask_med, w_med = _render_patch(rng, patch_size, severity, base_width, narrowing)
    label = GRADES[1 - k] if flipped else GRADES[k]
    meta = {
        "band_width_px": 0.5 * (w_lat + w_med),
        "ambiguity_mixed": bool(mixed),
        "noise_flipped": bool(flipped),
        "severity": float(severity),
        "source_grade": GRADES[k],
        # the medial crop is mirrored, so is its mask
        "signal_mask": (mask_lat, np.fliplr(mask_med).copy()),
    }
    return SampleRecord(sample_id, lat, np.fliplr(med).copy(), label, meta)


def synth_dataset(n_kl0, n_kl2, patch_size=64, ambiguity=0.0, label_noise=0.0, seed=0):
    """Synthetic KL-0 / KL-2 patch pairs, ids ``kl0_00000``..., ``kl2_00000``...."""
    if n_kl0 < 0 or n_kl2 < 0:
        raise DataError("sample counts must be >= 0")
    if not (0.0 <= ambiguity <= 1.0 and 0.0 <= label_noise <= 1.0):
        raise DataError("ambiguity and label_noise must be in [0, 1]")
    out = []
    for grade, n in (("KL0", n_kl0), ("KL2", n_kl2)):
        for i in range(n):
            sid = f"{grade.lower()}_{i:05d}"
            out.append(synth_sample(sid, grade, patch_size, ambiguity, label_noise, seed))
    return out


# ------------------------------------------------------------------- splits

def split_dataset(records, ratio=(7, 1, 2), seed=0):
    """Stratified train/val/test split with largest-remainder sizes per grade."""
    by_grade = {g: [] for g in GRADES}
    for r in records:
        by_grade[r.grade].append(r)
    parts = {"train": [], "val": [], "test": []}
    for k, grade in enumerate(GRADES):
        members = sorted(by_grade[grade], key=lambda r: r.sample_id)
        if len(members) < 10:
            raise DataError(f"need >= 10 samples of {grade} to split, got {len(members)}")
        order = np.random.default_rng([int(seed), k]).permutation(len(members))
        sizes = largest_remainder(len(members), list(ratio))
        start = 0
        for name, n in zip(("train", "val", "test"), sizes):
            parts[name].extend(members[i] for i in order[start:start + n])
            start += n
    split = DatasetSplit(**parts)
    split.check_disjoint()
    return split


def oversample_minority(train, seed=0):
    """Bootstrap the minority grade up to the majority count.

    Duplicates share pixel arrays with their source and get ids
    ``<id>#bs<k>``.
    """
    by_grade = {g: [r for r in train if r.grade == g] for g in GRADES}
    if any(not v for v in by_grade.values()):
        raise DataError("oversampling needs both grades present")
    counts = {g: len(v) for g, v in by_grade.items()}
    minority = min(GRADES, key=lambda g: (counts[g], g))
    deficit = max(counts.values()) - counts[minority]
    if deficit == 0:
        return list(train)
    rng = np.random.default_rng([int(seed), 7919])
    pool = by_grade[minority]
    draws = rng.integers(0, len(pool), size=deficit)
    extra = [replace(pool[j], sample_id=f"{pool[j].sample_id}#bs{i}") for i, j in enumerate(draws)]
    return list(train) + extra


# ------------------------------------------------------------ augmentation

@dataclass
class AugmentConfig:
    brightness: float = 0.1  # offset ~ U(-b, b)
    rotation_deg: float = 10.0  # angle ~ U(-r, r)
    gamma_low: float = 0.8
    gamma_high: float = 1.25
    prob: float = 0.5  # each transform applied independently with this probability

    @classmethod
    def off(cls):
        return cls(brightness=0.0, rotation_deg=0.0, gamma_low=1.0, gamma_high=1.0)


def augment(record, epoch, seed, config: AugmentConfig | None = None):
    """Random rotation, gamma and brightness, one draw shared by both patches."""
    config = config or AugmentConfig()
    rng = keyed_rng(seed, record.sample_id, epoch)
    u_rot, u_gam, u_bri = rng.random(3)
    angle = rng.uniform(-config.rotation_deg, config.rotation_deg) if config.rotation_deg else 0.0
    gamma = rng.uniform(config.gamma_low, config.gamma_high)
    offset = rng.uniform(-config.brightness, config.brightness) if config.brightness else 0.0

    out = []
    for img in (record.lateral, record.medial):
        x = np.array(img, dtype=np.float64)
        if u_rot < config.prob and angle != 0.0:
            x = ndimage.rotate(x, angle, reshape=False, order=1, mode="nearest")
        if u_gam < config.prob and gamma != 1.0:
            x = np.power(np.clip(x, 0.0, 1.0), gamma)
        if u_bri < config.prob and offset != 0.0:
            x = x + offset
        out.append(np.clip(x, 0.0, 1.0))
    return PatchPair(lateral=out[0], medial=out[1])


def standardization(records):
    """Pixel mean and std over both patches of ``records``."""
    if not records:
        raise DataError("cannot standardize an empty set")
    stack = np.stack([np.stack([r.lateral, r.medial]) for r in records])
    std = float(stack.std())
    return float(stack.mean()), std if std > 0 else 1.0


def stack(records):
    """``(lateral [N,1,S,S], medial [N,1,S,S], labels [N], ids)``."""
    lat = np.stack([r.lateral for r in records])[:, None]
    med = np.stack([r.medial for r in records])[:, None]
    labels = np.array([r.label for r in records], dtype=np.intp)
    return lat, med, labels, [r.sample_id for r in records]


# ---------------------------------------------------------------------- I/O

MANIFEST_COLUMNS = ("sample_id", "lateral_path", "medial_path", "grade")
META_COLUMNS = ("sample_id", "band_width_px", "ambiguity_mixed", "noise_flipped")


def _to_png(img, path):
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG", optimize=False)


def write_dataset(records, out_dir):
    """Write ``manifest.csv``, ``meta.csv`` and 8-bit PNG patches."""
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fm, open(
        out / "meta.csv", "w", newline="", encoding="utf-8"
    ) as fmeta:
        wm = csv.writer(fm, lineterminator="\n")
        wmeta = csv.writer(fmeta, lineterminator="\n")
        wm.writerow(MANIFEST_COLUMNS)
        wmeta.writerow(META_COLUMNS)
        for r in records:
            lat = f"patches/{r.sample_id}_lateral.png"
            med = f"patches/{r.sample_id}_medial.png"
            _to_png(r.lateral, out / lat)
            _to_png(r.medial, out / med)
            wm.writerow([r.sample_id, lat, med, r.grade])
            if "band_width_px" in r.meta:
                wmeta.writerow([
                    r.sample_id,
                    f"{r.meta['band_width_px']:.6f}",
                    int(r.meta["ambiguity_mixed"]),
                    int(r.meta["noise_flipped"]),
                ])
    return out


def _read_png(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def read_dataset(data_dir):
    """Load records from a manifest directory (pixels scaled to [0, 1])."""
    root = Path(data_dir)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise DataError(f"no manifest.csv in {root}")
    meta = {}
    if (root / "meta.csv").is_file():
        with open(root / "meta.csv", newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                meta[row["sample_id"]] = {
                    "band_width_px": float(row["band_width_px"]),
                    "ambiguity_mixed": row["ambiguity_mixed"] in ("1", "True", "true"),
                    "noise_flipped": row["noise_flipped"] in ("1", "True", "true"),
                }
    records = []
    with open(manifest, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"manifest.csv missing columns {sorted(missing)}")
        for row in reader:
            grade = GRADES[grade_index(row["grade"])]
            lat = _read_png(root / row["lateral_path"])
            med = _read_png(root / row["medial_path"])
            if lat.shape != med.shape:
                raise DataError(f"{row['sample_id']}: patch shapes differ")
            records.append(SampleRecord(row["sample_id"], lat, med, grade, meta.get(row["sample_id"], {})))
    return records
