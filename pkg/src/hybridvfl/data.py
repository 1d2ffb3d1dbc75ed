"""Vertically partitioned datasets.

One table of sample ids, three owners: the image party holds pixels, the
tabular party holds clinical metadata, the server holds one-hot labels.

Synthetic data
--------------
Each sample has a label ``y``, an image pattern ``a`` (a bright or dark
blob at one of K positions) and a metadata record. A fraction
``1 - interaction_strength`` of samples are *readable*: ``a = y`` and the
record's lesion site and age point at ``y``. The remaining samples need both
views: ``a`` is either ``y`` or its pair partner, and the record's sex
says which (female: ``y = a``, male: ``y = partner(a)``), with site and
age drawn independently of ``y``. Their blob polarity is random, so the
pixels alone carry no linear signal for them.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

HAM_CLASSES = ("akiec", "bcc", "bkl", "df", "mel", "nv", "vasc")
HAM_LOCALIZATIONS = (
    "abdomen", "acral", "back", "chest", "ear", "face", "foot", "genital",
    "hand", "lower extremity", "neck", "scalp", "trunk", "unknown", "upper extremity",
)
METADATA_COLUMNS = ("image_id", "dx", "age", "sex", "localization")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


class DataConfigurationError(ValueError):
    pass


class IngestionError(ValueError):
    pass


# ----------------------------------------------------------------------------
# tabular preprocessing


@dataclass
class MetadataRecords:
    """Raw clinical columns; ``age`` uses NaN for missing."""

    age: np.ndarray
    sex: np.ndarray
    localization: np.ndarray

    def __len__(self) -> int:
        return len(self.age)

    def subset(self, idx) -> "MetadataRecords":
        return MetadataRecords(self.age[idx], self.sex[idx], self.localization[idx])


@dataclass
class TabularPreprocessor:
    """Age standardised with median imputation plus a missing flag; sex and site one-hot."""

    age_median: float
    age_mean: float
    age_std: float
    sex_vocab: tuple[str, ...]
    site_vocab: tuple[str, ...]

    @classmethod
    def fit(cls, rec: MetadataRecords) -> "TabularPreprocessor":
        observed = rec.age[~np.isnan(rec.age)]
        median = float(np.median(observed)) if observed.size else 0.0
        filled = np.where(np.isnan(rec.age), median, rec.age)
        std = float(filled.std()) if filled.size else 1.0
        return cls(
            age_median=median,
            age_mean=float(filled.mean()) if filled.size else 0.0,
            age_std=std if std > 0 else 1.0,
            sex_vocab=tuple(sorted(set(rec.sex.tolist()))),
            site_vocab=tuple(sorted(set(rec.localization.tolist()))),
        )

    @property
    def width(self) -> int:
        return 2 + len(self.sex_vocab) + len(self.site_vocab)

    @property
    def columns(self) -> list[str]:
        return ["age", "age_missing"] + [f"sex={s}" for s in self.sex_vocab] + [f"site={s}" for s in self.site_vocab]

    def transform(self, rec: MetadataRecords) -> np.ndarray:
        n = len(rec)
        out = np.zeros((n, self.width))
        missing = np.isnan(rec.age)
        out[:, 0] = (np.where(missing, self.age_median, rec.age) - self.age_mean) / self.age_std
        out[:, 1] = missing
        for j, s in enumerate(self.sex_vocab):
            out[:, 2 + j] = rec.sex == s
        base = 2 + len(self.sex_vocab)
        for j, s in enumerate(self.site_vocab):
            out[:, base + j] = rec.localization == s
        return out


# ----------------------------------------------------------------------------
# dataset and party views


@dataclass(frozen=True)
class ImageParty:
    ids: np.ndarray
    image_view: np.ndarray


@dataclass(frozen=True)
class TabularParty:
    ids: np.ndarray
    tabular_view: np.ndarray


@dataclass(frozen=True)
class LabelParty:
    ids: np.ndarray
    labels: np.ndarray


@dataclass
class VerticalDataset:
    ids: np.ndarray
    image_view: np.ndarray
    tabular_view: np.ndarray
    labels: np.ndarray
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: MetadataRecords | None = None
    preprocessor: TabularPreprocessor | None = None
    image_names: list[str] | None = None
    class_names: tuple[str, ...] = HAM_CLASSES

    def __post_init__(self) -> None:
        n = len(self.ids)
        if not (self.image_view.shape[0] == self.tabular_view.shape[0] == self.labels.shape[0] == n):
            raise DataConfigurationError("image, tabular and label views must have one row per id")
        if not self.splits:
            self.splits = {"train": np.arange(n), "val": np.arange(0), "test": np.arange(0)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def class_index(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(ids, image rows, tabular rows, label rows) of one split."""
        idx = self.splits[name]
        return self.ids[idx], self.image_view[idx], self.tabular_view[idx], self.labels[idx]

    def image_party(self) -> ImageParty:
        return ImageParty(self.ids.copy(), self.image_view)

    def tabular_party(self) -> TabularParty:
        return TabularParty(self.ids.copy(), self.tabular_view)

    def label_party(self) -> LabelParty:
        return LabelParty(self.ids.copy(), self.labels)


def one_hot(classes: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(classes), k))
    out[np.arange(len(classes)), classes] = 1.0
    return out


# ----------------------------------------------------------------------------
# splitting


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder counts: each within one of ``n * f``."""
    ideal = [n * f for f in fractions]
    counts = [math.floor(x) for x in ideal]
    order = sorted(range(len(fractions)), key=lambda i: (-(ideal[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(dataset: VerticalDataset, fractions: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0) -> VerticalDataset:
    """Stratified train/val/test split; tabular preprocessing is refitted on train."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataConfigurationError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    needed = sum(1 for f in fractions if f > 0)
    parts: list[list[int]] = [[], [], []]
    pooled: list[int] = []
    classes = dataset.class_index
    for k in range(dataset.num_classes):
        members = np.flatnonzero(classes == k)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        if members.size < needed:
            log.warning("class %d has %d samples for %d splits; splitting it without stratification", k, members.size, needed)
            pooled.extend(members.tolist())
            continue
        start = 0
        for i, c in enumerate(_allocate(members.size, fractions)):
            parts[i].extend(members[start:start + c].tolist())
            start += c
    if pooled:
        pooled_arr = rng.permutation(np.asarray(pooled))
        start = 0
        for i, c in enumerate(_allocate(pooled_arr.size, fractions)):
            parts[i].extend(pooled_arr[start:start + c].tolist())
            start += c
    splits = {name: np.sort(np.asarray(p, dtype=np.int64)) for name, p in zip(("train", "val", "test"), parts)}
    out = replace(dataset, splits=splits)
    if dataset.metadata is not None:
        prep = TabularPreprocessor.fit(dataset.metadata.subset(splits["train"]))
        out = replace(out, preprocessor=prep, tabular_view=prep.transform(dataset.metadata))
    return out


# ----------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 2000
    num_classes: int = 7
    image_size: int = 28
    interaction_strength: float = 0.5
    noise: float = 0.15
    seed: int = 0
    missing_age_rate: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 <= self.interaction_strength <= 1.0:
            raise DataConfigurationError("interaction_strength must lie in [0, 1]")
        if self.num_classes < 2 or self.num_classes > len(HAM_CLASSES):
            raise DataConfigurationError(f"num_classes must be in [2, {len(HAM_CLASSES)}]")
        if self.n < self.num_classes:
            raise DataConfigurationError(f"need at least one sample per class: n={self.n} < K={self.num_classes}")
        if self.noise < 0:
            raise DataConfigurationError("noise must be non-negative")
        if self.image_size % 4:
            raise DataConfigurationError("image_size must be divisible by 4")


def partner(k: int, num_classes: int) -> int:
    """Fixed-point-free class permutation: (0 1)(2 3)..., and for odd K the
    last three classes form a 3-cycle, so no class is its own partner."""
    if num_classes % 2 and k >= num_classes - 3:
        base = num_classes - 3
        return base + (k - base + 1) % 3
    return k ^ 1


def blob_templates(num_classes: int, size: int) -> np.ndarray:
    """One unit-peak Gaussian blob per class, centres spaced on a ring."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    radius = size * 0.3
    sigma = size / 11.0
    out = np.empty((num_classes, size, size))
    for k in range(num_classes):
        ang = 2 * math.pi * k / num_classes
        cy, cx = c + radius * math.sin(ang), c + radius * math.cos(ang)
        out[k] = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return out


def generate_synthetic(spec: SyntheticSpec) -> VerticalDataset:
    rng = np.random.default_rng(spec.seed)
    n, k, s = spec.n, spec.num_classes, spec.image_size
    y = rng.permutation(np.arange(n) % k)
    interacting = rng.random(n) < spec.interaction_strength

    pattern = y.copy()
    use_partner = rng.random(n) < 0.5
    for i in np.flatnonzero(interacting):
        if use_partner[i]:
            pattern[i] = partner(int(y[i]), k)
    # interacting samples get a random sign so the blob is not linearly readable
    polarity = np.where(interacting, rng.choice([-1.0, 1.0], size=n), 1.0)
    templates = blob_templates(k, s)
    amp = 0.4
    imgs = 0.5 + amp * polarity[:, None, None] * templates[pattern]
    imgs = np.repeat(imgs[:, None], 3, axis=1) + spec.noise * rng.standard_normal((n, 3, s, s))
    imgs = np.clip(imgs, 0.0, 1.0)

    usable_sites = [x for x in HAM_LOCALIZATIONS if x != "unknown"]
    sex = np.where(rng.random(n) < 0.5, "male", "female").astype(object)
    site = np.empty(n, dtype=object)
    age = np.empty(n)
    flip = rng.random(n) < spec.noise
    for i in range(n):
        if interacting[i]:
            # the site and age say nothing about y here; sex says whether the blob is y or its partner
            sex[i] = "male" if pattern[i] != y[i] else "female"
            site[i] = usable_sites[rng.integers(len(usable_sites))]
            age[i] = float(np.clip(round(rng.normal(50, 15)), 1, 90))
        else:
            site[i] = usable_sites[(2 * int(y[i]) + int(rng.integers(2))) % len(usable_sites)]
            if flip[i]:
                site[i] = usable_sites[rng.integers(len(usable_sites))]
            age[i] = float(np.clip(round(25 + 7 * y[i] + rng.normal(0, 2 + 10 * spec.noise)), 1, 90))
    age[rng.random(n) < spec.missing_age_rate] = np.nan

    meta = MetadataRecords(age, np.asarray(sex, dtype=str), np.asarray(site, dtype=str))
    prep = TabularPreprocessor.fit(meta)
    return VerticalDataset(
        ids=np.arange(n, dtype=np.int64),
        image_view=imgs,
        tabular_view=prep.transform(meta),
        labels=one_hot(y, k),
        metadata=meta,
        preprocessor=prep,
        image_names=[f"SYN_{i:07d}" for i in range(n)],
        class_names=HAM_CLASSES[:k],
    )


# ----------------------------------------------------------------------------
# HAM10000-style files


def _read_image(path: Path, size: int) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from None
    return arr.transpose(2, 0, 1)


def _find_image(image_dir: Path, image_id: str) -> Path:
    for ext in IMAGE_EXTENSIONS:
        p = image_dir / f"{image_id}{ext}"
        if p.exists():
            return p
    raise IngestionError(f"no image file for {image_id!r} in {image_dir} (tried {', '.join(IMAGE_EXTENSIONS)})")


def load_ham_style(
    metadata_path,
    image_dir,
    target_size: int = 28,
    fractions: Sequence[float] = (0.7, 0.15, 0.15),
    seed: int = 0,
) -> VerticalDataset:
    """Read a HAM10000-layout metadata CSV plus one image file per row."""
    metadata_path, image_dir = Path(metadata_path), Path(image_dir)
    with open(metadata_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in METADATA_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestionError(f"{metadata_path} lacks columns {missing}")
        rows = list(reader)
    cls_index = {name: i for i, name in enumerate(HAM_CLASSES)}
    for line, row in enumerate(rows, start=2):
        if row["dx"].strip() not in cls_index:
            raise IngestionError(f"unknown dx value {row['dx']!r} on line {line}: {row}")
    rows.sort(key=lambda r: r["image_id"])

    def parse_age(v: str) -> float:
        v = (v or "").strip()
        return float(v) if v and v.lower() not in ("nan", "na") else math.nan

    meta = MetadataRecords(
        np.array([parse_age(r["age"]) for r in rows], dtype=np.float64),
        np.array([(r["sex"] or "unknown").strip() for r in rows], dtype=str),
        np.array([(r["localization"] or "unknown").strip() for r in rows], dtype=str),
    )
    images = np.stack([_read_image(_find_image(image_dir, r["image_id"]), target_size) for r in rows]) if rows else np.zeros((0, 3, target_size, target_size))
    y = np.array([cls_index[r["dx"].strip()] for r in rows], dtype=np.int64)
    prep = TabularPreprocessor.fit(meta)
    ds = VerticalDataset(
        ids=np.arange(len(rows), dtype=np.int64),
        image_view=images,
        tabular_view=prep.transform(meta),
        labels=one_hot(y, len(HAM_CLASSES)),
        metadata=meta,
        preprocessor=prep,
        image_names=[r["image_id"] for r in rows],
    )
    return split(ds, fractions, seed)


def export_ham_style(dataset: VerticalDataset, out_dir) -> tuple[Path, Path]:
    """Write ``metadata.csv`` and 8-bit PNGs; returns (metadata path, image dir)."""
    from PIL import Image

    if dataset.metadata is None:
        raise DataConfigurationError("only datasets with raw metadata can be exported")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    names = dataset.image_names or [f"IMG_{int(i):07d}" for i in dataset.ids]
    meta_path = out_dir / "metadata.csv"
    with open(meta_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METADATA_COLUMNS)
        for r, name in enumerate(names):
            age = dataset.metadata.age[r]
            w.writerow([
                name,
                dataset.class_names[int(dataset.class_index[r])],
                "" if np.isnan(age) else f"{age:g}",
                dataset.metadata.sex[r],
                dataset.metadata.localization[r],
            ])
            pix = np.clip(np.rint(dataset.image_view[r].transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(pix, mode="RGB").save(img_dir / f"{name}.png")
    return meta_path, img_dir
