"""Dataset manifests, label schemes, stratified splits and a synthetic fundus-like corpus."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test", "unassigned")

# Grade counts of the public corpora; keys are normalized dataset names.
KNOWN_NUM_GRADES = {
    "eyepacs": 5,
    "subsetofeyepacs": 5,
    "eyepacssubset": 5,
    "aptos": 5,
    "aptos2019": 5,
    "messidor": 4,
    "messidori": 4,
    "messidor1": 4,
    "fundus": 7,
    "fundusimages": 7,
}

MANIFEST_HEADER = ("id", "image_path", "grade")


class ManifestError(ValueError):
    """Raised for unreadable or invalid manifests."""


class SplitError(ValueError):
    """Raised when a split cannot be produced as requested."""


def _normalize_name(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


def registered_num_grades(dataset_name: str) -> int | None:
    return KNOWN_NUM_GRADES.get(_normalize_name(dataset_name))


@dataclass(frozen=True)
class Sample:
    id: str
    image_path: str
    grade: int
    split: str = "unassigned"
    label: int | None = None

    @property
    def target(self) -> int:
        """Mapped label when a scheme was applied, otherwise the raw grade."""
        return self.grade if self.label is None else self.label


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    samples: tuple[Sample, ...]
    num_grades: int
    root: Path = field(default_factory=Path)
    scheme: "LabelScheme | None" = None

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "root", Path(self.root))
        if self.num_grades < 1:
            raise ManifestError(f"num_grades must be positive, got {self.num_grades}")
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ManifestError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if not 0 <= s.grade < self.num_grades:
                raise ManifestError(
                    f"sample {s.id!r}: grade {s.grade} outside [0, {self.num_grades})"
                )
        expected = registered_num_grades(self.name)
        if expected is not None and expected != self.num_grades:
            raise ManifestError(
                f"dataset {self.name!r} is registered with {expected} grades, got {self.num_grades}"
            )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}

    def resolve(self, sample: Sample) -> Path:
        return self.root / sample.image_path

    def labels(self) -> dict[str, int]:
        return {s.id: s.target for s in self.samples}

    @property
    def num_classes(self) -> int:
        return self.scheme.num_classes if self.scheme is not None else self.num_grades


def _check_relative(path: str, row: int) -> None:
    p = Path(path)
    if not path or p.is_absolute() or ".." in p.parts:
        raise ManifestError(f"row {row}: image_path {path!r} must be relative to the manifest root")


def load_manifest(path, dataset_name: str, num_grades: int | None = None) -> DatasetManifest:
    """Read a ``id,image_path,grade`` CSV manifest.

    ``num_grades`` may be omitted for registered datasets. Row numbers in errors count
    the header as row 1.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    registered = registered_num_grades(dataset_name)
    if num_grades is None:
        if registered is None:
            raise ManifestError(f"num_grades required for unregistered dataset {dataset_name!r}")
        num_grades = registered

    samples = []
    seen: dict[str, int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"row 1: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"row {row_no}: expected 3 fields, got {len(row)}")
            sid, image_path, grade_text = (c.strip() for c in row)
            if not sid:
                raise ManifestError(f"row {row_no}: empty id")
            if sid in seen:
                raise ManifestError(f"row {row_no}: duplicate id {sid!r} (first seen on row {seen[sid]})")
            _check_relative(image_path, row_no)
            try:
                grade = int(grade_text)
            except ValueError:
                raise ManifestError(f"row {row_no}: grade {grade_text!r} is not an integer") from None
            if not 0 <= grade < num_grades:
                raise ManifestError(f"row {row_no}: grade {grade} outside [0, {num_grades})")
            seen[sid] = row_no
            samples.append(Sample(sid, image_path, grade))
    return DatasetManifest(dataset_name, tuple(samples), num_grades, root=path.parent)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for s in manifest.samples:
            writer.writerow((s.id, s.image_path, s.grade))
    return path


@dataclass(frozen=True)
class LabelScheme:
    kind: str
    num_classes: int
    positive_threshold: int = 1

    @classmethod
    def binary(cls, positive_threshold: int = 1) -> "LabelScheme":
        return cls("binary", 2, positive_threshold)

    @classmethod
    def multiclass(cls, num_grades: int) -> "LabelScheme":
        return cls("multiclass", num_grades)

    def validate(self, num_grades: int) -> None:
        if self.kind == "binary":
            if self.num_classes != 2:
                raise ValueError("binary scheme must have 2 classes")
            if not 1 <= self.positive_threshold < num_grades:
                raise ValueError(
                    f"positive_threshold {self.positive_threshold} outside [1, {num_grades})"
                )
        elif self.kind == "multiclass":
            if self.num_classes != num_grades:
                raise ValueError(f"multiclass scheme needs {num_grades} classes, got {self.num_classes}")
        else:
            raise ValueError(f"unknown label scheme kind {self.kind!r}")

    def map_grade(self, grade: int) -> int:
        if self.kind == "binary":
            return int(grade >= self.positive_threshold)
        return int(grade)


def apply_label_scheme(manifest: DatasetManifest, scheme: LabelScheme) -> DatasetManifest:
    scheme.validate(manifest.num_grades)
    samples = tuple(replace(s, label=scheme.map_grade(s.grade)) for s in manifest.samples)
    return replace(manifest, samples=samples, scheme=scheme)


@dataclass(frozen=True)
class SplitSpec:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("train_ids", "val_ids", "test_ids"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        tr, va, te = set(self.train_ids), set(self.val_ids), set(self.test_ids)
        if tr & va or tr & te or va & te:
            raise SplitError("train/val/test id sets overlap")
        if not 0 < self.fraction <= 1:
            raise SplitError(f"fraction must lie in (0, 1], got {self.fraction}")

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "fraction": self.fraction,
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "test_ids": list(self.test_ids),
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        doc = json.loads(text)
        return cls(doc["train_ids"], doc["val_ids"], doc["test_ids"], doc["fraction"], doc["seed"])

    def assign(self, manifest: DatasetManifest) -> DatasetManifest:
        """Return ``manifest`` with each sample's ``split`` field set."""
        membership = {i: "train" for i in self.train_ids}
        membership.update({i: "val" for i in self.val_ids})
        membership.update({i: "test" for i in self.test_ids})
        samples = tuple(replace(s, split=membership.get(s.id, "unassigned")) for s in manifest.samples)
        return replace(manifest, samples=samples)


def _group_by_class(ids: Iterable[str], labels: Mapping[str, int]) -> dict[int, list[str]]:
    groups: dict[int, list[str]] = {}
    for i in ids:
        groups.setdefault(labels[i], []).append(i)
    return dict(sorted(groups.items()))


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [r * n for r in ratios]
    counts = [int(np.floor(q + 1e-12)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda k: (-(quotas[k] - counts[k]), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    return counts


def stratified_split(
    manifest: DatasetManifest,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitSpec:
    """Split ids into train/val/test keeping per-class proportions.

    Classes are the mapped labels when a scheme was applied, else the grades.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise SplitError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1, got {sum(ratios)}")

    rng = np.random.default_rng(seed)
    parts: list[set[str]] = [set(), set(), set()]
    for cls, members in _group_by_class(manifest.ids, manifest.labels()).items():
        if len(members) < len(ratios):
            raise SplitError(
                f"class {cls} has {len(members)} samples, fewer than the {len(ratios)} split parts"
            )
        shuffled = [members[k] for k in rng.permutation(len(members))]
        start = 0
        for part, count in zip(parts, _largest_remainder(len(members), ratios)):
            part.update(shuffled[start : start + count])
            start += count

    order = manifest.ids
    train, val, test = ([i for i in order if i in p] for p in parts)
    return SplitSpec(train, val, test, fraction=1.0, seed=seed)


def _stratified_order(members_by_class: dict[int, list[str]], total: int) -> list[str]:
    """Interleave classes so that every prefix is stratified.

    A prefix of length ``m`` serves every fraction ``f`` with ``round(f * total) == m``;
    class ``c`` must then hold between ``(m + 1/2) p_c - 1`` and ``(m - 1/2) p_c + 1``
    items, ``p_c`` being its share. Items are scheduled earliest-deadline-first against
    those bounds, all in integer arithmetic.
    """
    sizes = {c: len(m) for c, m in members_by_class.items()}
    taken = dict.fromkeys(sizes, 0)
    two_n = 2 * total

    def upper(c, m):  # floor(((2m - 1) n_c + 2N) / 2N)
        return ((2 * m - 1) * sizes[c] + two_n) // two_n

    def deadline(c):
        # first prefix length whose lower bound exceeds the current count
        t = taken[c]
        return (two_n * (t + 1) - sizes[c]) // (2 * sizes[c]) + 1

    order = []
    for m in range(1, total + 1):
        eligible = [c for c in sizes if taken[c] < sizes[c] and taken[c] + 1 <= upper(c, m)]
        if not eligible:
            eligible = [c for c in sizes if taken[c] < sizes[c]]
        best = min(eligible, key=lambda c: (deadline(c), -sizes[c], c))
        order.append(members_by_class[best][taken[best]])
        taken[best] += 1
    return order


def subset_by_fraction(
    split: SplitSpec,
    fraction: float,
    manifest: DatasetManifest,
    seed: int | None = None,
) -> SplitSpec:
    """Keep ``round(fraction * |train|)`` training ids, stratified by class.

    Subsets are nested: for a fixed seed a smaller fraction always selects a prefix of
    the same per-seed ordering, so it is contained in every larger one.
    """
    if not 0 < fraction <= 1:
        raise SplitError(f"fraction must lie in (0, 1], got {fraction}")
    seed = split.seed if seed is None else seed
    train = list(split.train_ids)
    keep = int(np.floor(fraction * len(train) + 0.5))
    if fraction == 1.0:
        return replace(split, fraction=1.0, seed=seed)

    labels = manifest.labels()
    rng = np.random.default_rng(seed)
    groups = _group_by_class(train, labels)
    groups = {c: [m[k] for k in rng.permutation(len(m))] for c, m in groups.items()}
    chosen = set(_stratified_order(groups, len(train))[:keep])

    counts = {c: sum(i in chosen for i in m) for c, m in groups.items()}
    empty = [c for c, n in counts.items() if n == 0]
    if empty:
        raise SplitError(f"fraction {fraction} leaves no training samples for classes {empty}")
    return replace(split, train_ids=tuple(i for i in train if i in chosen), fraction=fraction, seed=seed)


def load_image(sample: Sample, root=None) -> np.ndarray:
    """Decode an image as an H x W x 3 float32 array in [0, 1]."""
    path = Path(sample.image_path) if root is None else Path(root) / sample.image_path
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


# --- synthetic corpus -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Controls for the desk-scale stand-in corpus.

    Class 0 images carry no lesions; class ``c > 0`` carries between ``3c`` and
    ``3c + 1`` bright blobs whose radius also grows with ``c``.
    ``illumination_jitter`` scales the per-image disc brightness by a factor drawn from
    ``[1 - j, 1 + j]``; at 0 the pixel sum alone separates the classes.
    """

    num_classes: int = 2
    images_per_class: int = 50
    image_size: int = 64
    seed: int = 0
    noise: float = 0.02
    illumination_jitter: float = 0.0


def _blob_count(cls: int, rng: np.random.Generator) -> int:
    return 0 if cls == 0 else 3 * cls + int(rng.integers(0, 2))


def _render_fundus(cls: int, size: int, spec: SyntheticSpec, rng: np.random.Generator):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    c = size / 2
    disc_r = 0.45 * size
    rr = np.hypot(yy - c, xx - c)
    disc = rr <= disc_r

    gain = 1.0 + rng.uniform(-spec.illumination_jitter, spec.illumination_jitter)
    # fundus-like orange disc darkening toward the rim
    shade = np.clip(1.0 - 0.35 * (rr / disc_r) ** 2, 0, 1) * gain
    img = np.zeros((size, size, 3))
    for ch, base in enumerate((0.55, 0.25, 0.10)):
        img[..., ch] = np.where(disc, base * shade, 0.0)

    blobs = []
    radius = max(1.5, size / 32) * (1 + 0.25 * (cls - 1)) if cls > 0 else 0.0
    for _ in range(_blob_count(cls, rng)):
        # keep blobs fully inside the disc and away from each other
        for _attempt in range(100):
            ang = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(0, disc_r - radius - 2)
            by, bx = c + dist * np.sin(ang), c + dist * np.cos(ang)
            if all(np.hypot(by - oy, bx - ox) > 2 * radius + 2 for oy, ox, _ in blobs):
                break
        blobs.append((by, bx, radius))
        mask = np.hypot(yy - by, xx - bx) <= radius
        img[mask] = (0.95, 0.9, 0.55)

    img[disc] += rng.normal(0, spec.noise, size=(int(disc.sum()), 3))
    return np.clip(img, 0, 1), blobs


def generate_synthetic_corpus(out_dir, spec: SyntheticSpec = SyntheticSpec()) -> DatasetManifest:
    """Write PNG images, ``manifest.csv`` and ``blobs.json`` under ``out_dir``.

    ``blobs.json`` maps sample ids to ``[row, col, radius]`` triples for localization checks.
    """
    if spec.image_size < 32:
        raise ValueError(f"image_size must be at least 32, got {spec.image_size}")
    if spec.num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {spec.num_classes}")
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    root_seq = np.random.SeedSequence(spec.seed)
    samples, geometry = [], {}
    for cls, cls_seq in enumerate(root_seq.spawn(spec.num_classes)):
        for k, img_seq in enumerate(cls_seq.spawn(spec.images_per_class)):
            rng = np.random.default_rng(img_seq)
            img, blobs = _render_fundus(cls, spec.image_size, spec, rng)
            sid = f"c{cls}_{k:04d}"
            rel = f"images/{sid}.png"
            Image.fromarray(np.round(img * 255).astype(np.uint8), mode="RGB").save(out_dir / rel)
            samples.append(Sample(sid, rel, cls))
            geometry[sid] = [[round(v, 4) for v in b] for b in blobs]

    manifest = DatasetManifest("synthetic", tuple(samples), spec.num_classes, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    (out_dir / "blobs.json").write_text(json.dumps(geometry, indent=1, sort_keys=True))
    return manifest


def load_blob_geometry(corpus_dir) -> dict[str, list[tuple[float, float, float]]]:
    doc = json.loads((Path(corpus_dir) / "blobs.json").read_text())
    return {k: [tuple(b) for b in v] for k, v in doc.items()}
