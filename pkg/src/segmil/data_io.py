"""Interchange format, dataset manifests, fold splits, and the synthetic generator.

One slide = one directory holding ``manifest.json`` (slide id, label, shapes,
segment assignments, areas, optional coords) and ``features.bin`` (row-major,
little-endian IEEE-754 float32, exactly ``N * D_in`` values, no header).
A dataset is a directory of slide directories plus a ``dataset.json`` manifest
(and a CSV mirror of it).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .bag_model import UNSEGMENTED, SlideBag, make_bag, validate_bag

SLIDE_MANIFEST = "manifest.json"
FEATURES_BIN = "features.bin"
DATASET_MANIFEST = "dataset.json"
DATASET_CSV = "dataset.csv"
TRUTH_SIDECAR = "truth.json"


class DataFormatError(ValueError):
    """Malformed or inconsistent on-disk data."""


@dataclass(frozen=True)
class SlideEntry:
    slide_id: str
    path: str
    label: int
    fold: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Slide listing for one dataset."""

    name: str
    class_count: int
    feature_dim: int
    slides: tuple[SlideEntry, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "slides", tuple(self.slides))
        ids = [s.slide_id for s in self.slides]
        if len(set(ids)) != len(ids):
            raise DataFormatError("duplicate slide_id in dataset manifest")
        for s in self.slides:
            if not (0 <= s.label < self.class_count):
                raise DataFormatError(
                    f"slide {s.slide_id!r} label {s.label} outside 0..{self.class_count - 1}"
                )

    def slide_ids(self) -> list[str]:
        return [s.slide_id for s in self.slides]

    def entry(self, slide_id: str) -> SlideEntry:
        for s in self.slides:
            if s.slide_id == slide_id:
                return s
        raise KeyError(slide_id)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic dataset generator.

    The generator is the package's verification oracle: positive slides hold
    a tiny fraction of "tumor" instances among heavily redundant benign
    categories, mimicking the instance imbalance the masking scheme targets.
    """

    n_slides: int
    instances_per_slide: tuple[int, int]
    feature_dim: int
    n_categories: int
    positive_slide_fraction: float
    tumor_instance_fraction: float
    redundancy_skew: float
    noise_sigma: float
    seed: int
    name: str = "synthetic"

    def __post_init__(self) -> None:
        if self.n_slides < 1:
            raise ValueError("n_slides must be >= 1")
        lo, hi = self.instances_per_slide
        if lo < 1 or lo > hi:
            raise ValueError("instances_per_slide must satisfy 1 <= min <= max")
        if not 0.0 < self.positive_slide_fraction < 1.0:
            raise ValueError("positive_slide_fraction must lie in (0, 1)")
        if not 0.0 < self.tumor_instance_fraction < 1.0:
            raise ValueError("tumor_instance_fraction must lie in (0, 1)")
        if self.redundancy_skew < 1.0:
            raise ValueError("redundancy_skew must be >= 1")
        if self.noise_sigma <= 0.0:
            raise ValueError("noise_sigma must be > 0")
        if self.n_categories < 1:
            raise ValueError("need at least one benign category")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["instances_per_slide"] = tuple(d["instances_per_slide"])
        return cls(**d)


def write_slide(bag: SlideBag, out_dir: str | Path, force: bool = False) -> None:
    """Write one slide directory (manifest.json + features.bin).

    Refuses to overwrite an existing slide directory unless ``force``.
    """
    problems = validate_bag(bag)
    if problems:
        raise DataFormatError(f"refusing to write invalid bag: {problems[0]}")
    out = Path(out_dir)
    manifest_path = out / SLIDE_MANIFEST
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{out} already holds a slide; pass force=True to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "slide_id": bag.slide_id,
        "label": int(bag.label),
        "N": bag.n_instances,
        "D_in": bag.feature_dim,
        "segment_areas": {str(k): float(v) for k, v in bag.segment_areas.items()},
        "segment_of": [int(s) for s in bag.segment_of],
        "coords": None if bag.coords is None else [[int(x), int(y)] for x, y in bag.coords],
    }
    features = np.ascontiguousarray(bag.features, dtype="<f4")
    (out / FEATURES_BIN).write_bytes(features.tobytes())
    manifest_path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def read_slide(slide_dir: str | Path) -> SlideBag:
    """Read one slide directory back into a validated SlideBag."""
    slide_dir = Path(slide_dir)
    manifest_path = slide_dir / SLIDE_MANIFEST
    if not manifest_path.is_file():
        raise DataFormatError(f"missing {SLIDE_MANIFEST} in {slide_dir}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"malformed {manifest_path}: {exc}") from exc
    try:
        n = int(manifest["N"])
        d_in = int(manifest["D_in"])
        slide_id = str(manifest["slide_id"])
        label = int(manifest["label"])
        segment_of = manifest["segment_of"]
        segment_areas = {int(k): float(v) for k, v in manifest["segment_areas"].items()}
        coords = manifest.get("coords")
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"bad manifest field in {manifest_path}: {exc}") from exc
    raw = (slide_dir / FEATURES_BIN).read_bytes()
    expected = 4 * n * d_in
    if len(raw) != expected:
        raise DataFormatError(
            f"length mismatch in {slide_dir / FEATURES_BIN}: "
            f"expected {expected} bytes (4*{n}*{d_in}), found {len(raw)}"
        )
    features = np.frombuffer(raw, dtype="<f4").reshape(n, d_in) if n > 0 else np.empty((0, d_in))
    bag = SlideBag(
        slide_id=slide_id,
        label=label,
        features=features,
        segment_of=np.asarray(segment_of, dtype=np.int64),
        segment_areas=segment_areas,
        coords=None if coords is None else np.asarray(coords, dtype=np.int64),
    )
    problems = validate_bag(bag)
    if problems:
        raise DataFormatError(f"slide {slide_id!r} failed validation: " + "; ".join(problems))
    return bag


def write_dataset_manifest(manifest: DatasetManifest, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "name": manifest.name,
        "class_count": manifest.class_count,
        "feature_dim": manifest.feature_dim,
        "slides": [
            {"slide_id": s.slide_id, "path": s.path, "label": s.label, "fold": s.fold}
            for s in manifest.slides
        ],
    }
    (out / DATASET_MANIFEST).write_text(json.dumps(payload, indent=1), encoding="utf-8")
    with (out / DATASET_CSV).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "path", "label", "fold"])
        for s in manifest.slides:
            writer.writerow([s.slide_id, s.path, s.label, "" if s.fold is None else s.fold])


def read_dataset_manifest(dataset_dir: str | Path) -> DatasetManifest:
    path = Path(dataset_dir) / DATASET_MANIFEST
    if not path.is_file():
        raise DataFormatError(f"missing {DATASET_MANIFEST} in {dataset_dir}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        return DatasetManifest(
            name=str(payload["name"]),
            class_count=int(payload["class_count"]),
            feature_dim=int(payload["feature_dim"]),
            slides=tuple(
                SlideEntry(
                    slide_id=str(s["slide_id"]),
                    path=str(s["path"]),
                    label=int(s["label"]),
                    fold=s.get("fold"),
                )
                for s in payload["slides"]
            ),
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"malformed dataset manifest {path}: {exc}") from exc


def read_slide_by_id(manifest: DatasetManifest, dataset_dir: str | Path, slide_id: str) -> SlideBag:
    entry = manifest.entry(slide_id)
    return read_slide(Path(dataset_dir) / entry.path)


def make_folds(manifest: DatasetManifest, k: int, seed: int) -> list[set[str]]:
    """Split slide ids into k stratified folds.

    Folds partition the slides, overall sizes differ by at most one, and for
    each label the per-fold counts differ by at most one.  Deterministic for
    a given seed.
    """
    n = len(manifest.slides)
    if k < 2 or k > n:
        raise ValueError(f"k must satisfy 2 <= k <= {n}, got {k}")
    gen = rng.stream(seed, "folds", manifest.name)
    folds: list[set[str]] = [set() for _ in range(k)]
    position = 0
    for label in sorted({s.label for s in manifest.slides}):
        ids = sorted(s.slide_id for s in manifest.slides if s.label == label)
        order = gen.permutation(len(ids))
        for idx in order:
            folds[position % k].add(ids[idx])
            position += 1
    return folds


def _draw_prototypes(
    gen: np.random.Generator, count: int, dim: int, avoid: list[np.ndarray] | None = None
) -> np.ndarray:
    """Unit-norm prototypes with pairwise angle >= 30 degrees, rejection-sampled.

    ``avoid`` lists extra vectors the new prototypes must also keep at
    >= 30 degrees (used to keep benign prototypes away from the tumor one).
    """
    max_dot = math.cos(math.radians(30.0))
    fixed = list(avoid) if avoid else []
    protos: list[np.ndarray] = []
    attempts = 0
    while len(protos) < count:
        v = gen.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ p)) <= max_dot for p in fixed + protos):
            protos.append(v)
        attempts += 1
        if attempts > 10000 * count:
            raise ValueError(
                f"could not place {count} prototypes at >=30 degrees in dimension {dim}"
            )
    return np.stack(protos)


def _category_weights(n_categories: int, skew: float) -> np.ndarray:
    w = skew ** -np.arange(n_categories, dtype=np.float64)
    return w / w.sum()


def generate_synthetic_dataset(
    spec: SynthSpec, out_dir: str | Path, force: bool = False
) -> DatasetManifest:
    """Generate a labeled synthetic dataset in the interchange format.

    Per slide: benign category prototypes are drawn fresh; instances are
    assigned to benign categories with a skewed distribution (category 0
    dominates); positive slides additionally hold
    ``ceil(tumor_instance_fraction * N)`` instances of the dedicated tumor
    category, whose prototype is shared across the dataset (tumor morphology
    is the one consistent signal; benign tissue varies slide to slide);
    every instance feature is its category prototype plus Gaussian noise.
    Segment ids equal category ids and segment areas are proportional to
    category instance counts.  Ground-truth instance labels go to a
    ``truth.json`` sidecar that the training path never reads.
    """
    out = Path(out_dir)
    if (out / DATASET_MANIFEST).exists() and not force:
        raise FileExistsError(f"{out} already holds a dataset; pass force=True to overwrite")
    out.mkdir(parents=True, exist_ok=True)

    n_pos = int(math.floor(spec.positive_slide_fraction * spec.n_slides + 0.5))
    label_order = rng.stream(spec.seed, "labels").permutation(spec.n_slides)
    labels = np.zeros(spec.n_slides, dtype=np.int64)
    labels[label_order[:n_pos]] = 1

    tumor_category = spec.n_categories  # benign ids 0..n_categories-1
    tumor_proto = _draw_prototypes(
        rng.stream(spec.seed, "tumor-prototype"), 1, spec.feature_dim
    )[0]
    weights = _category_weights(spec.n_categories, spec.redundancy_skew)
    entries: list[SlideEntry] = []
    lo, hi = spec.instances_per_slide
    for i in range(spec.n_slides):
        slide_id = f"slide_{i:04d}"
        gen = rng.stream(spec.seed, "slide", slide_id)
        n = int(gen.integers(lo, hi + 1))
        label = int(labels[i])
        n_tumor = int(math.ceil(spec.tumor_instance_fraction * n)) if label == 1 else 0
        benign = _draw_prototypes(gen, spec.n_categories, spec.feature_dim, avoid=[tumor_proto])
        protos = np.vstack([benign, tumor_proto])
        categories = np.concatenate(
            [
                np.full(n_tumor, tumor_category, dtype=np.int64),
                gen.choice(spec.n_categories, size=n - n_tumor, p=weights),
            ]
        )
        gen.shuffle(categories)
        features = protos[categories] + spec.noise_sigma * gen.standard_normal(
            (n, spec.feature_dim)
        )
        present, counts = np.unique(categories, return_counts=True)
        areas = {int(c): float(cnt) for c, cnt in zip(present, counts)}
        side = int(math.ceil(math.sqrt(n)))
        coords = np.stack([np.arange(n) % side, np.arange(n) // side], axis=1) * 512
        bag = make_bag(
            slide_id=slide_id,
            label=label,
            features=features.astype(np.float32),
            segment_of=categories,
            segment_areas=areas,
            coords=coords,
        )
        slide_dir = out / slide_id
        write_slide(bag, slide_dir, force=force)
        truth = {
            "slide_id": slide_id,
            "tumor_category": tumor_category,
            "instance_is_tumor": [int(c == tumor_category) for c in categories],
        }
        (slide_dir / TRUTH_SIDECAR).write_text(json.dumps(truth), encoding="utf-8")
        entries.append(SlideEntry(slide_id=slide_id, path=slide_id, label=label))

    manifest = DatasetManifest(
        name=spec.name,
        class_count=2,
        feature_dim=spec.feature_dim,
        slides=tuple(entries),
    )
    write_dataset_manifest(manifest, out)
    return manifest
