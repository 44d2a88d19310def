"""
Dataset: patch records, manifest I/O, consensus/hardness derivation and
planted-signal synthetic patches.

Label codes are fixed everywhere: AMF=0, NMF=1 and Hard=0, Easy=1.
Consensus and hardness are always recomputed from the three expert labels.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import IntEnum
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional, Sequence, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

from src.mitoclass.config import SyntheticConfig, validated
from src.mitoclass.errors import (
    BadLabelCode,
    DuplicateId,
    EmptyInput,
    ManifestError,
    MissingColumn,
    UnreadableImage,
)
from src.mitoclass.pixelpipe import STAIN_MATRIX
from src.mitoclass.rng import stream

logger = logging.getLogger(__name__)

PATCH_SIZE = 128
EXPERT_COLUMNS = ("expert1", "expert2", "expert3")
MANIFEST_COLUMNS = (
    "patch_id",
    "image_path",
    *EXPERT_COLUMNS,
    "tumor_type",
    "species",
    "scanner",
    "lab",
)
TRUTH_COLUMNS = ("patch_id", "true_class", "planted_hard")
SPECIES = ("human", "canine")


class ClassLabel(IntEnum):
    AMF = 0
    NMF = 1


class HardnessLabel(IntEnum):
    HARD = 0
    EASY = 1


@dataclass(frozen=True)
class DomainMeta:
    tumor_type: str
    species: str
    scanner: str
    lab: str

    @property
    def domain_id(self) -> str:
        key = "|".join((self.tumor_type, self.species, self.scanner, self.lab))
        return "d" + hashlib.blake2b(key.encode("utf-8"), digest_size=4).hexdigest()


def consensus_label(e1: int, e2: int, e3: int) -> ClassLabel:
    return ClassLabel.NMF if int(e1) + int(e2) + int(e3) >= 2 else ClassLabel.AMF


def hardness_label(e1: int, e2: int, e3: int) -> HardnessLabel:
    return HardnessLabel.EASY if int(e1) == int(e2) == int(e3) else HardnessLabel.HARD


def four_class_label(consensus: int, hardness: int) -> int:
    """AMF-Hard=0, AMF-Easy=1, NMF-Hard=2, NMF-Easy=3."""
    return 2 * int(consensus) + int(hardness)


@dataclass(frozen=True, eq=False)
class PatchRecord:
    patch_id: str
    pixels: np.ndarray
    expert_labels: tuple[ClassLabel, ClassLabel, ClassLabel]
    domain: DomainMeta
    image_path: Optional[str] = None
    consensus: ClassLabel = field(init=False)
    hardness: HardnessLabel = field(init=False)

    def __post_init__(self) -> None:
        if self.pixels.shape != (PATCH_SIZE, PATCH_SIZE, 3) or self.pixels.dtype != np.uint8:
            raise ValueError(
                f"patch {self.patch_id}: pixels must be {PATCH_SIZE}x{PATCH_SIZE}x3 uint8, "
                f"got {self.pixels.shape} {self.pixels.dtype}"
            )
        if len(self.expert_labels) != 3:
            raise ValueError(f"patch {self.patch_id}: exactly three expert labels required")
        experts = tuple(ClassLabel(int(e)) for e in self.expert_labels)
        object.__setattr__(self, "expert_labels", experts)
        object.__setattr__(self, "consensus", consensus_label(*experts))
        object.__setattr__(self, "hardness", hardness_label(*experts))

    @property
    def four_class(self) -> int:
        return four_class_label(self.consensus, self.hardness)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PatchRecord):
            return NotImplemented
        return (
            self.patch_id == other.patch_id
            and self.expert_labels == other.expert_labels
            and self.domain == other.domain
            and np.array_equal(self.pixels, other.pixels)
        )

    __hash__ = None  # type: ignore[assignment]


class Dataset:
    def __init__(self, records: Iterable[PatchRecord]):
        self._records = tuple(records)
        self._index: dict[str, int] = {}
        for i, record in enumerate(self._records):
            if record.patch_id in self._index:
                raise DuplicateId(f"duplicate patch_id '{record.patch_id}'", row=i + 1)
            self._index[record.patch_id] = i

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[PatchRecord]:
        return iter(self._records)

    def __getitem__(self, i: int) -> PatchRecord:
        return self._records[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self._records == other._records

    @property
    def ids(self) -> list[str]:
        return [r.patch_id for r in self._records]

    def by_id(self, patch_id: str) -> PatchRecord:
        return self._records[self._index[patch_id]]

    def position(self, patch_id: str) -> int:
        return self._index[patch_id]

    def subset(self, ids: Iterable[str]) -> "Dataset":
        wanted = set(ids)
        missing = wanted - self._index.keys()
        if missing:
            raise KeyError(f"unknown patch ids: {sorted(missing)[:5]}")
        return Dataset(r for r in self._records if r.patch_id in wanted)

    def consensus(self) -> np.ndarray:
        return np.array([int(r.consensus) for r in self._records], dtype=np.int64)

    def hardness(self) -> np.ndarray:
        return np.array([int(r.hardness) for r in self._records], dtype=np.int64)

    def experts(self) -> np.ndarray:
        return np.array([[int(e) for e in r.expert_labels] for r in self._records], dtype=np.int64)


def _parse_label(raw: str, row: int, column: str) -> ClassLabel:
    value = str(raw).strip()
    if value not in ("0", "1"):
        raise BadLabelCode(f"label code '{value}' not in {{0,1}}", row=row, column=column)
    return ClassLabel(int(value))


def _read_png(path: Path, row: int) -> np.ndarray:
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise UnreadableImage(
            f"cannot read image {path}: {e}", row=row, column="image_path"
        ) from None
    if pixels.shape != (PATCH_SIZE, PATCH_SIZE, 3):
        raise UnreadableImage(
            f"image {path} is {pixels.shape[1]}x{pixels.shape[0]}, "
            f"expected {PATCH_SIZE}x{PATCH_SIZE}",
            row=row,
            column="image_path",
        )
    return pixels


def load_manifest(path: Union[Path, str]) -> Dataset:
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise MissingColumn("manifest is empty", column="patch_id") from None

    for column in MANIFEST_COLUMNS:
        if column not in frame.columns:
            raise MissingColumn(f"manifest {path.name} lacks required column", column=column)

    root = path.parent
    seen: dict[str, int] = {}
    records = []
    for i, row in enumerate(frame.itertuples(index=False), start=1):
        values = row._asdict()
        patch_id = values["patch_id"].strip()
        if not patch_id:
            raise ManifestError("empty patch_id", row=i, column="patch_id")
        if patch_id in seen:
            raise DuplicateId(
                f"patch_id '{patch_id}' already used on row {seen[patch_id]}",
                row=i,
                column="patch_id",
            )
        seen[patch_id] = i
        experts = tuple(_parse_label(values[c], i, c) for c in EXPERT_COLUMNS)
        species = values["species"].strip()
        if species not in SPECIES:
            raise ManifestError(f"species '{species}' not in {SPECIES}", row=i, column="species")
        domain = DomainMeta(
            tumor_type=values["tumor_type"],
            species=species,
            scanner=values["scanner"],
            lab=values["lab"],
        )
        image_path = values["image_path"]
        records.append(
            PatchRecord(
                patch_id=patch_id,
                pixels=_read_png(root / image_path, i),
                expert_labels=experts,  # type: ignore[arg-type]
                domain=domain,
                image_path=image_path,
            )
        )

    logger.info("Loaded %d patches from %s", len(records), path)
    return Dataset(records)


def write_manifest(dataset: Dataset, out_dir: Union[Path, str]) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for record in dataset:
        image_path = record.image_path or f"images/{record.patch_id}.png"
        target = out_dir / image_path
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(record.pixels).save(target, format="PNG")
        rows.append(
            {
                "patch_id": record.patch_id,
                "image_path": image_path,
                **{c: int(e) for c, e in zip(EXPERT_COLUMNS, record.expert_labels)},
                "tumor_type": record.domain.tumor_type,
                "species": record.domain.species,
                "scanner": record.domain.scanner,
                "lab": record.domain.lab,
            }
        )
    manifest = out_dir / "manifest.csv"
    pd.DataFrame(rows, columns=list(MANIFEST_COLUMNS)).to_csv(
        manifest, index=False, lineterminator="\n", encoding="utf-8"
    )
    return manifest


@dataclass(frozen=True)
class DatasetSummary:
    n: int
    class_counts: dict[str, int]
    hardness_counts: dict[str, int]
    hard_by_class: dict[str, int]
    amf_fraction: float
    hard_fraction: float
    domain_share: dict[str, float]
    species_share: dict[str, float]
    scanner_share: dict[str, float]
    lab_share: dict[str, float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "class_counts": self.class_counts,
            "hardness_counts": self.hardness_counts,
            "hard_by_class": self.hard_by_class,
            "amf_fraction": self.amf_fraction,
            "hard_fraction": self.hard_fraction,
            "domain_share": self.domain_share,
            "species_share": self.species_share,
            "scanner_share": self.scanner_share,
            "lab_share": self.lab_share,
        }


def _shares(values: Sequence[str]) -> dict[str, float]:
    counts = Counter(values)
    return {k: counts[k] / len(values) for k in sorted(counts)}


def summarize(dataset: Dataset) -> DatasetSummary:
    if len(dataset) == 0:
        raise EmptyInput("cannot summarize an empty dataset")
    records = list(dataset)
    n = len(records)
    amf = sum(1 for r in records if r.consensus == ClassLabel.AMF)
    hard = sum(1 for r in records if r.hardness == HardnessLabel.HARD)
    return DatasetSummary(
        n=n,
        class_counts={"AMF": amf, "NMF": n - amf},
        hardness_counts={"hard": hard, "easy": n - hard},
        hard_by_class={
            label.name: sum(
                1 for r in records if r.consensus == label and r.hardness == HardnessLabel.HARD
            )
            for label in ClassLabel
        },
        amf_fraction=amf / n,
        hard_fraction=hard / n,
        domain_share=_shares([r.domain.domain_id for r in records]),
        species_share=_shares([r.domain.species for r in records]),
        scanner_share=_shares([r.domain.scanner for r in records]),
        lab_share=_shares([r.domain.lab for r in records]),
    )


# --- planted-signal synthesis ---------------------------------------------------

_TUMORS = (
    ("breast carcinoma", "human"),
    ("lung carcinoma", "canine"),
    ("lymphoma", "canine"),
    ("neuroendocrine tumor", "human"),
    ("cutaneous mast cell tumor", "canine"),
    ("melanoma", "human"),
    ("soft tissue sarcoma", "canine"),
)
_SCANNERS = ("Hamamatsu XR", "Aperio CS2", "3DHistech P1000", "Hamamatsu S360", "Leica GT450")
_LABS = ("lab-A", "lab-B", "lab-C", "lab-D")

_EASY_NOISE = 0.03
_BACKGROUND_EOSIN = 0.25
_NUCLEUS_HEMATOXYLIN = 1.1


def planted_count(n: int, rate: float) -> int:
    """round(n * rate), half up, on the decimal value of `rate`."""
    exact = Decimal(n) * Decimal(repr(float(rate)))
    return int(exact.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def synthetic_domain(index: int) -> DomainMeta:
    tumor, species = _TUMORS[index % len(_TUMORS)]
    return DomainMeta(
        tumor_type=tumor,
        species=species,
        scanner=_SCANNERS[index % len(_SCANNERS)],
        lab=_LABS[index % len(_LABS)],
    )


@dataclass(frozen=True)
class SyntheticLayout:
    true_class: np.ndarray
    planted_hard: np.ndarray
    domain_index: np.ndarray

    def truth_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "patch_id": [synthetic_id(i) for i in range(len(self.true_class))],
                "true_class": self.true_class.astype(int),
                "planted_hard": self.planted_hard.astype(int),
            },
            columns=list(TRUTH_COLUMNS),
        )


def synthetic_id(index: int) -> str:
    return f"syn-{index:06d}"


def plan_synthetic(cfg: SyntheticConfig) -> SyntheticLayout:
    cfg = validated(SyntheticConfig, cfg)
    n = cfg.n_patches
    layout_rng = stream(cfg.seed, "layout")
    true_class = np.full(n, int(ClassLabel.NMF), dtype=np.int64)
    true_class[layout_rng.permutation(n)[: planted_count(n, cfg.amf_rate)]] = int(ClassLabel.AMF)
    planted_hard = np.zeros(n, dtype=bool)
    planted_hard[layout_rng.permutation(n)[: planted_count(n, cfg.hard_rate)]] = True
    domain_index = np.arange(n, dtype=np.int64) % cfg.n_domains
    return SyntheticLayout(
        true_class=true_class, planted_hard=planted_hard, domain_index=domain_index
    )


def _domain_shift(seed: int, domain_index: int) -> tuple[float, np.ndarray]:
    rng = stream(seed, "domain", domain_index)
    brightness = rng.uniform(0.9, 1.1)
    gains = rng.uniform(0.93, 1.07, size=3)
    return float(brightness), gains


def _nucleus_mask(rng: np.random.Generator, amf: bool) -> np.ndarray:
    yy, xx = np.mgrid[0:PATCH_SIZE, 0:PATCH_SIZE].astype(np.float64)
    cy, cx = (PATCH_SIZE - 1) / 2 + rng.uniform(-6.0, 6.0, size=2)
    sigma = rng.uniform(4.5, 6.0)
    dist = rng.uniform(9.0, 13.0)
    phase = rng.uniform(0.0, 2 * math.pi)
    if amf:
        k = int(rng.integers(3, 6))
        angles = phase + 2 * math.pi * np.arange(k) / k + rng.uniform(-0.35, 0.35, size=k)
        radii = dist * rng.uniform(0.8, 1.2, size=k)
    else:
        angles = phase + np.array([0.0, math.pi])
        radii = np.array([dist, dist])
    mask = np.zeros((PATCH_SIZE, PATCH_SIZE))
    for angle, radius in zip(angles, radii):
        ly = cy + radius * math.sin(angle)
        lx = cx + radius * math.cos(angle)
        mask += np.exp(-((yy - ly) ** 2 + (xx - lx) ** 2) / (2 * sigma**2))
    return np.clip(mask, 0.0, 1.5)


def _background_eosin(rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:PATCH_SIZE, 0:PATCH_SIZE].astype(np.float64) / PATCH_SIZE
    field_ = np.zeros((PATCH_SIZE, PATCH_SIZE))
    for _ in range(4):
        fy, fx = rng.uniform(1.0, 4.0, size=2)
        py, px = rng.uniform(0.0, 2 * math.pi, size=2)
        field_ += np.sin(2 * math.pi * fy * yy + py) * np.cos(2 * math.pi * fx * xx + px)
    return _BACKGROUND_EOSIN + 0.015 * field_


def _synthesize_patch(cfg: SyntheticConfig, layout: SyntheticLayout, index: int) -> PatchRecord:
    rng = stream(cfg.seed, index)
    true = int(layout.true_class[index])
    hard = bool(layout.planted_hard[index])

    experts = [true, true, true]
    if hard:
        flipped = int(rng.integers(0, 3))
        experts[flipped] = 1 - true

    hematoxylin = _NUCLEUS_HEMATOXYLIN * _nucleus_mask(rng, amf=true == ClassLabel.AMF)
    eosin = _background_eosin(rng)
    stains = STAIN_MATRIX.rows
    od = hematoxylin[..., None] * stains[0] + eosin[..., None] * stains[1]
    noise = _EASY_NOISE * (2.0 if hard else 1.0)
    od = od + noise * rng.standard_normal((PATCH_SIZE, PATCH_SIZE, 3))

    domain_index = int(layout.domain_index[index])
    brightness, gains = _domain_shift(cfg.seed, domain_index)
    rgb = np.clip(np.power(10.0, -od) * brightness * gains, 0.0, 1.0)
    pixels = np.rint(rgb * 255.0).astype(np.uint8)

    return PatchRecord(
        patch_id=synthetic_id(index),
        pixels=pixels,
        expert_labels=tuple(ClassLabel(e) for e in experts),  # type: ignore[arg-type]
        domain=synthetic_domain(domain_index),
    )


def generate_synthetic(
    cfg: Union[SyntheticConfig, dict[str, Any]],
    workers: int = 1,
) -> Dataset:
    cfg = validated(SyntheticConfig, cfg)
    layout = plan_synthetic(cfg)
    indices = range(cfg.n_patches)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda i: _synthesize_patch(cfg, layout, i), indices))
    else:
        records = [_synthesize_patch(cfg, layout, i) for i in indices]
    logger.info(
        "Generated %d synthetic patches (%d AMF, %d hard)",
        cfg.n_patches,
        int((layout.true_class == ClassLabel.AMF).sum()),
        int(layout.planted_hard.sum()),
    )
    return Dataset(records)


def write_truth(layout: SyntheticLayout, out_dir: Union[Path, str]) -> Path:
    path = Path(out_dir) / "truth.csv"
    layout.truth_frame().to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    return path
