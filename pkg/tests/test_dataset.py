import itertools
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src.mitoclass.config import SyntheticConfig
from src.mitoclass.dataset import (
    PATCH_SIZE,
    ClassLabel,
    Dataset,
    HardnessLabel,
    PatchRecord,
    consensus_label,
    four_class_label,
    generate_synthetic,
    hardness_label,
    load_manifest,
    plan_synthetic,
    planted_count,
    summarize,
    write_manifest,
    write_truth,
)
from src.mitoclass.errors import (
    BadLabelCode,
    DuplicateId,
    ManifestError,
    MissingColumn,
    UnreadableImage,
)
from tests.conftest import DOMAIN_A, DOMAIN_B, make_record

# expert votes -> patch count; totals 10,191 NMF and 1,748 AMF, 1,639 of them Hard
COHORT = {(0, 0, 1): 1064, (0, 0, 0): 684, (1, 1, 0): 575, (1, 1, 1): 9616}


@pytest.mark.parametrize(
    "experts, consensus, hardness",
    [
        ((0, 0, 1), ClassLabel.AMF, HardnessLabel.HARD),
        ((1, 1, 1), ClassLabel.NMF, HardnessLabel.EASY),
        ((0, 0, 0), ClassLabel.AMF, HardnessLabel.EASY),
        ((1, 0, 1), ClassLabel.NMF, HardnessLabel.HARD),
    ],
)
def test_consensus_and_hardness(experts, consensus, hardness):
    assert consensus_label(*experts) == consensus
    assert hardness_label(*experts) == hardness


@pytest.mark.parametrize("experts", list(itertools.product([0, 1], repeat=3)))
@pytest.mark.parametrize("order", list(itertools.permutations(range(3))))
def test_labels_ignore_expert_order(experts, order):
    shuffled = tuple(experts[i] for i in order)
    assert consensus_label(*shuffled) == consensus_label(*experts)
    assert hardness_label(*shuffled) == hardness_label(*experts)
    assert consensus_label(*experts) == (ClassLabel.NMF if sum(experts) >= 2 else ClassLabel.AMF)
    assert (hardness_label(*experts) == HardnessLabel.EASY) == (len(set(experts)) == 1)


def test_hard_share_of_disagreement_rows():
    votes = [(0, 1, 1)] * 137 + [(1, 1, 1)] * 863
    hard = sum(hardness_label(*v) == HardnessLabel.HARD for v in votes)
    assert hard / len(votes) == 0.137


def test_four_class_codes():
    assert four_class_label(ClassLabel.AMF, HardnessLabel.HARD) == 0
    assert four_class_label(ClassLabel.AMF, HardnessLabel.EASY) == 1
    assert four_class_label(ClassLabel.NMF, HardnessLabel.HARD) == 2
    assert four_class_label(ClassLabel.NMF, HardnessLabel.EASY) == 3


def test_record_derives_labels():
    record = make_record("p1", (1, 0, 1))
    assert record.consensus == ClassLabel.NMF
    assert record.hardness == HardnessLabel.HARD
    assert record.four_class == 2


def test_duplicate_ids_rejected():
    with pytest.raises(DuplicateId):
        Dataset([make_record("a", (1, 1, 1)), make_record("a", (0, 0, 0))])


def test_subset_keeps_order():
    ds = Dataset([make_record(pid, (1, 1, 1)) for pid in ("c", "a", "b")])
    assert ds.subset(["b", "c"]).ids == ["c", "b"]


def test_manifest_roundtrip(tmp_path: Path, small_synthetic: Dataset):
    manifest = write_manifest(small_synthetic, tmp_path)
    assert load_manifest(manifest) == small_synthetic


def _write_one_row_manifest(tmp_path: Path, **overrides) -> Path:
    record = make_record("p1", (1, 1, 1))
    manifest = write_manifest(Dataset([record]), tmp_path)
    frame = pd.read_csv(manifest, dtype=str, keep_default_na=False)
    for column, value in overrides.items():
        frame[column] = value
    frame.to_csv(manifest, index=False)
    return manifest


def test_bad_label_code_names_row_and_column(tmp_path: Path):
    manifest = _write_one_row_manifest(tmp_path, expert2="2")
    with pytest.raises(BadLabelCode) as info:
        load_manifest(manifest)
    assert info.value.row == 1
    assert info.value.column == "expert2"
    assert "row 1" in str(info.value) and "expert2" in str(info.value)


def test_missing_column(tmp_path: Path):
    manifest = _write_one_row_manifest(tmp_path)
    frame = pd.read_csv(manifest, dtype=str).drop(columns=["scanner"])
    frame.to_csv(manifest, index=False)
    with pytest.raises(MissingColumn) as info:
        load_manifest(manifest)
    assert info.value.column == "scanner"


def test_duplicate_row_in_manifest(tmp_path: Path):
    manifest = _write_one_row_manifest(tmp_path)
    frame = pd.read_csv(manifest, dtype=str)
    pd.concat([frame, frame]).to_csv(manifest, index=False)
    with pytest.raises(DuplicateId) as info:
        load_manifest(manifest)
    assert info.value.row == 2


def test_unreadable_image(tmp_path: Path):
    manifest = _write_one_row_manifest(tmp_path, image_path="images/missing.png")
    with pytest.raises(UnreadableImage):
        load_manifest(manifest)


def test_missing_manifest(tmp_path: Path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nope.csv")


def test_planted_count_rounds_half_up():
    assert planted_count(2000, 0.1465) == 293
    assert planted_count(2000, 0.137) == 274
    assert planted_count(10, 0.25) == 3


def test_synthetic_counts_and_determinism():
    cfg = SyntheticConfig(n_patches=40, amf_rate=0.25, hard_rate=0.2, seed=7)
    first = generate_synthetic(cfg)
    assert first == generate_synthetic(cfg)
    assert first == generate_synthetic(cfg, workers=4)
    layout = plan_synthetic(cfg)
    assert int((layout.true_class == 0).sum()) == 10
    assert int(layout.planted_hard.sum()) == 8
    # one flipped expert never changes the majority
    assert np.array_equal(first.consensus(), layout.true_class)
    assert np.array_equal(first.hardness() == HardnessLabel.HARD, layout.planted_hard)


def test_synthetic_seed_changes_pixels():
    a = generate_synthetic(SyntheticConfig(n_patches=4, seed=1))
    b = generate_synthetic(SyntheticConfig(n_patches=4, seed=2))
    assert not np.array_equal(a[0].pixels, b[0].pixels)


def test_write_truth(tmp_path: Path):
    layout = plan_synthetic(SyntheticConfig(n_patches=5, seed=0))
    path = write_truth(layout, tmp_path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["patch_id", "true_class", "planted_hard"]
    assert frame["patch_id"].iloc[0] == "syn-000000"


def test_summarize_breakdown():
    records = [make_record(f"a{i}", (0, 0, 1)) for i in range(2)]
    records += [make_record("a-easy", (0, 0, 0))]
    records += [make_record(f"n{i}", (1, 1, 1), domain=DOMAIN_B) for i in range(5)]
    records += [make_record("n-hard", (1, 1, 0), domain=DOMAIN_B)]
    summary = summarize(Dataset(records))
    assert summary.n == 9
    assert summary.class_counts == {"AMF": 3, "NMF": 6}
    assert summary.hard_by_class == {"AMF": 2, "NMF": 1}
    assert summary.amf_fraction == pytest.approx(3 / 9)
    assert summary.species_share == {"canine": 6 / 9, "human": 3 / 9}


def test_planted_layout_mirrors_cohort_rates():
    cfg = SyntheticConfig(n_patches=2000, amf_rate=0.1465, hard_rate=0.137, seed=1)
    layout = plan_synthetic(cfg)
    assert int((layout.true_class == ClassLabel.AMF).sum()) == 293
    assert int(layout.planted_hard.sum()) == 274
    assert layout.planted_hard.mean() == 0.137


def _cohort_records(counts: dict[tuple[int, int, int], int]) -> list[PatchRecord]:
    pixels = np.zeros((PATCH_SIZE, PATCH_SIZE, 3), dtype=np.uint8)
    return [
        PatchRecord(
            patch_id=f"{''.join(map(str, experts))}-{i}",
            pixels=pixels,
            expert_labels=experts,  # type: ignore[arg-type]
            domain=DOMAIN_A,
        )
        for experts, count in counts.items()
        for i in range(count)
    ]


def test_summarize_cohort_breakdown():
    summary = summarize(Dataset(_cohort_records(COHORT)))
    assert summary.n == 11939
    assert summary.class_counts == {"AMF": 1748, "NMF": 10191}
    assert summary.hard_by_class == {"AMF": 1064, "NMF": 575}
    assert summary.hardness_counts == {"hard": 1639, "easy": 10300}
    assert summary.amf_fraction == pytest.approx(0.1465, abs=1e-4)
    assert summary.hard_fraction == pytest.approx(0.137, abs=1e-3)


def _cohort_manifest(tmp_path: Path, counts: dict[tuple[int, int, int], int]) -> Path:
    # every row points at one shared image
    seed_manifest = write_manifest(Dataset(_cohort_records({(1, 1, 1): 1})), tmp_path)
    template = pd.read_csv(seed_manifest, dtype=str, keep_default_na=False).iloc[0].to_dict()
    rows = []
    for experts, count in counts.items():
        for i in range(count):
            votes = {f"expert{j + 1}": str(v) for j, v in enumerate(experts)}
            rows.append({**template, **votes, "patch_id": f"{''.join(map(str, experts))}-{i}"})
    pd.DataFrame(rows, columns=list(template)).to_csv(seed_manifest, index=False)
    return seed_manifest


def _class_counts(manifest: Path) -> dict[str, int]:
    consensus = load_manifest(manifest).consensus()
    return {label.name: int((consensus == label).sum()) for label in ClassLabel}


def test_manifest_class_counts_small(tmp_path: Path):
    counts = {(0, 0, 1): 11, (0, 0, 0): 7, (1, 1, 0): 6, (1, 1, 1): 96}
    assert _class_counts(_cohort_manifest(tmp_path, counts)) == {"AMF": 18, "NMF": 102}


@pytest.mark.slow
def test_manifest_class_counts_full_cohort(tmp_path: Path):
    manifest = _cohort_manifest(tmp_path, COHORT)
    assert _class_counts(manifest) == {"AMF": 1748, "NMF": 10191}
