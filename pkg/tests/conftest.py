from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from src.mitoclass.config import ArchConfig, AugPolicy, SyntheticConfig, TrainConfig
from src.mitoclass.dataset import (
    PATCH_SIZE,
    ClassLabel,
    Dataset,
    DomainMeta,
    PatchRecord,
    generate_synthetic,
    write_manifest,
)

DOMAIN_A = DomainMeta(
    tumor_type="breast carcinoma", species="human", scanner="Aperio CS2", lab="lab-A"
)
DOMAIN_B = DomainMeta(tumor_type="lymphoma", species="canine", scanner="Leica GT450", lab="lab-B")


def make_record(
    patch_id: str,
    experts: tuple[int, int, int],
    domain: DomainMeta = DOMAIN_A,
    value: int = 200,
) -> PatchRecord:
    pixels = np.full((PATCH_SIZE, PATCH_SIZE, 3), value, dtype=np.uint8)
    pixels[40:80, 50:70] = (90, 60, 140)
    return PatchRecord(
        patch_id=patch_id,
        pixels=pixels,
        expert_labels=tuple(ClassLabel(e) for e in experts),  # type: ignore[arg-type]
        domain=domain,
    )


@pytest.fixture
def small_synthetic() -> Dataset:
    return generate_synthetic(SyntheticConfig(n_patches=24, amf_rate=0.25, hard_rate=0.25, seed=5))


@pytest.fixture
def manifest_dir(tmp_path: Path, small_synthetic: Dataset) -> Path:
    write_manifest(small_synthetic, tmp_path / "data")
    return tmp_path / "data"


@pytest.fixture
def tiny_arch() -> ArchConfig:
    return ArchConfig(conv_channels=(4, 4, 4), feature_dim=8, shared_dim=8)


@pytest.fixture
def tiny_policy() -> AugPolicy:
    return AugPolicy(resize_to=16)


@pytest.fixture
def tiny_train() -> TrainConfig:
    return TrainConfig(max_epochs=2, batch_size=8, patience=5, seed=3)
