"""Shared fixtures and synthetic-data builders."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from abconformer.core import ChainArrays, ChainRole, Config
from abconformer.data import ComplexRecord

torch.set_num_threads(1)

AA = "ACDEFGHIKLMNPQRSTVWY"


@pytest.fixture
def tiny_config() -> Config:
    return Config(
        d_model=8,
        dim_ff=16,
        n_heads=2,
        conv_kernel=3,
        n_blocks=2,
        min_bw=1.0,
        max_bw=4.0,
        scale=3.0,
        sliding_step=2,
    )


def random_sequence(rng: np.random.Generator, length: int) -> str:
    return "".join(AA[i] for i in rng.integers(0, len(AA), size=length))


def random_mask(rng: np.random.Generator, m: int, n: int, ensure_full_rows_cols: bool = True) -> np.ndarray:
    """Random 0/1 pairwise mask; optionally guarantees no empty row or column."""
    while True:
        mask = (rng.random((m, n)) < 0.7).astype(np.int64)
        if not ensure_full_rows_cols:
            return mask
        if mask.sum(axis=1).min() > 0 and mask.sum(axis=0).min() > 0:
            return mask


def planted_record(rng: np.random.Generator, rid: str, lengths: dict[ChainRole, int],
                   in_width: int) -> tuple[ComplexRecord, dict[ChainRole, ChainArrays]]:
    """A synthetic complex whose interface labels are contiguous blocks."""
    seqs: dict[ChainRole, str | None] = {}
    labels: dict[ChainRole, np.ndarray | None] = {}
    arrays: dict[ChainRole, ChainArrays] = {}
    for role in ChainRole:
        n = lengths[role]
        seqs[role] = random_sequence(rng, n)
        lab = np.zeros(n, dtype=np.int64)
        start = int(rng.integers(0, max(1, n - 3)))
        lab[start : start + 3] = 1
        labels[role] = lab
        emb = rng.standard_normal((n, in_width))
        arrays[role] = ChainArrays(emb, lab)
    record = ComplexRecord(rid, seqs, labels)
    return record, arrays


def write_embedding_files(arrays_by_id, out_dir: Path) -> None:
    from abconformer.encoding import write_matrix

    for rid, arrays in arrays_by_id.items():
        for role, chain in arrays.items():
            if chain.length:
                write_matrix(out_dir / f"{rid}.{role.value}.emb", chain.emb)
