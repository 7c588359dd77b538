"""Full three-branch model assembly, per-residue scoring, antibody-specific
and antibody-agnostic prediction, and attention-map export."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .conformer import Block, init_affine, mask_rows
from .core import (
    ANTIBODY_ROLES,
    Batch,
    ChainArrays,
    ChainRole,
    Config,
    DataError,
    NumericsError,
    pad_batch,
)
from .data import ComplexRecord, encode_record
from .encoding import write_matrix
from .sliding import AttentionMaps, StepMaps

_PAIR_LABEL = {ChainRole.ABH: "H", ChainRole.ABL: "L"}


class ABConformer(nn.Module):
    """Stacked three-branch network with one input projection shared by all
    chains of the configured encoder width, and a 2-class head per role."""

    def __init__(self, config: Config, in_width: int):
        super().__init__()
        config.validate()
        if in_width < 1:
            raise DataError("input width must be >= 1", module="model")
        self.config = config
        self.in_width = in_width
        self.input_proj = nn.Linear(in_width, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_blocks))
        self.heads = nn.ModuleDict(
            {role.value: nn.Linear(config.d_model, 2) for role in ChainRole}
        )
        init_affine(self.input_proj)
        init_affine(self.heads)

    def forward(
        self, batch: Batch, record_maps: bool = False
    ) -> tuple[dict[ChainRole, Tensor], dict[ChainRole, AttentionMaps | None] | None]:
        """Project, run all blocks, score; returns per-role logits and the
        final block's sliding maps when requested."""
        if batch.in_width != self.in_width:
            raise DataError(
                f"batch width {batch.in_width} != model input width {self.in_width}",
                module="model",
            )
        x: dict[ChainRole, Tensor] = {}
        for role in ChainRole:
            h = mask_rows(batch.emb[role], batch.mask[role])
            h = self.input_proj(h)
            x[role] = mask_rows(h, batch.mask[role])
        ag, ab_h, ab_l = x[ChainRole.AG], x[ChainRole.ABH], x[ChainRole.ABL]
        mask_ag = batch.mask[ChainRole.AG]
        mask_h = batch.mask[ChainRole.ABH]
        mask_l = batch.mask[ChainRole.ABL]

        maps: dict[ChainRole, AttentionMaps | None] | None = None
        last = len(self.blocks) - 1
        for index, block in enumerate(self.blocks):
            record = record_maps and index == last
            ag, ab_h, ab_l, block_maps = block(
                ag, ab_h, ab_l, mask_ag, mask_h, mask_l, record_maps=record
            )
            for name, tensor in (("ag", ag), ("abh", ab_h), ("abl", ab_l)):
                if not torch.isfinite(tensor).all():
                    raise NumericsError(
                        f"non-finite activation in block {index} ({name} branch)",
                        module="model",
                    )
            if record:
                maps = block_maps
        logits = {
            ChainRole.AG: self.heads[ChainRole.AG.value](ag),
            ChainRole.ABH: self.heads[ChainRole.ABH.value](ab_h),
            ChainRole.ABL: self.heads[ChainRole.ABL.value](ab_l),
        }
        return logits, maps


def flat_parameters(model: nn.Module) -> list[tuple[str, nn.Parameter]]:
    """Stable flat addressing of every learnable tensor, in registration order."""
    return list(model.named_parameters())


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for _, p in flat_parameters(model))


@dataclass
class Prediction:
    """Per-residue interface probabilities and thresholded calls for one sample.

    Roles with no valid positions are absent from all dictionaries; maps is
    None when no sliding ran (antibody-agnostic mode).
    """

    id: str
    probs: dict[ChainRole, np.ndarray]
    calls: dict[ChainRole, np.ndarray]
    thresholds: dict[ChainRole, float]
    maps: dict[ChainRole, AttentionMaps] | None = None
    map_files: dict[str, str] | None = None


def _crop_maps(
    maps: dict[ChainRole, AttentionMaps | None],
    index: int,
    m_valid: int,
    n_valid: dict[ChainRole, int],
) -> dict[ChainRole, AttentionMaps] | None:
    """Extract one sample's maps from a batched history, dropping padding."""
    out: dict[ChainRole, AttentionMaps] = {}
    for role, history in maps.items():
        if history is None:
            continue
        n = n_valid[role]
        if n == 0:
            continue
        steps = [
            StepMaps(
                A=s.A[index, :m_valid, :n].clone(),
                S=s.S[index, :m_valid, :n].clone(),
                W_hat=s.W_hat[index, :m_valid, :n].clone(),
                W_tilde=s.W_tilde[index, :m_valid, :n].clone(),
                P=s.P[index, :m_valid].clone(),
            )
            for s in history.steps
        ]
        out[role] = AttentionMaps(
            p0=history.p0[index, :m_valid].clone(),
            bandwidth=history.bandwidth[index].clone(),
            steps=steps,
        )
    return out or None


def predict_batch(
    model: ABConformer,
    batch: Batch,
    thresholds: dict[ChainRole, float],
    record_maps: bool = True,
) -> list[Prediction]:
    """Run inference on a padded batch and threshold the class-1 probabilities.

    Probabilities are computed in 64-bit so the two class probabilities of a
    residue sum to 1 at full precision.
    """
    model.eval()
    with torch.no_grad():
        logits, maps = model(batch.to(next(model.parameters()).dtype), record_maps=record_maps)
    predictions = []
    for i, sample_id in enumerate(batch.ids):
        probs: dict[ChainRole, np.ndarray] = {}
        calls: dict[ChainRole, np.ndarray] = {}
        used: dict[ChainRole, float] = {}
        valid: dict[ChainRole, int] = {}
        for role in ChainRole:
            n = int(batch.mask[role][i].sum())
            valid[role] = n
            if n == 0:
                continue
            if role not in thresholds:
                continue
            p = torch.softmax(logits[role][i, :n].double(), dim=-1)[:, 1].numpy()
            probs[role] = p
            used[role] = float(thresholds[role])
            calls[role] = (p >= thresholds[role]).astype(np.int64)
        sample_maps = None
        if maps is not None:
            sample_maps = _crop_maps(maps, i, valid[ChainRole.AG], valid)
        predictions.append(Prediction(sample_id, probs, calls, used, sample_maps))
    return predictions


def predict(
    record: ComplexRecord,
    model: ABConformer,
    config: Config,
    encoder: str = "external",
    window: int = 15,
    thresholds: dict[ChainRole, float] | None = None,
) -> Prediction:
    """Antibody-specific prediction for one complex; all three chains required."""
    for role in ChainRole:
        if not record.has(role):
            raise DataError(
                f"record {record.id}: chain {role.value} is absent; "
                "duplicate antibody chains or use antibody-agnostic prediction",
                module="model",
            )
    if thresholds is None:
        thresholds = {role: config.threshold(role) for role in ChainRole}
    arrays = encode_record(record, encoder, window)
    batch = pad_batch([arrays], [record.id], dtype=next(model.parameters()).dtype)
    return predict_batch(model, batch, thresholds)[0]


def predict_pan_epitope(
    record: ComplexRecord,
    model: ABConformer,
    config: Config,
    encoder: str = "external",
    window: int = 15,
    threshold: float | None = None,
) -> Prediction:
    """Antibody-agnostic epitope prediction from the antigen chain alone.

    Equivalent to a forward pass with both antibody embeddings zeroed out,
    which reduces the antigen path to the plain Conformer stack; antibody
    outputs are suppressed.
    """
    if not record.has(ChainRole.AG):
        raise DataError(f"record {record.id}: antigen chain is absent", module="model")
    if threshold is None:
        threshold = config.threshold_pan
    arrays = encode_record(record, encoder, window)
    for role in ANTIBODY_ROLES:
        arrays[role] = ChainArrays.absent()
    batch = pad_batch([arrays], [record.id], dtype=next(model.parameters()).dtype)
    return predict_batch(model, batch, {ChainRole.AG: threshold})[0]


def export_attention(prediction: Prediction, out_dir: str | Path) -> dict[str, Path]:
    """Write the final-step row-normalized attention of the final block, one
    matrix file per antibody pairing, cropped to valid lengths."""
    if not prediction.maps:
        raise DataError("no sliding maps in agnostic mode", module="model")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    for role in ANTIBODY_ROLES:
        history = prediction.maps.get(role)
        if history is None:
            continue
        step = len(history.steps)
        label = _PAIR_LABEL[role]
        path = out_dir / f"{prediction.id}.{label}.step{step}.wmat"
        write_matrix(path, history.final.W_hat.double().numpy())
        written[label] = path
    return written


def prediction_to_json(prediction: Prediction) -> dict:
    out: dict = {
        "id": prediction.id,
        "prob": {role.value: [float(v) for v in p] for role, p in prediction.probs.items()},
        "call": {role.value: [int(v) for v in c] for role, c in prediction.calls.items()},
        "thresholds": {role.value: float(t) for role, t in prediction.thresholds.items()},
    }
    if prediction.map_files:
        out["maps"] = dict(prediction.map_files)
    return out


def write_prediction(prediction: Prediction, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{prediction.id}.json"
    path.write_text(json.dumps(prediction_to_json(prediction), sort_keys=True) + "\n")
    return path


def load_prediction(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"prediction file not found: {path}", module="model")
    return json.loads(path.read_text())
