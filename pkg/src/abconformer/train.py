"""Masked cross-entropy objective, AdamW with decoupled weight decay, gradient
clipping, weight averaging, checkpoints, the training loop, and a
finite-difference gradient-check harness."""

from __future__ import annotations

import csv
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import metrics as metrics_mod
from .core import Batch, ChainArrays, ChainRole, Config, DataError, NumericsError, pad_batch
from .data import ComplexRecord, encode_record, resolve_antibody_chains
from .model import ABConformer, flat_parameters, parameter_count, predict_batch

log = logging.getLogger(__name__)

ADAM_EPS = 1e-8


def masked_ce(logits: Tensor, labels: Tensor, mask: Tensor) -> Tensor:
    """Mean cross-entropy over valid positions; padded positions contribute
    exactly zero and an all-masked chain yields a zero loss."""
    if logits.shape[:-1] != labels.shape or labels.shape != mask.shape:
        raise DataError("loss shape mismatch", module="train")
    m = mask.to(logits.dtype)
    total = m.sum()
    if total.item() == 0:
        return logits.sum() * 0.0
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, labels.clamp(0, 1).unsqueeze(-1)).squeeze(-1)
    return (nll * m).sum() / total


def total_loss(loss_h: Tensor, loss_l: Tensor, loss_ag: Tensor) -> Tensor:
    """Arithmetic mean of the three per-chain losses."""
    combined = (loss_h + loss_l + loss_ag) / 3.0
    if not torch.isfinite(combined):
        raise NumericsError("non-finite training loss", module="train")
    return combined


def compute_loss(
    model: ABConformer, batch: Batch
) -> tuple[Tensor, dict[ChainRole, Tensor]]:
    logits, _ = model(batch, record_maps=False)
    per_role = {
        role: masked_ce(logits[role], batch.labels[role], batch.mask[role])
        for role in ChainRole
    }
    combined = total_loss(
        per_role[ChainRole.ABH], per_role[ChainRole.ABL], per_role[ChainRole.AG]
    )
    return combined, per_role


def backward(model: ABConformer, batch: Batch) -> list[Tensor]:
    """Gradient of the total loss for every parameter, in flat-index order.

    Parameters detached from the loss (skipped branches on agnostic batches)
    get exact zero gradients.
    """
    loss, _ = compute_loss(model, batch)
    named = flat_parameters(model)
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    out = []
    for (name, param), grad in zip(named, grads):
        if grad is None:
            grad = torch.zeros_like(param)
        elif not torch.isfinite(grad).all():
            raise NumericsError(f"non-finite gradient for parameter '{name}'", module="train")
        out.append(grad)
    return out


def clip_gradients(grads: list[Tensor], max_norm: float = 1.0) -> tuple[list[Tensor], float]:
    """Scale all gradients so the global L2 norm does not exceed max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        factor = max_norm / total
        grads = [g * factor for g in grads]
    return grads, total


@dataclass
class OptimState:
    """Adaptive-moment accumulators plus the averaged shadow weights."""

    step: int
    m: list[Tensor]
    v: list[Tensor]
    ema: list[Tensor]
    lr: float
    beta1: float
    beta2: float
    weight_decay: float
    clip_norm: float
    ema_decay: float

    @classmethod
    def from_model(cls, model: ABConformer, config: Config) -> "OptimState":
        params = [p for _, p in flat_parameters(model)]
        return cls(
            step=0,
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
            ema=[p.detach().clone() for p in params],
            lr=config.learning_rate,
            beta1=config.beta1,
            beta2=config.beta2,
            weight_decay=config.weight_decay,
            clip_norm=config.clip_norm,
            ema_decay=config.ema_decay,
        )


def adamw_step(params: list[Tensor], grads: list[Tensor], state: OptimState) -> None:
    """One decoupled-weight-decay adaptive update with bias correction."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            p.mul_(1.0 - state.lr * state.weight_decay)
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / bc2).sqrt_().add_(ADAM_EPS)
            p.addcdiv_(m / bc1, denom, value=-state.lr)


def ema_update(state: OptimState, params: list[Tensor], decay: float | None = None) -> None:
    """shadow <- decay * shadow + (1 - decay) * params, per parameter."""
    if decay is None:
        decay = state.ema_decay
    with torch.no_grad():
        for shadow, p in zip(state.ema, params):
            shadow.mul_(decay).add_(p, alpha=1.0 - decay)


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line, then raw little-endian float32 values in
# flat-index order.
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    model: ABConformer,
    config: Config,
    step: int,
    ema: list[Tensor] | None = None,
) -> Path:
    values = ema if ema is not None else [p.detach() for _, p in flat_parameters(model)]
    flat = torch.cat([v.reshape(-1).to(torch.float32) for v in values])
    header = {
        "param_count": int(flat.numel()),
        "config_hash": config.hash(),
        "step": int(step),
        "ema": ema is not None,
        "in_width": model.in_width,
    }
    path = Path(path)
    with open(path, "wb") as handle:
        handle.write((json.dumps(header, sort_keys=True) + "\n").encode())
        handle.write(flat.numpy().astype("<f4").tobytes())
    return path


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as handle:
        line = handle.readline()
    try:
        return json.loads(line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: invalid checkpoint header", module="train") from exc


def load_checkpoint(path: str | Path, model: ABConformer, config: Config | None = None) -> dict:
    """Load flat parameter values into the model; verifies count and config hash."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}", module="train")
    with open(path, "rb") as handle:
        header_line = handle.readline()
        blob = handle.read()
    try:
        header = json.loads(header_line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: invalid checkpoint header", module="train") from exc
    expected = parameter_count(model)
    if header.get("param_count") != expected:
        raise DataError(
            f"{path}: checkpoint holds {header.get('param_count')} values, "
            f"model needs {expected}",
            module="train",
        )
    if config is not None and header.get("config_hash") != config.hash():
        raise DataError(f"{path}: checkpoint config hash mismatch", module="train")
    values = np.frombuffer(blob, dtype="<f4")
    if values.size != expected:
        raise DataError(f"{path}: checkpoint payload truncated", module="train")
    offset = 0
    with torch.no_grad():
        for _, p in flat_parameters(model):
            n = p.numel()
            chunk = torch.from_numpy(values[offset : offset + n].copy())
            p.copy_(chunk.view(p.shape).to(p.dtype))
            offset += n
    return header


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ABConformer
    state: OptimState
    losses: list[float]  # one entry per optimizer step
    steps: int
    epochs_run: int
    raw_checkpoint: Path | None = None
    ema_checkpoint: Path | None = None


class _EmaWeights:
    """Temporarily swap averaged weights into the model."""

    def __init__(self, model: ABConformer, state: OptimState):
        self.model = model
        self.state = state
        self.saved: list[Tensor] = []

    def __enter__(self):
        params = [p for _, p in flat_parameters(self.model)]
        with torch.no_grad():
            self.saved = [p.detach().clone() for p in params]
            for p, shadow in zip(params, self.state.ema):
                p.copy_(shadow)
        return self.model

    def __exit__(self, *exc):
        params = [p for _, p in flat_parameters(self.model)]
        with torch.no_grad():
            for p, saved in zip(params, self.saved):
                p.copy_(saved)
        return False


def _encode_all(
    records: list[ComplexRecord], encoder: str, window: int, require_labels: bool
) -> dict[str, dict[ChainRole, ChainArrays]]:
    arrays = {}
    for record in records:
        encoded = encode_record(record, encoder, window)
        if require_labels:
            for role in ChainRole:
                if record.has(role) and record.labels[role] is None:
                    raise DataError(
                        f"record {record.id}: chain {role.value} has no labels", module="train"
                    )
        arrays[record.id] = encoded
    return arrays


def dataset_loss(model: ABConformer, batches: list[Batch]) -> float:
    """Masked total loss over a list of batches, weighted by valid positions."""
    model.eval()
    num = {role: 0.0 for role in ChainRole}
    den = {role: 0.0 for role in ChainRole}
    with torch.no_grad():
        for batch in batches:
            logits, _ = model(batch, record_maps=False)
            for role in ChainRole:
                n_valid = float(batch.mask[role].sum())
                if n_valid == 0:
                    continue
                num[role] += float(masked_ce(logits[role], batch.labels[role], batch.mask[role])) * n_valid
                den[role] += n_valid
    per_role = [num[r] / den[r] if den[r] > 0 else 0.0 for r in ChainRole]
    return sum(per_role) / 3.0


def _epoch_metric_rows(
    model: ABConformer,
    state: OptimState,
    batches: list[Batch],
    config: Config,
    epoch: int,
) -> list[tuple]:
    """Pooled per-role metrics computed with the averaged weights."""
    scores: dict[ChainRole, list[np.ndarray]] = {r: [] for r in ChainRole}
    labels: dict[ChainRole, list[np.ndarray]] = {r: [] for r in ChainRole}
    thresholds = {role: config.threshold(role) for role in ChainRole}
    with _EmaWeights(model, state):
        for batch in batches:
            for pred, idx in zip(
                predict_batch(model, batch, thresholds, record_maps=False),
                range(batch.size),
            ):
                for role in ChainRole:
                    if role not in pred.probs:
                        continue
                    n = len(pred.probs[role])
                    scores[role].append(pred.probs[role])
                    labels[role].append(batch.labels[role][idx, :n].numpy())
    rows = []
    for role in ChainRole:
        if not scores[role]:
            continue
        s = np.concatenate(scores[role])
        y = np.concatenate(labels[role])
        report = metrics_mod.full_report(s, y, threshold=thresholds[role])
        for name, value, _flag in metrics_mod.report_rows(report):
            rows.append((epoch, role.value, name, value))
    return rows


def train_loop(
    records: list[ComplexRecord],
    config: Config,
    out_dir: str | Path,
    seed: int = 0,
    encoder: str = "external",
    window: int = 15,
    epoch_checkpoints: bool = True,
) -> TrainResult:
    """Seeded training with dynamic per-batch padding and per-epoch logging.

    Writes loss.csv (one line per optimizer step), metrics.csv (per-epoch
    pooled metrics, averaged weights), raw and averaged checkpoints per epoch
    (unless epoch_checkpoints is off), and final.raw/final.ema checkpoints.
    """
    if not records:
        raise DataError("no training records", module="train")
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = [resolve_antibody_chains(r) for r in records]
    arrays = _encode_all(records, encoder, window, require_labels=True)
    widths = {a.emb.shape[1] for per in arrays.values() for a in per.values() if a.length > 0}
    if len(widths) != 1:
        raise DataError(f"inconsistent feature widths: {sorted(widths)}", module="train")
    in_width = widths.pop()

    torch.manual_seed(seed)
    model = ABConformer(config, in_width)
    params = [p for _, p in flat_parameters(model)]
    state = OptimState.from_model(model, config)
    order_rng = random.Random(seed)

    ids = sorted(arrays)
    losses: list[float] = []
    step = 0
    epochs_run = 0
    loss_path = out_dir / "loss.csv"
    metrics_path = out_dir / "metrics.csv"
    with open(loss_path, "w", newline="") as handle:
        csv.writer(handle).writerow(["step", "epoch", "loss"])
    with open(metrics_path, "w", newline="") as handle:
        csv.writer(handle).writerow(["epoch", "role", "metric", "value"])

    def make_batches(id_list: list[str]) -> list[Batch]:
        return [
            pad_batch(
                [arrays[i] for i in id_list[lo : lo + config.batch_size]],
                id_list[lo : lo + config.batch_size],
            )
            for lo in range(0, len(id_list), config.batch_size)
        ]

    done = False
    for epoch in range(1, config.epochs + 1):
        shuffled = ids[:]
        order_rng.shuffle(shuffled)
        epoch_rows = []
        for batch in make_batches(shuffled):
            model.train()
            try:
                grads = backward(model, batch)
            except NumericsError as exc:
                raise NumericsError(
                    f"{exc} (epoch {epoch}, step {step + 1}, samples {batch.ids})",
                    module="train",
                ) from exc
            grads, _norm = clip_gradients(grads, state.clip_norm)
            adamw_step(params, grads, state)
            ema_update(state, params)
            with torch.no_grad():
                loss_value, _ = compute_loss(model, batch)
            losses.append(float(loss_value))
            step += 1
            epoch_rows.append([step, epoch, float(loss_value)])
            if config.max_steps and step >= config.max_steps:
                done = True
                break
        epochs_run = epoch
        with open(loss_path, "a", newline="") as handle:
            csv.writer(handle).writerows(epoch_rows)
        metric_rows = _epoch_metric_rows(model, state, make_batches(ids), config, epoch)
        with open(metrics_path, "a", newline="") as handle:
            csv.writer(handle).writerows(metric_rows)
        if epoch_checkpoints:
            save_checkpoint(out_dir / f"epoch{epoch:04d}.raw.ckpt", model, config, step)
            save_checkpoint(out_dir / f"epoch{epoch:04d}.ema.ckpt", model, config, step, ema=state.ema)
        if done:
            break

    raw_path = save_checkpoint(out_dir / "final.raw.ckpt", model, config, step)
    ema_path = save_checkpoint(out_dir / "final.ema.ckpt", model, config, step, ema=state.ema)
    return TrainResult(model, state, losses, step, epochs_run, raw_path, ema_path)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check_config() -> Config:
    """Small configuration used by the gradient-check harness: narrow widths,
    two blocks, two sliding steps, and bandwidth bounds that keep the spatial
    kernel informative at toy chain lengths."""
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


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_param: str
    n_params: int
    rel_errs: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < 1e-4


def synthetic_batch(
    lengths: dict[ChainRole, int], in_width: int, seed: int = 0, interface_frac: float = 0.3
) -> Batch:
    """Random embeddings and labels for harness and smoke tests."""
    rng = np.random.default_rng(seed)
    sample: dict[ChainRole, ChainArrays] = {}
    for role in ChainRole:
        n = lengths.get(role, 0)
        if n == 0:
            sample[role] = ChainArrays.absent()
            continue
        emb = rng.standard_normal((n, in_width))
        labels = (rng.random(n) < interface_frac).astype(np.int64)
        sample[role] = ChainArrays(emb, labels)
    return pad_batch([sample], ["synthetic"], dtype=torch.float64)


def gradient_check(
    model: ABConformer, batch: Batch, step: float = 1e-5
) -> GradCheckResult:
    """Compare every analytic gradient against central finite differences.

    Everything runs in 64-bit; the relative error uses
    |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    model = model.double()
    batch = batch.to(torch.float64)
    analytic = backward(model, batch)
    named = flat_parameters(model)

    def loss_value() -> float:
        with torch.inference_mode():
            value, _ = compute_loss(model, batch)
        return float(value)

    max_rel = 0.0
    worst = ""
    rel_errs: dict[str, float] = {}
    for (name, param), grad in zip(named, analytic):
        flat = param.data.view(-1)
        grad_flat = grad.reshape(-1)
        param_worst = 0.0
        for idx in range(flat.numel()):
            original = float(flat[idx])
            flat[idx] = original + step
            f_plus = loss_value()
            flat[idx] = original - step
            f_minus = loss_value()
            flat[idx] = original
            fd = (f_plus - f_minus) / (2.0 * step)
            a = float(grad_flat[idx])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if rel > param_worst:
                param_worst = rel
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{idx}]"
        rel_errs[name] = param_worst
    return GradCheckResult(max_rel, worst, sum(p.numel() for _, p in named), rel_errs)
