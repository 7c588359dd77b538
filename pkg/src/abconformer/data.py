"""Dataset records, structure parsing, distance-based interface labeling,
antibody chain duplication, and cluster-stratified fold construction."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ChainArrays, ChainRole, DataError
from .encoding import load_embeddings, one_hot_context

log = logging.getLogger(__name__)

CONTACT_CUTOFF = 4.0  # heavy-atom residue-neighbor cutoff, strict, in Angstrom
PATCH_CUTOFF = 10.0  # residue-patch cutoff, strict, in Angstrom

# Elements excluded from heavy-atom distance checks.
_HYDROGEN = {"H", "D"}

_ROLE_KEYS = {ChainRole.ABH: "abh", ChainRole.ABL: "abl", ChainRole.AG: "ag"}


@dataclass(frozen=True)
class AtomRecord:
    """One atom of a structure file, with its residue's occurrence ordinal."""

    chain_id: str
    res_ordinal: int
    res_name: str
    atom_name: str
    element: str
    x: float
    y: float
    z: float

    @property
    def coords(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @property
    def is_heavy(self) -> bool:
        return self.element.upper() not in _HYDROGEN


@dataclass
class ComplexRecord:
    """One antibody-antigen sample: sequences, labels, embedding references."""

    id: str
    seq: dict[ChainRole, str | None] = field(default_factory=dict)
    labels: dict[ChainRole, np.ndarray | None] = field(default_factory=dict)
    emb_path: dict[ChainRole, str | None] = field(default_factory=dict)
    cluster: str | None = None

    def __post_init__(self):
        for role in ChainRole:
            self.seq.setdefault(role, None)
            self.labels.setdefault(role, None)
            self.emb_path.setdefault(role, None)
        for role in ChainRole:
            seq, lab = self.seq[role], self.labels[role]
            if lab is not None:
                lab = np.asarray(lab, dtype=np.int64)
                self.labels[role] = lab
                if seq is None:
                    raise DataError(f"record {self.id}: labels given for absent chain {role.value}", module="data")
                if lab.shape != (len(seq),):
                    raise DataError(
                        f"record {self.id}: {role.value} label length {lab.shape[0]} != sequence length {len(seq)}",
                        module="data",
                    )

    def has(self, role: ChainRole) -> bool:
        return self.seq[role] is not None


def parse_structure(path: str | Path) -> dict[str, list[AtomRecord]]:
    """Parse fixed-column ATOM records, grouped by chain.

    Residues are numbered by occurrence order within their chain; alternate
    locations of the same atom collapse to the first occurrence. Lines not
    starting with "ATOM" are ignored.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"structure file not found: {path}", module="data")
    chains: dict[str, list[AtomRecord]] = {}
    res_index: dict[str, dict[tuple, int]] = {}
    seen_atoms: set[tuple] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.startswith("ATOM"):
            continue
        if len(line) < 54:
            raise DataError(f"{path}: line {lineno}: truncated ATOM record", module="data")
        try:
            atom_name = line[12:16].strip()
            alt_loc = line[16].strip()
            res_name = line[17:20].strip()
            chain_id = line[21].strip()
            res_seq = line[22:26].strip()
            i_code = line[26].strip() if len(line) > 26 else ""
            x = float(line[30:38])
            y = float(line[38:46])
            z = float(line[46:54])
        except ValueError as exc:
            raise DataError(f"{path}: line {lineno}: malformed ATOM record", module="data") from exc
        element = line[76:78].strip() if len(line) >= 77 else ""
        if not element:
            raise DataError(f"{path}: line {lineno}: missing element symbol", module="data")
        if not chain_id or not res_seq:
            raise DataError(f"{path}: line {lineno}: missing chain or residue id", module="data")
        if not np.isfinite([x, y, z]).all():
            raise DataError(f"{path}: line {lineno}: non-finite coordinates", module="data")

        atom_key = (chain_id, res_seq, i_code, atom_name)
        if atom_key in seen_atoms:
            continue  # alternate location duplicate
        seen_atoms.add(atom_key)
        _ = alt_loc

        per_chain = res_index.setdefault(chain_id, {})
        res_key = (res_seq, i_code)
        ordinal = per_chain.setdefault(res_key, len(per_chain))
        chains.setdefault(chain_id, []).append(
            AtomRecord(chain_id, ordinal, res_name, atom_name, element, x, y, z)
        )
    if not chains:
        raise DataError(f"{path}: no ATOM records found", module="data")
    return chains


def _heavy_table(atoms: list[AtomRecord]) -> tuple[np.ndarray, np.ndarray, int]:
    """Heavy-atom coordinates, their residue ordinals, and the residue count."""
    if not atoms:
        raise DataError("chain has no atoms", module="data")
    n_res = max(a.res_ordinal for a in atoms) + 1
    heavy = [a for a in atoms if a.is_heavy]
    coords = np.array([[a.x, a.y, a.z] for a in heavy], dtype=np.float64).reshape(-1, 3)
    res_idx = np.array([a.res_ordinal for a in heavy], dtype=np.int64)
    present = np.zeros(n_res, dtype=bool)
    present[res_idx] = True
    for ordinal in np.nonzero(~present)[0]:
        log.warning("residue ordinal %d has no heavy atoms; labeled 0", int(ordinal))
    return coords, res_idx, n_res


def _min_dist2_per_atom(a: np.ndarray, b: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Minimum squared distance from each row of a to any row of b."""
    out = np.full(a.shape[0], np.inf)
    for start in range(0, a.shape[0], chunk):
        block = a[start : start + chunk]
        diff = block[:, None, :] - b[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        out[start : start + chunk] = d2.min(axis=1)
    return out


def label_interfaces(
    antigen_atoms: list[AtomRecord], antibody_atoms: list[AtomRecord]
) -> tuple[np.ndarray, np.ndarray]:
    """Per-residue 0/1 interface labels for both sides of a chain pair.

    A residue is labeled 1 iff the minimum distance between its heavy atoms
    and any heavy atom on the other side is strictly below 4 Angstrom.
    """
    ag_coords, ag_res, n_ag = _heavy_table(antigen_atoms)
    ab_coords, ab_res, n_ab = _heavy_table(antibody_atoms)
    ag_labels = np.zeros(n_ag, dtype=np.int64)
    ab_labels = np.zeros(n_ab, dtype=np.int64)
    if ag_coords.shape[0] == 0 or ab_coords.shape[0] == 0:
        return ag_labels, ab_labels
    cutoff2 = CONTACT_CUTOFF * CONTACT_CUTOFF
    ag_min = _min_dist2_per_atom(ag_coords, ab_coords)
    ab_min = _min_dist2_per_atom(ab_coords, ag_coords)
    ag_labels[ag_res[ag_min < cutoff2]] = 1
    ab_labels[ab_res[ab_min < cutoff2]] = 1
    return ag_labels, ab_labels


def residue_patch(atoms: list[AtomRecord], center_residue: int) -> set[int]:
    """Residues with any heavy atom strictly within 10 Angstrom of the center
    residue's heavy atoms; always includes the center itself."""
    coords, res_idx, n_res = _heavy_table(atoms)
    if not (0 <= center_residue < n_res):
        raise DataError(f"center residue {center_residue} not in chain", module="data")
    center_coords = coords[res_idx == center_residue]
    patch = {center_residue}
    if center_coords.shape[0] == 0 or coords.shape[0] == 0:
        return patch
    dmin2 = _min_dist2_per_atom(coords, center_coords)
    cutoff2 = PATCH_CUTOFF * PATCH_CUTOFF
    patch.update(int(r) for r in res_idx[dmin2 < cutoff2])
    return patch


def resolve_antibody_chains(record: ComplexRecord) -> ComplexRecord:
    """Duplicate a lone antibody chain into both roles; no chains mean an
    antibody-agnostic sample and both roles stay absent."""
    has_h, has_l = record.has(ChainRole.ABH), record.has(ChainRole.ABL)
    if has_h == has_l:
        return record
    src, dst = (ChainRole.ABH, ChainRole.ABL) if has_h else (ChainRole.ABL, ChainRole.ABH)
    seq = dict(record.seq)
    labels = dict(record.labels)
    emb = dict(record.emb_path)
    seq[dst] = seq[src]
    labels[dst] = None if labels[src] is None else labels[src].copy()
    emb[dst] = emb[src]
    return ComplexRecord(record.id, seq, labels, emb, record.cluster)


def build_folds(records: list[ComplexRecord], k: int = 5, seed: int = 0) -> dict[str, int]:
    """Assign each record a fold, round-robin within each cluster.

    Clusters are processed in sorted order, records sorted by id, and the
    round-robin pointer starts at a seeded offset and carries across clusters,
    so per-cluster and overall fold sizes both differ by at most one.
    """
    if k < 2:
        raise DataError("fold count must be >= 2", module="data")
    missing = sorted(r.id for r in records if r.cluster is None)
    if missing:
        raise DataError(f"records missing cluster id: {', '.join(missing[:5])}", module="data")
    by_cluster: dict[str, list[str]] = {}
    for r in records:
        by_cluster.setdefault(str(r.cluster), []).append(r.id)
    folds: dict[str, int] = {}
    pointer = seed % k
    for cluster in sorted(by_cluster):
        for rid in sorted(by_cluster[cluster]):
            folds[rid] = pointer % k
            pointer += 1
    return folds


def encode_record(
    record: ComplexRecord, encoder: str = "external", window: int = 15
) -> dict[ChainRole, ChainArrays]:
    """Produce per-chain feature matrices for one record.

    encoder "external" loads the referenced embedding files; "onehot" encodes
    the sequence with the contextual one-hot scheme. Absent chains become
    zero-length arrays.
    """
    if encoder not in ("external", "onehot"):
        raise DataError(f"unknown encoder '{encoder}'", module="data")
    arrays: dict[ChainRole, ChainArrays] = {}
    for role in ChainRole:
        seq = record.seq[role]
        if seq is None:
            arrays[role] = ChainArrays.absent()
            continue
        if encoder == "onehot":
            feats = one_hot_context(seq, window).features
        else:
            path = record.emb_path[role]
            if path is None:
                raise DataError(
                    f"record {record.id}: chain {role.value} has no embedding file", module="data"
                )
            feats = load_embeddings(path, len(seq)).features
        arrays[role] = ChainArrays(feats, record.labels[role])
    return arrays


# ---------------------------------------------------------------------------
# File formats: JSONL manifest, TSV cluster and fold tables.
# ---------------------------------------------------------------------------


def record_to_json(record: ComplexRecord) -> dict:
    out: dict = {"id": record.id}
    for role in ChainRole:
        key = _ROLE_KEYS[role]
        if record.seq[role] is not None:
            out[f"{key}_seq"] = record.seq[role]
        if record.labels[role] is not None:
            out[f"{key}_labels"] = [int(v) for v in record.labels[role]]
        if record.emb_path[role] is not None:
            out[f"{key}_emb"] = str(record.emb_path[role])
    if record.cluster is not None:
        out["cluster"] = record.cluster
    return out


def record_from_json(obj: dict, base_dir: Path | None = None) -> ComplexRecord:
    if "id" not in obj:
        raise DataError("manifest record missing 'id'", module="data")
    seq: dict[ChainRole, str | None] = {}
    labels: dict[ChainRole, np.ndarray | None] = {}
    emb: dict[ChainRole, str | None] = {}
    for role in ChainRole:
        key = _ROLE_KEYS[role]
        seq[role] = obj.get(f"{key}_seq")
        lab = obj.get(f"{key}_labels")
        labels[role] = None if lab is None else np.asarray(lab, dtype=np.int64)
        path = obj.get(f"{key}_emb")
        if path is not None and base_dir is not None and not Path(path).is_absolute():
            path = str(base_dir / path)
        emb[role] = path
    return ComplexRecord(str(obj["id"]), seq, labels, emb, obj.get("cluster"))


def load_manifest(path: str | Path) -> list[ComplexRecord]:
    """Read a JSONL manifest; embedding paths resolve relative to the file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}", module="data")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {lineno}: invalid JSON", module="data") from exc
        try:
            records.append(record_from_json(obj, base_dir=path.parent))
        except DataError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}", module="data") from exc
    if not records:
        raise DataError(f"{path}: empty manifest", module="data")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate record ids", module="data")
    return records


def write_manifest(records: list[ComplexRecord], path: str | Path) -> None:
    with open(path, "w") as handle:
        for record in records:
            handle.write(json.dumps(record_to_json(record), sort_keys=True))
            handle.write("\n")


def load_clusters(path: str | Path) -> dict[str, str]:
    """Read a TSV table of record id to cluster id."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"cluster file not found: {path}", module="data")
    clusters: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}: line {lineno}: expected 'id<TAB>cluster'", module="data")
        clusters[parts[0]] = parts[1]
    return clusters


def attach_clusters(records: list[ComplexRecord], clusters: dict[str, str]) -> list[ComplexRecord]:
    out = []
    for r in records:
        cluster = clusters.get(r.id, r.cluster)
        out.append(ComplexRecord(r.id, dict(r.seq), dict(r.labels), dict(r.emb_path), cluster))
    return out


def write_folds(folds: dict[str, int], path: str | Path) -> None:
    with open(path, "w") as handle:
        for rid in sorted(folds):
            handle.write(f"{rid}\t{folds[rid]}\n")


def load_folds(path: str | Path) -> dict[str, int]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"fold file not found: {path}", module="data")
    folds: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}: line {lineno}: expected 'id<TAB>fold'", module="data")
        try:
            folds[parts[0]] = int(parts[1])
        except ValueError as exc:
            raise DataError(f"{path}: line {lineno}: fold index must be an integer", module="data") from exc
    return folds
