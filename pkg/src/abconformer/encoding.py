"""Per-residue input features: contextual one-hot encoding and embedding file I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DataError

# 20 canonical amino acids in alphabetical one-letter order, then X as the
# catch-all for every non-canonical symbol.
CANONICAL_AA = "ACDEFGHIKLMNPQRSTVWY"
ALPHABET = CANONICAL_AA + "X"
ALPHABET_SIZE = len(ALPHABET)  # 21

_AA_INDEX = {aa: i for i, aa in enumerate(CANONICAL_AA)}


def aa_index(symbol: str) -> int:
    """Alphabet index of a residue symbol; non-canonical symbols map to X."""
    return _AA_INDEX.get(symbol.upper(), ALPHABET_SIZE - 1)


@dataclass(frozen=True)
class EncodedSequence:
    """A chain's per-residue feature matrix plus its provenance tag."""

    features: np.ndarray  # (L, d_in)
    source: str  # "onehot" or "external"

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]


def one_hot_context(sequence: str, window: int = 15) -> EncodedSequence:
    """Encode each residue with one-hot blocks for itself and its context window.

    Row i concatenates 2*window+1 blocks of width 21 for sequence positions
    i-window .. i+window; out-of-range positions contribute all-zero blocks.
    """
    if not sequence:
        raise DataError("cannot encode an empty sequence", module="encoding")
    if window < 0:
        raise DataError("context window must be >= 0", module="encoding")
    length = len(sequence)
    n_blocks = 2 * window + 1
    indices = np.array([aa_index(s) for s in sequence], dtype=np.int64)
    features = np.zeros((length, n_blocks * ALPHABET_SIZE), dtype=np.float64)
    for block, offset in enumerate(range(-window, window + 1)):
        lo = max(0, -offset)
        hi = min(length, length - offset)
        if lo >= hi:
            continue
        rows = np.arange(lo, hi)
        cols = block * ALPHABET_SIZE + indices[rows + offset]
        features[rows, cols] = 1.0
    return EncodedSequence(features, source="onehot")


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Write a matrix in the plain text format: "L d" header then L rows of d reals."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise DataError("matrix must be 2-D", module="encoding")
    rows, cols = matrix.shape
    with open(path, "w") as handle:
        handle.write(f"{rows} {cols}\n")
        for row in matrix:
            handle.write(" ".join(format(v, ".17g") for v in row))
            handle.write("\n")


def read_matrix(path: str | Path) -> np.ndarray:
    """Read a matrix written by write_matrix; validates shape and finiteness."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"matrix file not found: {path}", module="encoding")
    with open(path) as handle:
        header = handle.readline().split()
        if len(header) != 2:
            raise DataError(f"{path}: header must be two integers 'L d'", module="encoding")
        try:
            rows, cols = int(header[0]), int(header[1])
        except ValueError as exc:
            raise DataError(f"{path}: header must be two integers 'L d'", module="encoding") from exc
        if rows < 0 or cols < 0:
            raise DataError(f"{path}: negative dimensions in header", module="encoding")
        matrix = np.empty((rows, cols), dtype=np.float64)
        for i in range(rows):
            line = handle.readline()
            if not line:
                raise DataError(f"{path}: expected {rows} rows, file ends at row {i}", module="encoding")
            parts = line.split()
            if len(parts) != cols:
                raise DataError(
                    f"{path}: row {i} has {len(parts)} values, declared width is {cols}",
                    module="encoding",
                )
            try:
                matrix[i] = [float(p) for p in parts]
            except ValueError as exc:
                raise DataError(f"{path}: row {i} contains a non-numeric token", module="encoding") from exc
    if not np.isfinite(matrix).all():
        raise DataError(f"{path}: matrix contains non-finite values", module="encoding")
    return matrix


def load_embeddings(path: str | Path, expected_len: int) -> EncodedSequence:
    """Load externally computed per-residue embeddings for one chain."""
    matrix = read_matrix(path)
    if matrix.shape[0] != expected_len:
        raise DataError(
            f"{path}: embedding has {matrix.shape[0]} rows, chain has {expected_len} residues",
            module="encoding",
        )
    return EncodedSequence(matrix, source="external")


def input_projection(encoded: EncodedSequence | np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map of each feature row into model width."""
    x = encoded.features if isinstance(encoded, EncodedSequence) else np.asarray(encoded)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DataError(
            f"projection shape mismatch: input {x.shape} vs weight {weight.shape}",
            module="encoding",
        )
    if bias.shape != (weight.shape[1],):
        raise DataError(
            f"projection bias shape {bias.shape} does not match output width {weight.shape[1]}",
            module="encoding",
        )
    return x @ weight + bias
