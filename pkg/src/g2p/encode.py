"""One-hot context matrices and sinusoidal positional codes for SNPs."""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .ingest import BASES, GenotypeTable, SnpDescriptor

# rows of every encoded column are ordered A, C, G, T
IUPAC_ALLELES = {
    "A": "A", "C": "C", "G": "G", "T": "T",
    "R": "AG", "Y": "CT", "S": "CG", "W": "AT", "K": "GT", "M": "AC",
}
ENCODABLE = tuple(IUPAC_ALLELES)
POSITION_SCALE = 1e-4

_LETTER_VECTORS = {}
for _letter, _alleles in IUPAC_ALLELES.items():
    _v = np.zeros(4)
    for _a in _alleles:
        _v[BASES.index(_a)] += 1.0 / len(_alleles)
    _LETTER_VECTORS[_letter] = _v
    _v.setflags(write=False)


def encode_letter(letter: str) -> np.ndarray:
    """4-vector for a genotype call; heterozygous codes split 0.5/0.5."""
    try:
        return _LETTER_VECTORS[letter].copy()
    except (KeyError, TypeError):
        raise DataError(f"cannot encode genotype letter {letter!r}") from None


def build_context_matrix(descriptor: SnpDescriptor, call: str, width: int | None = None) -> np.ndarray:
    """``4 x (2w+1)`` matrix: reference flanks one-hot, centre column from ``call``."""
    context = descriptor.context
    if width is not None and len(context) != 2 * width + 1:
        raise DataError(f"snp {descriptor.id}: context length {len(context)} != {2 * width + 1}")
    if len(context) % 2 != 1:
        raise DataError(f"snp {descriptor.id}: context length must be odd")
    mat = np.zeros((4, len(context)))
    for j, base in enumerate(context):
        mat[:, j] = encode_letter(base)
    mat[:, len(context) // 2] = encode_letter(call)
    return mat


def encode_table(table: GenotypeTable, width: int | None = None) -> np.ndarray:
    """Encode every (hybrid, SNP) pair: ``(hybrids, snps, 4, 2w+1)``.

    Vectorised equivalent of calling :func:`build_context_matrix` per cell.
    """
    n_h, n_s = table.shape
    if n_s == 0:
        return np.zeros((n_h, 0, 4, 2 * (width or 0) + 1))
    length = len(table.snps[0].context)
    if width is not None and length != 2 * width + 1:
        raise DataError(f"context length {length} != {2 * width + 1}")
    ref = np.stack([build_context_matrix(s, s.ref) for s in table.snps])  # (S, 4, L)
    out = np.broadcast_to(ref, (n_h,) + ref.shape).copy()
    lut = np.stack([_LETTER_VECTORS[c] for c in ENCODABLE])
    index = {c: i for i, c in enumerate(ENCODABLE)}
    try:
        codes = np.vectorize(index.__getitem__, otypes=[int])(table.calls)
    except KeyError as exc:
        raise DataError(f"cannot encode genotype letter {exc.args[0]!r}") from None
    out[:, :, :, length // 2] = lut[codes]
    return out


def center_onehot(table: GenotypeTable) -> np.ndarray:
    """Flattened centre-column encodings, ``(hybrids, 4 * snps)``."""
    enc = encode_table(table)
    mid = enc.shape[-1] // 2
    return enc[:, :, :, mid].reshape(enc.shape[0], -1)


def _sincos(value: float, n: int) -> np.ndarray:
    out = np.empty(n)
    i = np.arange((n + 1) // 2)
    freq = 10000.0 ** (-2.0 * i / n)
    angles = value * freq
    out[0::2] = np.sin(angles)[: len(out[0::2])]
    out[1::2] = np.cos(angles)[: len(out[1::2])]
    return out


def positional_code(chromosome: int, position: int, d: int, position_scale: float = POSITION_SCALE) -> np.ndarray:
    """Concatenated sin/cos codes: first half chromosome, second half scaled position.

    The chromosome half is evaluated at index ``chromosome - 1`` so chromosome
    1 gives ``(0, 1, 0, 1, ...)``.
    """
    if d % 2:
        raise ValueError(f"positional code dimension must be even, got {d}")
    if chromosome < 1 or position < 1:
        raise ValueError("chromosome and position must be >= 1")
    half = d // 2
    return np.concatenate([
        _sincos(float(chromosome - 1), half),
        _sincos(float(position) * position_scale, half),
    ])


def positional_codes(snps, d: int, position_scale: float = POSITION_SCALE) -> np.ndarray:
    return np.stack([positional_code(s.chrom, s.pos, d, position_scale) for s in snps]) if snps \
        else np.zeros((0, d))
