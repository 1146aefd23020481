"""Block-structured symmetric matrices and the symblockdiag projector.

An n×n matrix with n = m·d is viewed as an m×m grid of d×d blocks. Small
matrices are held dense, large ones in CSR form; every routine here accepts
either.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from utils import BdsdpError

# Above this side length matrices default to sparse storage
DENSE_MAX_N = 2000
SYMMETRY_RTOL = 1e-10

ArrayOrSparse = Union[np.ndarray, sp.spmatrix]


class DimensionMismatch(BdsdpError, ValueError):
    pass


class AsymmetricMatrix(BdsdpError, ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    m: int
    d: int

    def __post_init__(self) -> None:
        if int(self.m) != self.m or int(self.d) != self.d:
            raise DimensionMismatch(f"Block counts must be integers, got m={self.m}, d={self.d}")
        if self.m < 1 or self.d < 1:
            raise DimensionMismatch(f"Need m >= 1 and d >= 1, got m={self.m}, d={self.d}")

    @property
    def n(self) -> int:
        return self.m * self.d

    def check_square(self, M, what: str = "matrix") -> None:
        if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] != self.n:
            raise DimensionMismatch(f"{what} has shape {M.shape}, expected ({self.n}, {self.n})")

    def check_rows(self, V, what: str = "matrix") -> None:
        if V.ndim != 2 or V.shape[0] != self.n:
            raise DimensionMismatch(f"{what} has shape {V.shape}, expected {self.n} rows")

    def block_slice(self, i: int) -> slice:
        return slice(i * self.d, (i + 1) * self.d)


class SymBlockMatrix:
    """Immutable symmetric n×n matrix with d×d block access."""

    def __init__(self, spec: BlockSpec, data: ArrayOrSparse, symmetrize: bool = True) -> None:
        spec.check_square(data, "SymBlockMatrix data")
        self.spec = spec
        if sp.issparse(data):
            data = sp.csr_matrix(data, dtype=float)
            if symmetrize:
                data = _symmetrized_sparse(data)
            data.sort_indices()
        else:
            data = np.array(data, dtype=float)
            if symmetrize:
                data = _symmetrized_dense(data)
            data.flags.writeable = False
        self._data = data

    # -- constructors ----------------------------------------------------

    @classmethod
    def from_dense(cls, spec: BlockSpec, M: ArrayOrSparse, storage: str = "auto") -> SymBlockMatrix:
        """Builds from a full matrix. `storage` is "dense", "sparse" or "auto"
        (dense up to DENSE_MAX_N)."""
        if storage == "auto":
            storage = "dense" if spec.n <= DENSE_MAX_N else "sparse"
        if storage == "dense":
            M = M.toarray() if sp.issparse(M) else M
        elif storage == "sparse":
            M = sp.csr_matrix(M)
        else:
            raise ValueError(f"Unknown storage {storage!r}")
        return cls(spec, M)

    @classmethod
    def from_blocks(cls, blocks: np.ndarray, storage: str = "auto") -> SymBlockMatrix:
        """Builds from an (m, m, d, d) array where blocks[i, j] is block (i, j)."""
        blocks = np.asarray(blocks, dtype=float)
        if blocks.ndim != 4 or blocks.shape[0] != blocks.shape[1] or blocks.shape[2] != blocks.shape[3]:
            raise DimensionMismatch(f"Block array must be (m, m, d, d), got {blocks.shape}")
        spec = BlockSpec(blocks.shape[0], blocks.shape[2])
        dense = blocks.transpose(0, 2, 1, 3).reshape(spec.n, spec.n)
        return cls.from_dense(spec, dense, storage)

    @classmethod
    def from_triplets(
        cls,
        spec: BlockSpec,
        rows: Sequence[int],
        cols: Sequence[int],
        values: Sequence[float],
        storage: str = "auto",
    ) -> SymBlockMatrix:
        """Builds from 1-based upper-triangle triplets; entries are mirrored.
        Repeated coordinates are summed."""
        rows = np.asarray(rows, dtype=np.int64) - 1
        cols = np.asarray(cols, dtype=np.int64) - 1
        values = np.asarray(values, dtype=float)
        if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= spec.n or cols.max() >= spec.n):
            raise DimensionMismatch(f"Triplet index outside [1, {spec.n}]")
        if np.any(rows > cols):
            raise DimensionMismatch("Triplets must lie in the upper triangle (row <= col)")
        off = rows != cols
        all_rows = np.concatenate([rows, cols[off]])
        all_cols = np.concatenate([cols, rows[off]])
        all_vals = np.concatenate([values, values[off]])
        M = sp.coo_matrix((all_vals, (all_rows, all_cols)), shape=(spec.n, spec.n)).tocsr()
        return cls.from_dense(spec, M, storage)

    @classmethod
    def identity(cls, spec: BlockSpec, storage: str = "auto") -> SymBlockMatrix:
        return cls.from_dense(spec, sp.identity(spec.n, format="csr"), storage)

    @classmethod
    def zeros(cls, spec: BlockSpec, storage: str = "auto") -> SymBlockMatrix:
        return cls.from_dense(spec, sp.csr_matrix((spec.n, spec.n)), storage)

    @classmethod
    def block_diagonal(cls, diag_blocks: np.ndarray, storage: str = "auto") -> SymBlockMatrix:
        """Builds from an (m, d, d) stack of symmetric diagonal blocks."""
        diag_blocks = np.asarray(diag_blocks, dtype=float)
        spec = BlockSpec(diag_blocks.shape[0], diag_blocks.shape[1])
        return cls.from_dense(spec, sp.block_diag(list(diag_blocks), format="csr"), storage)

    # -- accessors -------------------------------------------------------

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self._data)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.spec.n, self.spec.n)

    def block(self, i: int, j: int) -> np.ndarray:
        rows, cols = self.spec.block_slice(i), self.spec.block_slice(j)
        blk = self._data[rows, cols]
        return blk.toarray() if sp.issparse(blk) else np.array(blk)

    def diagonal_blocks(self) -> np.ndarray:
        return np.stack([self.block(i, i) for i in range(self.spec.m)])

    def to_blocks(self) -> np.ndarray:
        m, d = self.spec.m, self.spec.d
        return self.todense().reshape(m, d, m, d).transpose(0, 2, 1, 3)

    def todense(self) -> np.ndarray:
        if self.is_sparse:
            return self._data.toarray()
        return np.array(self._data)

    def tocsr(self) -> sp.csr_matrix:
        if self.is_sparse:
            return self._data.copy()
        return sp.csr_matrix(self._data)

    def upper_triplets(self) -> Iterator[Tuple[int, int, float]]:
        """Yields (row, col, value), 1-based, row <= col, nonzeros only, row-major."""
        upper = sp.triu(self.tocsr(), format="csr")
        upper.eliminate_zeros()
        upper.sort_indices()
        for r in range(upper.shape[0]):
            for k in range(upper.indptr[r], upper.indptr[r + 1]):
                yield r + 1, int(upper.indices[k]) + 1, float(upper.data[k])

    def frobenius_norm(self) -> float:
        if self.is_sparse:
            return float(spla.norm(self._data, "fro"))
        return float(np.linalg.norm(self._data))

    def inner(self, other: Union[SymBlockMatrix, np.ndarray]) -> float:
        """Frobenius inner product."""
        other_data = other._data if isinstance(other, SymBlockMatrix) else other
        self.spec.check_square(other_data, "inner operand")
        if self.is_sparse:
            return float(self._data.multiply(other_data).sum())
        if sp.issparse(other_data):
            return float(other_data.multiply(self._data).sum())
        return float(np.sum(self._data * other_data))

    def apply(self, V: np.ndarray) -> np.ndarray:
        return apply_sym(self, V)

    def __matmul__(self, V: np.ndarray) -> np.ndarray:
        return apply_sym(self, V)

    def scaled(self, alpha: float) -> SymBlockMatrix:
        return SymBlockMatrix(self.spec, self._data * alpha, symmetrize=False)

    def __neg__(self) -> SymBlockMatrix:
        return self.scaled(-1.0)

    def __add__(self, other: SymBlockMatrix) -> SymBlockMatrix:
        if other.spec != self.spec:
            raise DimensionMismatch(f"Cannot add {other.spec} to {self.spec}")
        if self.is_sparse and other.is_sparse:
            return SymBlockMatrix(self.spec, self._data + other._data, symmetrize=False)
        return SymBlockMatrix(self.spec, self.todense() + other.todense(), symmetrize=False)

    def __sub__(self, other: SymBlockMatrix) -> SymBlockMatrix:
        return self + (-other)

    def __repr__(self) -> str:
        kind = "sparse" if self.is_sparse else "dense"
        return f"SymBlockMatrix(m={self.spec.m}, d={self.spec.d}, {kind})"


def _symmetrized_dense(M: np.ndarray) -> np.ndarray:
    asym = np.linalg.norm(M - M.T)
    scale = np.linalg.norm(M)
    if asym > SYMMETRY_RTOL * max(scale, np.finfo(float).tiny):
        raise AsymmetricMatrix(f"Relative asymmetry {asym / scale:.3e} exceeds {SYMMETRY_RTOL:g}")
    return (M + M.T) / 2


def _symmetrized_sparse(M: sp.csr_matrix) -> sp.csr_matrix:
    asym = spla.norm(M - M.T, "fro") if M.nnz else 0.0
    scale = spla.norm(M, "fro") if M.nnz else 0.0
    if asym > SYMMETRY_RTOL * max(scale, np.finfo(float).tiny):
        raise AsymmetricMatrix(f"Relative asymmetry {asym / scale:.3e} exceeds {SYMMETRY_RTOL:g}")
    return ((M + M.T) / 2).tocsr()


def symblockdiag(M: Union[ArrayOrSparse, SymBlockMatrix], spec: BlockSpec) -> SymBlockMatrix:
    """Symmetrizes the diagonal d×d blocks of M and zeroes every other block."""
    if isinstance(M, SymBlockMatrix):
        if M.spec != spec:
            raise DimensionMismatch(f"Matrix spec {M.spec} does not match {spec}")
        diag = M.diagonal_blocks()
    else:
        spec.check_square(M, "symblockdiag input")
        dense_or_sparse = M.tocsr() if sp.issparse(M) else np.asarray(M, dtype=float)
        diag = []
        for i in range(spec.m):
            sl = spec.block_slice(i)
            blk = dense_or_sparse[sl, sl]
            diag.append(blk.toarray() if sp.issparse(blk) else blk)
        diag = np.stack(diag)
    return SymBlockMatrix.block_diagonal(sym(diag))


def apply_sym(M: SymBlockMatrix, V: np.ndarray) -> np.ndarray:
    """M·V; O(nnz(M)·p) for sparse storage."""
    V = np.asarray(V, dtype=float)
    squeeze = V.ndim == 1
    if squeeze:
        V = V[:, None]
    M.spec.check_rows(V, "apply_sym operand")
    out = M._data @ V
    out = np.asarray(out)
    return out[:, 0] if squeeze else out


def sym(blocks: np.ndarray) -> np.ndarray:
    """Symmetric part of each matrix in a (..., d, d) stack."""
    return (blocks + np.swapaxes(blocks, -1, -2)) / 2


def slices(V: np.ndarray, spec: BlockSpec) -> np.ndarray:
    """Views an n×k matrix as an (m, d, k) stack of row slices."""
    spec.check_rows(V)
    return V.reshape(spec.m, spec.d, V.shape[1])


def block_products(A: np.ndarray, B: np.ndarray, spec: BlockSpec) -> np.ndarray:
    """(m, m, d, d) array of A_i B_jᵀ; with A = B = Y these are the blocks of X = YYᵀ."""
    return np.einsum("iap,jbp->ijab", slices(A, spec), slices(B, spec), optimize=True)


def diag_block_products(A: np.ndarray, B: np.ndarray, spec: BlockSpec) -> np.ndarray:
    """(m, d, d) stack of A_i B_iᵀ."""
    return np.einsum("iap,ibp->iab", slices(A, spec), slices(B, spec), optimize=True)


def blockdiag_apply(diag_blocks: np.ndarray, V: np.ndarray, spec: Optional[BlockSpec] = None) -> np.ndarray:
    """Multiplies V by the block-diagonal matrix with the given (m, d, d) blocks."""
    m, d, _ = diag_blocks.shape
    spec = spec or BlockSpec(m, d)
    out = np.einsum("iab,ibk->iak", diag_blocks, slices(V, spec), optimize=True)
    return out.reshape(V.shape)


def block_weighted_apply(weights: np.ndarray, blocks: np.ndarray, V: np.ndarray, spec: BlockSpec) -> np.ndarray:
    """Applies the matrix with blocks weights[i, j]·blocks[i, j] to V."""
    out = np.einsum("ij,ijab,jbk->iak", weights, blocks, slices(V, spec), optimize=True)
    return out.reshape(V.shape)
