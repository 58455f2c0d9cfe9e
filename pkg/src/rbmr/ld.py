"""Block-diagonal LD matrices estimated from a reference panel.

The correlation estimate is a convex shrinkage of the sample correlation
toward the identity, ``(1 - lam) * R + lam * I``, which is positive definite
with minimum eigenvalue at least ``lam``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, DegenerateError, NumericalError


@dataclass
class GenotypeBlock:
    matrix: np.ndarray
    snp_ids: list[str]

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2:
            raise ValueError("genotype block must be a 2-d matrix")
        if self.matrix.shape[0] < 2:
            raise ValueError("genotype block needs at least 2 samples")
        if self.matrix.shape[1] != len(self.snp_ids):
            raise ValueError("number of SNP ids does not match genotype columns")


def _check_lambda(lam):
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"shrinkage weight must lie in [0, 1], got {lam}")


def estimate_block_ld(block: GenotypeBlock, lam: float) -> np.ndarray:
    """Shrunken correlation matrix of one genotype block.

    Raises
    ------
    DegenerateError
        If a column has zero variance; the message names the SNP.
    """
    _check_lambda(lam)
    G = block.matrix
    centered = G - G.mean(axis=0)
    sd = np.sqrt((centered**2).sum(axis=0) / (G.shape[0] - 1))
    bad = np.flatnonzero(~(sd > 0))
    if bad.size:
        raise DegenerateError(f"zero-variance genotype column for SNP {block.snp_ids[bad[0]]}")
    Z = centered / sd
    R = (Z.T @ Z) / (G.shape[0] - 1)
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0)
    out = (1.0 - lam) * R
    out[np.diag_indices_from(out)] += lam
    return out


class BlockLdMatrix:
    """Block-diagonal symmetric correlation operator.

    Parameters
    ----------
    blocks : sequence of ndarray
        Dense square symmetric blocks, in SNP order.
    lam : float
        Shrinkage weight the blocks were built with (metadata only).
    """

    def __init__(self, blocks: Sequence[np.ndarray], lam: float = 0.0):
        self.blocks = [np.ascontiguousarray(b, dtype=float) for b in blocks]
        sizes = np.array([b.shape[0] for b in self.blocks], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.sizes = sizes
        self.lam = float(lam)
        self._chol = None

    @property
    def n_snps(self) -> int:
        return int(self.sizes.sum())

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def shape(self):
        return (self.n_snps, self.n_snps)

    def slices(self):
        return [slice(o, o + s) for o, s in zip(self.offsets, self.sizes)]

    def diagonal(self) -> np.ndarray:
        return np.concatenate([np.diag(b) for b in self.blocks])

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = np.empty_like(v)
        for sl, b in zip(self.slices(), self.blocks):
            out[sl] = b @ v[sl]
        return out

    __matmul__ = matvec

    def toarray(self) -> np.ndarray:
        return linalg.block_diag(*self.blocks)

    def payload(self) -> np.ndarray:
        """Row-major concatenation of all block entries."""
        return np.concatenate([b.ravel() for b in self.blocks])

    def cholesky(self) -> list[np.ndarray]:
        """Lower Cholesky factor of each block, computed once and cached."""
        if self._chol is None:
            factors = []
            for k, b in enumerate(self.blocks):
                try:
                    factors.append(linalg.cholesky(b, lower=True))
                except linalg.LinAlgError:
                    raise NumericalError(
                        f"LD block {k} is not positive definite", snp_index=int(self.offsets[k])
                    ) from None
            self._chol = factors
        return self._chol

    def logdet(self) -> float:
        return float(sum(2.0 * np.log(np.diag(L)).sum() for L in self.cholesky()))

    def solve(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = np.empty_like(v)
        for sl, L in zip(self.slices(), self.cholesky()):
            out[sl] = linalg.cho_solve((L, True), v[sl])
        return out

    def save(self, path) -> None:
        """Write header (J, Q, lambda, offsets) and the row-major payload to ``.npz``."""
        np.savez(
            path,
            J=np.int64(self.n_snps),
            Q=np.int64(self.n_blocks),
            lam=np.float64(self.lam),
            offsets=self.offsets,
            sizes=self.sizes,
            payload=self.payload(),
        )

    @classmethod
    def load(cls, path) -> "BlockLdMatrix":
        with np.load(path) as data:
            payload, sizes = data["payload"], data["sizes"]
            blocks, pos = [], 0
            for m in sizes:
                blocks.append(payload[pos : pos + m * m].reshape(m, m))
                pos += m * m
            out = cls(blocks, float(data["lam"]))
            if out.n_snps != int(data["J"]) or out.n_blocks != int(data["Q"]):
                raise ValueError(f"{path}: corrupt LD container")
        return out


def assemble_block_diagonal(blocks: Sequence[np.ndarray], lam: float = 0.0, atol: float = 1e-10) -> BlockLdMatrix:
    """Validate square symmetric blocks and wrap them as a :class:`BlockLdMatrix`."""
    if len(blocks) == 0:
        raise ValueError("need at least one block")
    for k, b in enumerate(blocks):
        b = np.asarray(b)
        if b.ndim != 2 or b.shape[0] != b.shape[1]:
            raise ValueError(f"block {k} is not square: shape {b.shape}")
        if not np.allclose(b, b.T, atol=atol, rtol=0):
            raise ValueError(f"block {k} is not symmetric")
    return BlockLdMatrix(blocks, lam)


def ld_prune(candidates, ld: BlockLdMatrix, r2_threshold: float) -> list:
    """Greedy LD pruning.

    Parameters
    ----------
    candidates : sequence of (position, pvalue)
        ``position`` indexes the SNP in ``ld``. Visited by ascending p-value,
        ties by position.
    ld : BlockLdMatrix
    r2_threshold : float
        A SNP is kept iff its squared correlation with every SNP already kept
        is strictly below this value.

    Returns
    -------
    list
        Kept positions in visiting order.
    """
    if r2_threshold <= 0:
        raise ConfigurationError("r2 threshold must be positive")
    block_of = np.repeat(np.arange(ld.n_blocks), ld.sizes)
    order = sorted(candidates, key=lambda c: (c[1], c[0]))
    kept_by_block: dict[int, list[int]] = {}
    kept = []
    for pos, _ in order:
        pos = int(pos)
        if not 0 <= pos < ld.n_snps:
            raise ValueError(f"candidate position {pos} outside the LD matrix")
        k = int(block_of[pos])
        local = pos - int(ld.offsets[k])
        others = kept_by_block.setdefault(k, [])
        if others:
            r = ld.blocks[k][local, [o - int(ld.offsets[k]) for o in others]]
            if np.any(r**2 >= r2_threshold):
                continue
        others.append(pos)
        kept.append(pos)
    return kept


def read_reference_panel(genotype_path, snp_path) -> tuple[np.ndarray, pd.DataFrame]:
    """Load a whitespace-separated dosage matrix (samples x SNPs) and its SNP metadata TSV."""
    genotype_path, snp_path = Path(genotype_path), Path(snp_path)
    for p in (genotype_path, snp_path):
        if not p.exists():
            raise ConfigurationError(f"reference panel file not found: {p}")
    G = np.loadtxt(genotype_path, ndmin=2)
    meta = pd.read_csv(snp_path, sep="\t", dtype={"snp": str, "chrom": str})
    need = {"snp", "chrom", "pos", "effect_allele", "other_allele"}
    if not need <= set(meta.columns):
        raise ConfigurationError(f"{snp_path}: needs columns {sorted(need)}")
    if G.shape[1] != len(meta):
        raise ConfigurationError(
            f"reference panel has {G.shape[1]} columns but {len(meta)} SNP metadata rows"
        )
    return G, meta


def write_reference_panel(G: np.ndarray, meta: pd.DataFrame, genotype_path, snp_path) -> None:
    np.savetxt(genotype_path, G, fmt="%d" if np.all(G == np.round(G)) else "%.6g")
    meta.to_csv(snp_path, sep="\t", index=False)


def ld_from_reference(dataset, G: np.ndarray, meta: pd.DataFrame, lam: float) -> BlockLdMatrix:
    """Estimate the LD operator for a harmonized dataset from panel dosages.

    Columns flagged in ``dataset.ref_flip`` are recoded as ``2 - dosage``.
    """
    col_of = {s: i for i, s in enumerate(meta["snp"].astype(str))}
    cols = np.array([col_of[s] for s in dataset.snp_ids])
    flip = np.zeros(len(cols), bool) if dataset.ref_flip is None else np.asarray(dataset.ref_flip)
    X = G[:, cols].astype(float)
    X[:, flip] = 2.0 - X[:, flip]
    blocks = []
    for k in range(dataset.n_blocks):
        idx = np.flatnonzero(dataset.block_index == k)
        blocks.append(estimate_block_ld(GenotypeBlock(X[:, idx], [dataset.snp_ids[i] for i in idx]), lam))
    return assemble_block_diagonal(blocks, lam)


class ShrunkLDEstimator(BaseEstimator):
    """Block-wise shrunken LD estimator, shaped like ``sklearn.covariance`` estimators.

    Parameters
    ----------
    shrinkage : float, default=0.15
        Weight on the identity target.
    block_sizes : sequence of int, optional
        Column counts of consecutive blocks. A single block when omitted.

    Attributes
    ----------
    ld_ : BlockLdMatrix
    correlation_ : ndarray of shape (n_features, n_features)
        Dense block-diagonal view of ``ld_``.
    n_features_in_ : int
    """

    def __init__(self, shrinkage=0.15, block_sizes=None):
        self.shrinkage = shrinkage
        self.block_sizes = block_sizes

    def fit(self, X, y=None, snp_ids=None):
        X = check_array(X, dtype=float, ensure_min_samples=2)
        _check_lambda(self.shrinkage)
        sizes = [X.shape[1]] if self.block_sizes is None else list(self.block_sizes)
        if sum(sizes) != X.shape[1]:
            raise ConfigurationError("block sizes must sum to the number of columns")
        ids = list(snp_ids) if snp_ids is not None else [f"snp{i}" for i in range(X.shape[1])]
        blocks, start = [], 0
        for m in sizes:
            cols = slice(start, start + m)
            blocks.append(estimate_block_ld(GenotypeBlock(X[:, cols], ids[cols]), self.shrinkage))
            start += m
        self.ld_ = assemble_block_diagonal(blocks, self.shrinkage)
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def correlation_(self):
        check_is_fitted(self, "ld_")
        return self.ld_.toarray()
