"""Loading, instrument selection and allele harmonization of GWAS summary statistics."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .exceptions import ConfigurationError, EmptyInputError, EmptySelectionError

logger = logging.getLogger(__name__)

ROLES = ("snp", "chrom", "pos", "effect_allele", "other_allele", "beta", "se", "pvalue")
DEFAULT_COLUMN_MAP = {role: role for role in ROLES}

_AMBIGUOUS = {frozenset("AT"), frozenset("CG")}


def chrom_key(chrom) -> tuple:
    """Sort key putting numeric chromosomes first in numeric order, then the rest."""
    label = re.sub(r"^chr", "", str(chrom), flags=re.IGNORECASE)
    if label.isdigit():
        return (0, int(label), "")
    return (1, 0, label.upper())


@dataclass(frozen=True)
class SnpRecord:
    id: str
    chrom: str
    pos: int
    effect_allele: str
    other_allele: str
    beta: float
    se: float
    pvalue: float

    def __post_init__(self):
        if not self.se > 0:
            raise ValueError(f"{self.id}: standard error must be positive, got {self.se}")
        if not 0.0 <= self.pvalue <= 1.0:
            raise ValueError(f"{self.id}: p-value must lie in [0, 1], got {self.pvalue}")
        if self.effect_allele == self.other_allele:
            raise ValueError(f"{self.id}: effect and other allele are identical")


@dataclass
class SummaryTable:
    """Per-SNP association records for one GWAS, keyed by SNP identifier."""

    records: list[SnpRecord]
    trait_label: str = ""
    n_dropped: int = 0

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = [k for k, v in Counter(ids).items() if v > 1][:5]
            raise ValueError(f"duplicate SNP identifiers in table: {dup}")
        self._index = {r.id: r for r in self.records}

    def __len__(self):
        return len(self.records)

    def __contains__(self, snp_id):
        return snp_id in self._index

    def __getitem__(self, snp_id) -> SnpRecord:
        return self._index[snp_id]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "snp": [r.id for r in self.records],
                "chrom": [r.chrom for r in self.records],
                "pos": [r.pos for r in self.records],
                "effect_allele": [r.effect_allele for r in self.records],
                "other_allele": [r.other_allele for r in self.records],
                "beta": [r.beta for r in self.records],
                "se": [r.se for r in self.records],
                "pvalue": [r.pvalue for r in self.records],
            }
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, trait_label: str = "") -> "SummaryTable":
        records = [
            SnpRecord(
                id=str(row.snp),
                chrom=str(row.chrom),
                pos=int(row.pos),
                effect_allele=str(row.effect_allele).upper(),
                other_allele=str(row.other_allele).upper(),
                beta=float(row.beta),
                se=float(row.se),
                pvalue=float(row.pvalue),
            )
            for row in frame.itertuples(index=False)
        ]
        return cls(records, trait_label)


@dataclass
class HarmonizedDataset:
    """Exposure and outcome summary statistics aligned on a common SNP set.

    SNPs are in genomic order and SNPs sharing a block are contiguous.
    ``ref_flip`` marks reference-panel columns whose allele coding is swapped
    relative to the exposure; it is only populated by :func:`harmonize`.
    """

    snp_ids: list[str]
    gamma_hat: np.ndarray
    sigma_x: np.ndarray
    Gamma_hat: np.ndarray
    sigma_y: np.ndarray
    block_index: np.ndarray
    ref_flip: np.ndarray | None = None
    dropped: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.gamma_hat = np.asarray(self.gamma_hat, dtype=float)
        self.sigma_x = np.asarray(self.sigma_x, dtype=float)
        self.Gamma_hat = np.asarray(self.Gamma_hat, dtype=float)
        self.sigma_y = np.asarray(self.sigma_y, dtype=float)
        self.block_index = np.asarray(self.block_index, dtype=np.int64)
        self.snp_ids = list(self.snp_ids)
        J = len(self.snp_ids)
        if J < 1:
            raise EmptyInputError("harmonized dataset has no SNPs")
        for name in ("gamma_hat", "sigma_x", "Gamma_hat", "sigma_y", "block_index"):
            if getattr(self, name).shape != (J,):
                raise ValueError(f"{name} must have shape ({J},), got {getattr(self, name).shape}")
        if not (np.all(self.sigma_x > 0) and np.all(self.sigma_y > 0)):
            raise ValueError("standard errors must be strictly positive")
        if not (np.all(np.isfinite(self.gamma_hat)) and np.all(np.isfinite(self.Gamma_hat))):
            raise ValueError("effect sizes must be finite")
        if self.block_index[0] != 0 or np.any(np.diff(self.block_index) < 0) or np.any(
            np.diff(self.block_index) > 1
        ):
            raise ValueError("block_index must start at 0 and be non-decreasing without gaps")

    @property
    def n_snps(self) -> int:
        return len(self.snp_ids)

    @property
    def n_blocks(self) -> int:
        return int(self.block_index[-1]) + 1

    def block_sizes(self) -> np.ndarray:
        return np.bincount(self.block_index)

    def subset(self, positions) -> "HarmonizedDataset":
        """Restrict to the given positions (kept in their original order)."""
        positions = np.sort(np.asarray(positions, dtype=int))
        if positions.size == 0:
            raise EmptyInputError("subset would leave no SNPs")
        _, block_index = np.unique(self.block_index[positions], return_inverse=True)
        return HarmonizedDataset(
            snp_ids=[self.snp_ids[i] for i in positions],
            gamma_hat=self.gamma_hat[positions],
            sigma_x=self.sigma_x[positions],
            Gamma_hat=self.Gamma_hat[positions],
            sigma_y=self.sigma_y[positions],
            block_index=block_index,
            ref_flip=None if self.ref_flip is None else self.ref_flip[positions],
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "snp": self.snp_ids,
                "gamma_hat": self.gamma_hat,
                "sigma_x": self.sigma_x,
                "Gamma_hat": self.Gamma_hat,
                "sigma_y": self.sigma_y,
                "block": self.block_index,
            }
        )


def load_summary_stats(path, column_map: Mapping[str, str] | None = None, trait_label: str = "") -> SummaryTable:
    """Read a tab-separated summary-statistics file.

    Parameters
    ----------
    path : str or Path
        TSV with a header row.
    column_map : mapping, optional
        Maps each role in ``ROLES`` to a header name. Roles left out fall back
        to the role name itself.
    trait_label : str

    Returns
    -------
    SummaryTable
        Rows with non-finite beta or se (or non-positive se, or a p-value
        outside [0, 1]) are dropped; the count is kept in ``n_dropped``.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"summary statistics file not found: {path}")
    cmap = dict(DEFAULT_COLUMN_MAP)
    if column_map:
        unknown = set(column_map) - set(ROLES)
        if unknown:
            raise ConfigurationError(f"unknown column roles: {sorted(unknown)}")
        cmap.update(column_map)

    frame = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    missing = [f"{role} ({col})" for role, col in cmap.items() if col not in frame.columns]
    if missing:
        raise ConfigurationError(f"{path}: missing mapped columns: {', '.join(missing)}")
    frame = frame[[cmap[r] for r in ROLES]].copy()
    frame.columns = list(ROLES)

    for col in ("beta", "se", "pvalue", "pos"):
        frame[col] = pd.to_numeric(frame[col], errors="coerce")
    usable = (
        np.isfinite(frame["beta"])
        & np.isfinite(frame["se"])
        & (frame["se"] > 0)
        & frame["pvalue"].between(0, 1)
        & np.isfinite(frame["pos"])
    )
    alleles_ok = frame["effect_allele"].str.upper() != frame["other_allele"].str.upper()
    keep = usable & alleles_ok
    n_dropped = int((~keep).sum())
    frame = frame[keep]
    if frame.empty:
        raise EmptyInputError(f"{path}: no usable rows")
    if n_dropped:
        logger.info("%s: dropped %d rows with unusable values", path, n_dropped)
    table = SummaryTable.from_frame(frame, trait_label or path.stem)
    table.n_dropped = n_dropped
    return table


def select_instruments(selection: SummaryTable, p_threshold: float) -> list[str]:
    """SNPs with selection p-value at or below ``p_threshold``, in genomic order."""
    if not 0 < p_threshold <= 1:
        raise ConfigurationError(f"p-value threshold must lie in (0, 1], got {p_threshold}")
    chosen = [r for r in selection.records if r.pvalue <= p_threshold]
    if not chosen:
        raise EmptySelectionError(f"no SNP passes p <= {p_threshold:g}")
    chosen.sort(key=lambda r: (chrom_key(r.chrom), r.pos, r.id))
    return [r.id for r in chosen]


def read_blocks(path) -> pd.DataFrame:
    """Read a block-boundary file with (chrom, start, end) half-open intervals.

    A header line is optional. Returns a frame sorted in genomic order.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"block file not found: {path}")
    raw = pd.read_csv(path, sep=r"\s+", header=None, dtype=str, comment="#")
    if raw.shape[1] < 3:
        raise ConfigurationError(f"{path}: expected three columns (chrom, start, end)")
    raw = raw.iloc[:, :3]
    raw.columns = ["chrom", "start", "end"]
    if not str(raw.iloc[0]["start"]).strip().lstrip("-").isdigit():
        raw = raw.iloc[1:]
    try:
        blocks = pd.DataFrame(
            {
                "chrom": raw["chrom"].map(lambda c: re.sub(r"^chr", "", c, flags=re.IGNORECASE)),
                "start": raw["start"].astype(np.int64),
                "end": raw["end"].astype(np.int64),
            }
        )
    except ValueError as exc:
        raise ConfigurationError(f"{path}: malformed block boundaries ({exc})") from None
    if (blocks["end"] <= blocks["start"]).any():
        raise ConfigurationError(f"{path}: every block needs end > start")
    order = sorted(range(len(blocks)), key=lambda i: (chrom_key(blocks.chrom.iloc[i]), blocks.start.iloc[i]))
    return blocks.iloc[order].reset_index(drop=True)


def _assign_blocks(chroms, positions, blocks: pd.DataFrame) -> np.ndarray:
    """Row index into ``blocks`` for each SNP, -1 when no block contains it."""
    out = np.full(len(positions), -1, dtype=np.int64)
    for chrom, grp in blocks.groupby("chrom", sort=False):
        starts = grp["start"].to_numpy()
        ends = grp["end"].to_numpy()
        rows = grp.index.to_numpy()
        for i, (c, p) in enumerate(zip(chroms, positions)):
            if re.sub(r"^chr", "", str(c), flags=re.IGNORECASE) != chrom:
                continue
            k = np.searchsorted(starts, p, side="right") - 1
            if k >= 0 and p < ends[k]:
                out[i] = rows[k]
    return out


def _alignment(ref_ea, ref_oa, ea, oa):
    """+1 if alleles match, -1 if swapped, 0 if irreconcilable."""
    if (ea, oa) == (ref_ea, ref_oa):
        return 1
    if (ea, oa) == (ref_oa, ref_ea):
        return -1
    return 0


def harmonize(
    exposure: SummaryTable,
    outcome: SummaryTable,
    instruments: Sequence[str],
    reference_snps: SummaryTable | pd.DataFrame,
    blocks: pd.DataFrame,
) -> HarmonizedDataset:
    """Align outcome and reference alleles to the exposure coding.

    Parameters
    ----------
    exposure, outcome : SummaryTable
    instruments : sequence of str
        SNP identifiers selected as instruments.
    reference_snps : SummaryTable or DataFrame
        Reference-panel SNP metadata with columns ``snp, chrom, pos,
        effect_allele, other_allele``; the effect allele is the one the
        panel dosages count.
    blocks : DataFrame
        Output of :func:`read_blocks`.

    Returns
    -------
    HarmonizedDataset
        ``dropped`` maps each discarded instrument to its reason: one of
        ``missing``, ``ambiguous``, ``allele_mismatch`` or ``no_block``.
    """
    if len(instruments) == 0:
        raise EmptySelectionError("instrument list is empty")
    if isinstance(reference_snps, SummaryTable):
        reference_snps = reference_snps.to_frame()
    ref = {
        str(row.snp): (str(row.effect_allele).upper(), str(row.other_allele).upper())
        for row in reference_snps.itertuples(index=False)
    }

    dropped: dict[str, str] = {}
    kept = []
    for snp in dict.fromkeys(instruments):
        if snp not in exposure or snp not in outcome or snp not in ref:
            dropped[snp] = "missing"
            continue
        x = exposure[snp]
        if frozenset((x.effect_allele, x.other_allele)) in _AMBIGUOUS:
            dropped[snp] = "ambiguous"
            continue
        y = outcome[snp]
        y_sign = _alignment(x.effect_allele, x.other_allele, y.effect_allele, y.other_allele)
        r_sign = _alignment(x.effect_allele, x.other_allele, *ref[snp])
        if y_sign == 0 or r_sign == 0:
            dropped[snp] = "allele_mismatch"
            continue
        kept.append((x, y, y_sign, r_sign))

    if kept:
        block_rows = _assign_blocks([k[0].chrom for k in kept], [k[0].pos for k in kept], blocks)
        for k, row in zip(list(kept), block_rows):
            if row < 0:
                dropped[k[0].id] = "no_block"
        kept = [(k, row) for k, row in zip(kept, block_rows) if row >= 0]

    counts = Counter(dropped.values())
    if counts:
        logger.info("harmonize dropped %s", dict(counts))
    if not kept:
        raise EmptyInputError(
            f"no SNP survives harmonization (dropped: {dict(counts) or 'none'})"
        )

    kept.sort(key=lambda kr: (kr[1], chrom_key(kr[0][0].chrom), kr[0][0].pos, kr[0][0].id))
    _, block_index = np.unique([row for _, row in kept], return_inverse=True)
    return HarmonizedDataset(
        snp_ids=[x.id for (x, _, _, _), _ in kept],
        gamma_hat=[x.beta for (x, _, _, _), _ in kept],
        sigma_x=[x.se for (x, _, _, _), _ in kept],
        Gamma_hat=[s * y.beta for (_, y, s, _), _ in kept],
        sigma_y=[y.se for (_, y, _, _), _ in kept],
        block_index=block_index,
        ref_flip=np.array([r < 0 for (_, _, _, r), _ in kept]),
        dropped=dropped,
    )


def write_dropped_report(dropped: Mapping[str, str], path) -> None:
    """Write the dropped-SNP report as a two-column TSV (snp, reason)."""
    frame = pd.DataFrame(sorted(dropped.items()), columns=["snp", "reason"])
    frame.to_csv(path, sep="\t", index=False)


def write_summary_stats(table: SummaryTable, path) -> None:
    table.to_frame().to_csv(path, sep="\t", index=False, float_format="%.10g")
