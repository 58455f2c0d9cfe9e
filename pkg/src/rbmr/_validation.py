"""Input validation helpers used by the estimators."""

import numpy as np

from .exceptions import EmptyInputError


def check_summary_arrays(data):
    """Return (gamma_hat, sigma_x, Gamma_hat, sigma_y) as validated float arrays.

    Accepts a HarmonizedDataset or anything exposing the same four attributes.
    """
    try:
        arrays = [np.asarray(getattr(data, name), dtype=float) for name in ("gamma_hat", "sigma_x", "Gamma_hat", "sigma_y")]
    except AttributeError:
        raise TypeError(f"expected a harmonized dataset, got {type(data).__name__}") from None
    J = arrays[0].shape
    if len(J) != 1 or J[0] == 0:
        raise EmptyInputError("summary statistics must be non-empty 1-d arrays")
    if any(a.shape != J for a in arrays):
        raise ValueError("summary statistic arrays differ in length")
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise ValueError("summary statistics contain non-finite values")
    if np.any(arrays[1] <= 0) or np.any(arrays[3] <= 0):
        raise ValueError("standard errors must be positive")
    return arrays


def check_dataset_ld(data, ld):
    """Verify that an LD operator matches the dataset's SNP count and block layout."""
    check_summary_arrays(data)
    if ld.n_snps != data.n_snps:
        raise ValueError(f"LD matrix covers {ld.n_snps} SNPs but dataset has {data.n_snps}")
    if not np.array_equal(ld.sizes, data.block_sizes()):
        raise ValueError("LD block sizes do not match the dataset block structure")
