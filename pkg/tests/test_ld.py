import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from rbmr.exceptions import ConfigurationError, DegenerateError, NumericalError
from rbmr.ingest import HarmonizedDataset
from rbmr.ld import (
    BlockLdMatrix,
    GenotypeBlock,
    ShrunkLDEstimator,
    assemble_block_diagonal,
    estimate_block_ld,
    ld_from_reference,
    ld_prune,
    read_reference_panel,
    write_reference_panel,
)
from rbmr.simulate import generate_genotypes

from conftest import ar1_block


def _block(G):
    return GenotypeBlock(G, [f"s{i}" for i in range(G.shape[1])])


def test_full_shrinkage_is_identity(rng):
    G = rng.integers(0, 3, (50, 6))
    assert np.array_equal(estimate_block_ld(_block(G), 1.0), np.eye(6))


def test_duplicate_columns_correlate_fully(rng):
    g = rng.integers(0, 3, 40)
    R = estimate_block_ld(_block(np.column_stack([g, g])), 0.0)
    assert R[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_shrunk_min_eigenvalue():
    G = generate_genotypes(200, 1, 50, 0.9, seed=3)
    R = estimate_block_ld(_block(G), 0.15)
    assert np.linalg.eigvalsh(R).min() >= 0.15 - 1e-12
    assert np.allclose(np.diag(R), 1.0) and np.allclose(R, R.T)


def test_matches_numpy_corrcoef(rng):
    G = rng.integers(0, 3, (100, 5)).astype(float)
    assert np.allclose(estimate_block_ld(_block(G), 0.0), np.corrcoef(G, rowvar=False), atol=1e-12)


def test_zero_variance_column_named(rng):
    G = rng.integers(0, 3, (30, 3))
    G[:, 1] = 2
    with pytest.raises(DegenerateError, match="s1"):
        estimate_block_ld(_block(G), 0.1)
    with pytest.raises(ConfigurationError):
        estimate_block_ld(_block(rng.integers(0, 3, (30, 3))), 1.5)


def test_assemble_identity_and_basis():
    ld = assemble_block_diagonal([np.eye(2), np.eye(2)])
    assert np.array_equal(ld.toarray(), np.eye(4))
    A, B = ar1_block(3, 0.5), ar1_block(2, 0.3)
    ld = assemble_block_diagonal([A, B])
    e1 = np.zeros(5)
    e1[0] = 1
    assert np.array_equal(ld @ e1, np.r_[A[:, 0], 0, 0])


def test_assemble_validation():
    with pytest.raises(ValueError):
        assemble_block_diagonal([np.ones((2, 3))])
    with pytest.raises(ValueError):
        assemble_block_diagonal([np.array([[1.0, 0.2], [0.3, 1.0]])])


def test_blockwise_ops_match_dense(rng):
    blocks = [ar1_block(m, rng.uniform(0, 0.8)) for m in (3, 4, 3)]
    ld = assemble_block_diagonal(blocks)
    D = ld.toarray()
    v = rng.standard_normal(10)
    assert np.allclose(ld.matvec(v), D @ v, atol=1e-12, rtol=0)
    assert np.allclose(ld.solve(v), np.linalg.solve(D, v), atol=1e-10)
    assert ld.logdet() == pytest.approx(np.linalg.slogdet(D)[1], abs=1e-12)
    assert ld.shape == (10, 10) and ld.n_blocks == 3


def test_not_positive_definite():
    ld = BlockLdMatrix([np.eye(2), np.ones((2, 2))])
    with pytest.raises(NumericalError):
        ld.cholesky()


def test_save_load(tmp_path, rng):
    ld = assemble_block_diagonal([ar1_block(3, 0.4), ar1_block(2, 0.2)], lam=0.1)
    ld.save(tmp_path / "ld.npz")
    back = BlockLdMatrix.load(tmp_path / "ld.npz")
    assert back.lam == 0.1 and np.array_equal(back.toarray(), ld.toarray())


def test_prune_examples():
    ld = assemble_block_diagonal([np.eye(4)])
    assert sorted(ld_prune([(i, 0.1 * (i + 1)) for i in range(4)], ld, 0.05)) == [0, 1, 2, 3]
    ld = assemble_block_diagonal([np.array([[1.0, 1.0], [1.0, 1.0]])])
    assert ld_prune([(0, 1e-3), (1, 1e-6)], ld, 0.05) == [1]


def _dense_greedy(R, pvals, thr):
    kept = []
    for i in sorted(range(len(pvals)), key=lambda i: (pvals[i], i)):
        if all(R[i, k] ** 2 < thr for k in kept):
            kept.append(i)
    return kept


@given(st.integers(0, 2**31), st.floats(0.3, 0.95))
@settings(max_examples=25, deadline=None)
def test_prune_matches_dense_oracle(seed, rho):
    rng = np.random.default_rng(seed)
    R = ar1_block(50, rho)
    pvals = rng.uniform(0, 1, 50)
    ld = assemble_block_diagonal([R[:20, :20], R[20:, 20:]])
    got = ld_prune(list(enumerate(pvals)), ld, 0.05)
    assert got == _dense_greedy(ld.toarray(), pvals, 0.05)


def test_prune_kept_set_is_independent(rng):
    ld = assemble_block_diagonal([ar1_block(50, 0.9)])
    kept = ld_prune(list(enumerate(rng.uniform(size=50))), ld, 0.05)
    R = ld.toarray()[np.ix_(kept, kept)]
    assert np.all((R - np.eye(len(kept))) ** 2 < 0.05)


def test_reference_panel_round_trip_and_flip(tmp_path, rng):
    G = rng.integers(0, 3, (60, 4))
    meta = pd.DataFrame({"snp": list("abcd"), "chrom": "1", "pos": [1, 2, 3, 4],
                         "effect_allele": "A", "other_allele": "G"})
    write_reference_panel(G, meta, tmp_path / "g.txt", tmp_path / "m.tsv")
    G2, meta2 = read_reference_panel(tmp_path / "g.txt", tmp_path / "m.tsv")
    assert np.array_equal(G, G2) and meta2.snp.tolist() == list("abcd")
    d = HarmonizedDataset(["b", "c"], [0.1, 0.1], [1, 1], [0.1, 0.1], [1, 1], [0, 0], ref_flip=np.array([True, False]))
    R = ld_from_reference(d, G2, meta2, 0.0).toarray()
    assert R[0, 1] == pytest.approx(-np.corrcoef(G[:, 1], G[:, 2])[0, 1], abs=1e-12)


def test_reference_panel_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        read_reference_panel(tmp_path / "g.txt", tmp_path / "m.tsv")


def test_estimator_api(rng):
    G = generate_genotypes(300, 2, 5, 0.6, seed=1)
    est = ShrunkLDEstimator(shrinkage=0.2, block_sizes=[5, 5]).fit(G)
    assert est.correlation_.shape == (10, 10)
    assert np.allclose(est.correlation_[:5, 5:], 0)
    assert est.get_params() == {"shrinkage": 0.2, "block_sizes": [5, 5]}
    assert clone(est).shrinkage == 0.2
    with pytest.raises(ConfigurationError):
        ShrunkLDEstimator(block_sizes=[3]).fit(G)
