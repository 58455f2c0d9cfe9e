"""Individual-level simulation, GWAS reduction and Monte-Carlo benchmarking.

Genotypes are thresholded latent Gaussians with AR(1) correlation inside
blocks. Three variance targets drive the effect sizes:

* ``h2_gamma``: var(beta0 * G gamma) / var(Y)
* ``h2_alpha``: var(G alpha) / var(Y)
* ``h2_x``:     var(G gamma) / var(X)

Given the confounders and the outcome residual variance ``noise_var_y``, the
outcome variance, both effect scales and the exposure residual variance are
solved from these. The three targets are jointly feasible only when
``h2_x > h2_gamma / (1 - h2_alpha)``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import norm

from .baselines import ivw, mr_egger
from .exceptions import ConfigurationError, DegenerateError, RBMRError
from .ingest import HarmonizedDataset
from .ld import GenotypeBlock, assemble_block_diagonal, estimate_block_ld, ld_prune
from .model import HyperParams
from .vbem import FitOptions, fit_with_inference

logger = logging.getLogger(__name__)

METHODS = ("rbmr", "ivw", "egger")
_ALLELE_PAIRS = (("A", "G"), ("G", "A"), ("C", "T"), ("T", "C"), ("A", "C"), ("G", "T"))


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings; the defaults are the full-scale paper setting."""

    n_x: int = 20000
    n_y: int = 20000
    n_r: int = 5000
    n_blocks: int = 10
    block_size: int = 50
    beta0: float = 1.0
    h2_gamma: float = 0.1
    h2_alpha: float = 0.05
    h2_x: float = 0.11
    sigma0_2: float = 0.008
    idio_fraction: float = 0.05
    idio_sd_multiplier: float = 40.0
    ld_decay: float = 0.8
    confounder_count: int = 2
    seed: int = 0
    sigma_phi: float = 0.01
    confounder_corr: float = 0.85
    noise_var_x: float = 0.8
    noise_var_y: float = 0.4
    ld_lambda: float = 0.15
    prune_r2: float = 0.05

    def __post_init__(self):
        for name in ("n_x", "n_y", "n_r", "n_blocks", "block_size", "confounder_count"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if min(self.n_x, self.n_y, self.n_r) < 3:
            raise ConfigurationError("sample sizes must be at least 3")
        if not 0 < self.h2_x < 1:
            raise ConfigurationError("h2_x must lie in (0, 1)")
        if not (0 <= self.h2_gamma < 1 and 0 <= self.h2_alpha < 1):
            raise ConfigurationError("heritabilities must lie in [0, 1)")
        if self.h2_gamma + self.h2_alpha >= 1:
            raise ConfigurationError(
                f"infeasible heritability targets: h2_gamma + h2_alpha = {self.h2_gamma + self.h2_alpha} >= 1"
            )
        if not self.sigma0_2 > 0 or not self.idio_sd_multiplier > 0:
            raise ConfigurationError("sigma0_2 and idio_sd_multiplier must be positive")
        if not 0 <= self.idio_fraction <= 1:
            raise ConfigurationError("idio_fraction must lie in [0, 1]")
        if not 0 <= self.ld_decay < 1:
            raise ConfigurationError("ld_decay must lie in [0, 1)")
        if self.noise_var_x < 0 or self.noise_var_y < 0:
            raise ConfigurationError("noise variances must be non-negative")

    @property
    def n_snps(self) -> int:
        return self.n_blocks * self.block_size

    @classmethod
    def desk(cls, **overrides) -> "SimConfig":
        """CI-sized profile: n = 5000, J = 100 in 5 blocks of 20."""
        base = dict(n_x=5000, n_y=5000, n_r=5000, n_blocks=5, block_size=20)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown simulation settings: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SimTruth:
    beta0: float
    gamma: np.ndarray
    alpha: np.ndarray
    idio_index: np.ndarray
    noise_var_x: float
    noise_var_y: float
    var_y: float
    realized: dict


@dataclass
class SimOutput:
    dataset: HarmonizedDataset
    reference_blocks: list[GenotypeBlock]
    truth: SimTruth
    exposure_pvalue: np.ndarray
    alleles: list[tuple[str, str]]


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def generate_genotypes(n, n_blocks, block_size, ld_decay, seed=None, maf=None, return_latent=False):
    """Dosage matrix of shape (n, n_blocks * block_size).

    Each haplotype is a latent Gaussian vector with correlation
    ``ld_decay ** |i - j|`` inside a block and independence across blocks,
    thresholded at the minor-allele frequency. A dosage is the sum of two
    independent haplotypes. ``maf`` defaults to Uniform(0.05, 0.5) draws.
    """
    if min(n, n_blocks, block_size) < 1:
        raise ConfigurationError("n, n_blocks and block_size must be positive")
    if not 0 <= ld_decay < 1:
        raise ConfigurationError("ld_decay must lie in [0, 1)")
    rng = _rng(seed)
    J = n_blocks * block_size
    if maf is None:
        maf = rng.uniform(0.05, 0.5, size=J)
    cut = norm.ppf(np.asarray(maf))
    innov = np.sqrt(1.0 - ld_decay**2)
    latent = np.empty((2, n, J))
    for h in range(2):
        e = rng.standard_normal((n, J))
        z = latent[h]
        for b in range(n_blocks):
            s = b * block_size
            z[:, s] = e[:, s]
            for j in range(s + 1, s + block_size):
                z[:, j] = ld_decay * z[:, j - 1] + innov * e[:, j]
    G = (latent[0] < cut).astype(np.int8) + (latent[1] < cut).astype(np.int8)
    if return_latent:
        return G, latent
    return G


def gwas_summary(genotypes, trait):
    """Marginal least-squares slope and standard error for every SNP (with intercept)."""
    G = np.asarray(genotypes, dtype=float)
    y = np.asarray(trait, dtype=float)
    n = G.shape[0]
    if y.shape != (n,):
        raise ValueError("trait length does not match genotype rows")
    if n < 3:
        raise ValueError("need at least 3 samples")
    Gc = G - G.mean(axis=0)
    yc = y - y.mean()
    ss = (Gc**2).sum(axis=0)
    bad = np.flatnonzero(~(ss > 0))
    if bad.size:
        raise DegenerateError(f"constant genotype column at SNP index {bad[0]}", snp_index=int(bad[0]))
    beta = Gc.T @ yc / ss
    rss = np.maximum(yc @ yc - beta**2 * ss, 0.0)
    se = np.sqrt(rss / (n - 2) / ss)
    return beta, se


def simulate_dataset(config: SimConfig, replicate: int = 0) -> SimOutput:
    """One simulated two-sample dataset plus an independent reference panel."""
    ss = np.random.SeedSequence([int(config.seed), int(replicate)])
    r_eff, r_gx, r_gy, r_gr, r_conf, r_noise = (np.random.default_rng(s) for s in ss.spawn(6))
    J, N0 = config.n_snps, config.confounder_count
    maf = r_eff.uniform(0.05, 0.5, size=J)
    Gx = generate_genotypes(config.n_x, config.n_blocks, config.block_size, config.ld_decay, r_gx, maf)
    Gy = generate_genotypes(config.n_y, config.n_blocks, config.block_size, config.ld_decay, r_gy, maf)
    Gr = generate_genotypes(config.n_r, config.n_blocks, config.block_size, config.ld_decay, r_gr, maf)

    gamma = r_eff.standard_normal(J)
    alpha = r_eff.normal(0.0, np.sqrt(config.sigma0_2), size=J)
    n_idio = int(round(config.idio_fraction * J))
    idio = np.sort(r_eff.choice(J, size=n_idio, replace=False))
    alpha[idio] = r_eff.normal(0.0, config.idio_sd_multiplier * np.sqrt(config.sigma0_2), size=n_idio)

    S_eta = np.array([[1.0, config.confounder_corr], [config.confounder_corr, 1.0]])
    eta = r_conf.multivariate_normal(np.zeros(2), S_eta, size=N0)
    eta_x, eta_y = eta[:, 0], eta[:, 1]
    Ux = Gx @ r_conf.normal(0.0, config.sigma_phi, size=(J, N0)) + r_conf.standard_normal((config.n_x, N0))
    Uy = Gy @ r_conf.normal(0.0, config.sigma_phi, size=(J, N0)) + r_conf.standard_normal((config.n_y, N0))

    b0 = config.beta0
    # the exposure architecture is solved at a non-zero reference effect so
    # null and alternative designs share it
    b_ref = b0 if b0 != 0 else 1.0
    conf_x = np.var(Ux @ eta_x)
    resid_y = np.var(b_ref * (Uy @ eta_x) + Uy @ eta_y) - b_ref**2 * np.var(Uy @ eta_x) + config.noise_var_y
    v_gamma = np.var(Gx @ gamma)
    v_alpha = np.var(Gy @ alpha)
    if (config.h2_gamma > 0 and not v_gamma > 0) or (config.h2_alpha > 0 and not v_alpha > 0):
        raise ConfigurationError("heritability target cannot be met: genetic signal has zero variance")
    if config.h2_gamma > 0:
        denom = 1.0 - config.h2_alpha - config.h2_gamma / config.h2_x
        if denom <= 0 or resid_y <= 0:
            raise ConfigurationError(
                f"infeasible heritability targets: need h2_x > h2_gamma / (1 - h2_alpha) "
                f"= {config.h2_gamma / (1 - config.h2_alpha):.4g}, got h2_x = {config.h2_x}"
            )
        g = config.h2_gamma * (resid_y / denom) / b_ref**2
        noise_x = g / config.h2_x - g - conf_x
        if noise_x < 0:
            raise ConfigurationError(
                "infeasible heritability targets: confounding alone exceeds the allowed exposure variance"
            )
    else:
        g = 0.0
        noise_x = config.noise_var_x
    # outcome variance at the actual effect, so h2_alpha also holds under the null
    resid_b0 = np.var(b0 * (Uy @ eta_x) + Uy @ eta_y) - b0**2 * np.var(Uy @ eta_x) + config.noise_var_y
    var_y = (b0**2 * (g + conf_x + noise_x) + resid_b0) / (1.0 - config.h2_alpha)
    c_gamma = np.sqrt(g / v_gamma) if g > 0 else 0.0
    c_alpha = np.sqrt(config.h2_alpha * var_y / v_alpha) if config.h2_alpha > 0 else 0.0
    gamma, alpha = c_gamma * gamma, c_alpha * alpha

    sx, sy = np.sqrt(noise_x), np.sqrt(config.noise_var_y)
    X = Gx @ gamma + Ux @ eta_x + sx * r_noise.standard_normal(config.n_x)
    Xy = Gy @ gamma + Uy @ eta_x + sx * r_noise.standard_normal(config.n_y)
    Y = b0 * Xy + Gy @ alpha + Uy @ eta_y + sy * r_noise.standard_normal(config.n_y)

    gamma_hat, sigma_x = gwas_summary(Gx, X)
    Gamma_hat, sigma_y = gwas_summary(Gy, Y)
    ids = [f"rs{j + 1}" for j in range(J)]
    dataset = HarmonizedDataset(
        snp_ids=ids,
        gamma_hat=gamma_hat,
        sigma_x=sigma_x,
        Gamma_hat=Gamma_hat,
        sigma_y=sigma_y,
        block_index=np.repeat(np.arange(config.n_blocks), config.block_size),
    )
    ref_blocks = [
        GenotypeBlock(Gr[:, k * config.block_size : (k + 1) * config.block_size], ids[k * config.block_size : (k + 1) * config.block_size])
        for k in range(config.n_blocks)
    ]
    pvals = 2.0 * norm.sf(np.abs(gamma_hat / sigma_x))
    alleles = [_ALLELE_PAIRS[i] for i in r_eff.integers(0, len(_ALLELE_PAIRS), size=J)]
    var_Y = float(np.var(Y))
    realized = {
        "h2_gamma": float(np.var(b0 * (Gy @ gamma)) / var_Y),
        "h2_alpha": float(np.var(Gy @ alpha) / var_Y),
        "h2_x": float(np.var(Gx @ gamma) / np.var(X)),
    }
    truth = SimTruth(b0, gamma, alpha, idio, float(noise_x), config.noise_var_y, var_Y, realized)
    return SimOutput(dataset, ref_blocks, truth, pvals, alleles)


def reference_ld(sim: SimOutput, lam: float):
    return assemble_block_diagonal([estimate_block_ld(b, lam) for b in sim.reference_blocks], lam)


def prune_dataset(dataset: HarmonizedDataset, pvalues, ld_raw, r2_threshold: float) -> HarmonizedDataset:
    """Greedy-prune a dataset by ascending p-value using unshrunk LD."""
    kept = ld_prune(list(enumerate(np.asarray(pvalues, dtype=float))), ld_raw, r2_threshold)
    return dataset.subset(kept)


def _run_replicate(args):
    config, replicate, methods, hyper, opts = args
    sim = simulate_dataset(config, replicate)
    rows = []
    if "rbmr" in methods:
        ld = reference_ld(sim, config.ld_lambda)
        try:
            res = fit_with_inference(sim.dataset, ld, hyper, opts)
            rows.append(dict(replicate=replicate, method="rbmr", estimate=res.beta0_hat, se=res.se,
                             pvalue=res.pvalue, n_snps=res.n_snps, converged=res.converged))
        except RBMRError as exc:
            logger.warning("replicate %d: rbmr failed: %s", replicate, exc)
            rows.append(dict(replicate=replicate, method="rbmr", estimate=np.nan, se=np.nan,
                             pvalue=np.nan, n_snps=sim.dataset.n_snps, converged=False))
    if "ivw" in methods or "egger" in methods:
        pruned = prune_dataset(sim.dataset, sim.exposure_pvalue, reference_ld(sim, 0.0), config.prune_r2)
        for name, fn in (("ivw", ivw), ("egger", mr_egger)):
            if name not in methods:
                continue
            try:
                r = fn(pruned)
                rows.append(dict(replicate=replicate, method=name, estimate=r.beta_hat, se=r.se,
                                 pvalue=r.pvalue, n_snps=r.n_snps, converged=True))
            except RBMRError as exc:
                logger.warning("replicate %d: %s skipped: %s", replicate, name, exc)
                rows.append(dict(replicate=replicate, method=name, estimate=np.nan, se=np.nan,
                                 pvalue=np.nan, n_snps=pruned.n_snps, converged=False))
    return rows


def summarize(raw: pd.DataFrame, beta0: float, level: float = 0.95, alpha: float = 0.05) -> pd.DataFrame:
    """Per-method mean estimate, bias%, RMSE%, coverage% and rejection rate.

    Bias% is relative to ``beta0`` when it is non-zero and absolute (times
    100) otherwise.
    """
    z = norm.ppf(0.5 + level / 2)
    out = []
    for method in [m for m in METHODS if m in set(raw["method"])]:
        sub = raw[raw["method"] == method]
        est = sub["estimate"].to_numpy(float)
        se = sub["se"].to_numpy(float)
        ok = np.isfinite(est)
        err = est[ok] - beta0
        mean = float(np.mean(est[ok])) if ok.any() else np.nan
        bias = 100.0 * (mean - beta0) / beta0 if beta0 != 0 else 100.0 * (mean - beta0)
        cover = np.abs(err) <= z * np.where(np.isfinite(se[ok]), se[ok], np.inf)
        out.append(
            {
                "method": method,
                "beta_hat": mean,
                "bias%": bias,
                "RMSE%": 100.0 * float(np.sqrt(np.mean(err**2))) if ok.any() else np.nan,
                "cover%": 100.0 * float(np.mean(cover)) if ok.any() else np.nan,
                "type1": float(np.mean(sub["pvalue"].to_numpy(float)[ok] < alpha)) if ok.any() else np.nan,
                "n_ok": int(ok.sum()),
                "n_rep": int(len(sub)),
            }
        )
    return pd.DataFrame(out)


def run_benchmark(config: SimConfig, n_replicates: int, methods=METHODS, hyper: HyperParams | None = None,
                  opts: FitOptions | None = None, threads: int = 1):
    """Monte-Carlo comparison of the estimators.

    Returns
    -------
    metrics : DataFrame
        One row per method, see :func:`summarize`.
    raw : DataFrame
        Per-replicate estimates.
    """
    if n_replicates < 1:
        raise ConfigurationError("n_replicates must be at least 1")
    methods = tuple(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ConfigurationError(f"unknown methods: {sorted(unknown)}")
    hyper = hyper or HyperParams()
    opts = opts or FitOptions()
    jobs = [(config, r, methods, hyper, opts) for r in range(n_replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_run_replicate, jobs))
    else:
        chunks = [_run_replicate(j) for j in jobs]
    raw = pd.DataFrame([row for chunk in chunks for row in chunk])
    raw = raw.sort_values(["replicate", "method"], kind="stable").reset_index(drop=True)
    return summarize(raw, config.beta0), raw


def write_simulation(sim: SimOutput, outdir) -> dict:
    """Persist a simulation in the formats the ingest and LD readers consume.

    Writes exposure, outcome and selection summary TSVs, a block file, the
    reference dosage matrix and its SNP metadata. Returns the paths.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    d = sim.dataset
    J = d.n_snps
    ea = [a for a, _ in sim.alleles]
    oa = [b for _, b in sim.alleles]
    pos = 1000 * (np.arange(J) + 1)
    base = pd.DataFrame({"snp": d.snp_ids, "chrom": "1", "pos": pos, "effect_allele": ea, "other_allele": oa})
    exposure = base.assign(beta=d.gamma_hat, se=d.sigma_x, pvalue=sim.exposure_pvalue)
    outcome = base.assign(
        beta=d.Gamma_hat, se=d.sigma_y, pvalue=2.0 * norm.sf(np.abs(d.Gamma_hat / d.sigma_y))
    )
    paths = {
        "exposure": outdir / "exposure.tsv",
        "outcome": outdir / "outcome.tsv",
        "selection": outdir / "selection.tsv",
        "blocks": outdir / "blocks.tsv",
        "reference": outdir / "reference.txt",
        "reference_snps": outdir / "reference_snps.tsv",
        "truth": outdir / "truth.tsv",
    }
    fmt = "%.10g"
    exposure.to_csv(paths["exposure"], sep="\t", index=False, float_format=fmt)
    exposure.to_csv(paths["selection"], sep="\t", index=False, float_format=fmt)
    outcome.to_csv(paths["outcome"], sep="\t", index=False, float_format=fmt)
    sizes = d.block_sizes()
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    pd.DataFrame(
        {"chrom": "1", "start": pos[starts], "end": pos[starts + sizes - 1] + 1}
    ).to_csv(paths["blocks"], sep="\t", index=False)
    G = np.hstack([b.matrix for b in sim.reference_blocks]).astype(int)
    np.savetxt(paths["reference"], G, fmt="%d")
    base.to_csv(paths["reference_snps"], sep="\t", index=False)
    is_idio = np.zeros(J, dtype=int)
    is_idio[sim.truth.idio_index] = 1
    pd.DataFrame(
        {"snp": d.snp_ids, "gamma": sim.truth.gamma, "alpha": sim.truth.alpha, "idiosyncratic": is_idio}
    ).to_csv(paths["truth"], sep="\t", index=False, float_format=fmt)
    return paths
