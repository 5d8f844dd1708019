"""
EM estimation of haplotype frequencies from unphased genotypes.

A diplotype is an unordered pair (i, j), i <= j, of haplotype indices; its
canonical index is j(j+1)/2 + i. A genotype row (entries 0/1/2 per locus)
is compatible with every diplotype whose two haplotypes add up to it
digit-wise. Under Hardy-Weinberg equilibrium the diplotype (i, j) has
probability 2 p_i p_j (i < j) or p_i^2 (i = j).

em_estimate starts from uniform frequencies and alternates:
- E-step: per individual, posterior over its compatible diplotypes
  proportional to their HWE probabilities
- M-step: each frequency becomes the expected haplotype count / 2n
until the largest componentwise change is <= eps or max_iter is hit.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import pandas as pd

from simulators import haplotype_bits
from utils import DimensionError, InputError, on_simplex

logger = logging.getLogger(__name__)

GENOTYPE_COLUMN = re.compile(r"^g(\d+)$")


@dataclass
class EmResult:
    htfs: np.ndarray
    converged: bool
    iterations: int
    eps: float
    loglik_trace: list = field(default_factory=list)


# ==================== DIPLOTYPE COMBINATORICS ====================

def npairs(m: int) -> int:
    """Unordered pairs with repetition of m objects."""
    if m < 1:
        raise InputError(f"npairs needs at least one object, got {m}")
    return m * (m + 1) // 2


def diplotype_index(i: int, j: int) -> int:
    if not 0 <= i <= j:
        raise InputError(f"diplotype ({i}, {j}) is not in canonical order 0 <= i <= j")
    return j * (j + 1) // 2 + i


def diplotype_pair(index: int) -> tuple:
    """Inverse of diplotype_index."""
    if index < 0:
        raise InputError(f"diplotype index must be >= 0, got {index}")
    j = (math.isqrt(8 * index + 1) - 1) // 2
    return index - j * (j + 1) // 2, j


@lru_cache(maxsize=None)
def _pair_tables(n_loci: int) -> tuple:
    n_haplotypes = 2 ** n_loci
    count = npairs(n_haplotypes)
    pairs = np.array([diplotype_pair(d) for d in range(count)], dtype=np.int64)
    bits = haplotype_bits(n_loci)
    genotype_sums = bits[pairs[:, 0]] + bits[pairs[:, 1]]
    contrib = np.zeros((count, n_haplotypes))
    np.add.at(contrib, (np.arange(count), pairs[:, 0]), 1.0)
    np.add.at(contrib, (np.arange(count), pairs[:, 1]), 1.0)
    return pairs, genotype_sums, contrib


def compatible_diplotypes(g, k: int) -> list:
    """Sorted diplotype indices whose haplotypes sum to genotype row g."""
    g = validate_genotypes(np.atleast_2d(g), k)[0]
    _, genotype_sums, _ = _pair_tables(k)
    return np.flatnonzero(np.all(genotype_sums == g, axis=1)).tolist()


def dt_contrib(dt_index: int, n_haplotypes: int) -> np.ndarray:
    """Haplotype counts carried by a diplotype (sums to 2)."""
    if not 0 <= dt_index < npairs(n_haplotypes):
        raise InputError(f"diplotype index {dt_index} out of range for {n_haplotypes} haplotypes")
    i, j = diplotype_pair(dt_index)
    counts = np.zeros(n_haplotypes, dtype=np.int64)
    counts[i] += 1
    counts[j] += 1
    return counts


def hwe_diplotype_freqs(htfs) -> np.ndarray:
    """Diplotype probabilities under Hardy-Weinberg equilibrium, by canonical index."""
    htfs = np.asarray(htfs, dtype=np.float64)
    if htfs.ndim != 1 or not on_simplex(htfs):
        raise InputError("haplotype frequencies must be a nonnegative vector summing to 1")
    count = htfs.size
    pairs = np.array([diplotype_pair(d) for d in range(npairs(count))], dtype=np.int64)
    i, j = pairs[:, 0], pairs[:, 1]
    return np.where(i == j, htfs[i] ** 2, 2.0 * htfs[i] * htfs[j])


# ==================== VALIDATION ====================

def validate_genotypes(g, k: int = None) -> np.ndarray:
    """Integer genotype matrix (n, k) with entries in {0, 1, 2}."""
    g = np.asarray(g)
    if g.ndim != 2 or g.shape[0] < 1:
        raise DimensionError(f"genotype matrix must be (individuals, loci), got shape {g.shape}")
    if k is not None and g.shape[1] != k:
        raise DimensionError(f"locus axis: expected {k} loci, got {g.shape[1]}")
    if not np.all(np.isfinite(g.astype(np.float64))) or np.any(g != np.round(g)):
        raise InputError("genotype entries must be integers")
    g = g.astype(np.int64)
    if np.any((g < 0) | (g > 2)):
        raise InputError("genotype entries must lie in {0, 1, 2}")
    return g


def _compatibility(g: np.ndarray) -> tuple:
    # unique genotype rows, their multiplicities and (rows x diplotypes) mask
    k = g.shape[1]
    _, genotype_sums, contrib = _pair_tables(k)
    rows, counts = np.unique(g, axis=0, return_counts=True)
    mask = np.all(rows[:, None, :] == genotype_sums[None, :, :], axis=-1).astype(np.float64)
    return mask, counts.astype(np.float64), contrib


# ==================== EM ====================

def observed_loglik(g, htfs) -> float:
    """
    Observed-data log-likelihood of genotypes under HWE.

    Returns -inf when some individual's genotype has probability zero.
    """
    htfs = np.asarray(htfs, dtype=np.float64)
    g = validate_genotypes(g)
    if htfs.size != 2 ** g.shape[1]:
        raise DimensionError(f"frequency axis: expected {2 ** g.shape[1]} haplotype frequencies, got {htfs.size}")
    mask, counts, _ = _compatibility(g)
    probs = mask @ hwe_diplotype_freqs(htfs)
    if np.any(probs <= 0.0):
        return float("-inf")
    return float(np.sum(counts * np.log(probs)))


def _em_step(htfs: np.ndarray, mask: np.ndarray, counts: np.ndarray, contrib: np.ndarray) -> np.ndarray:
    weights = mask * hwe_diplotype_freqs(htfs)[None, :]
    totals = weights.sum(axis=1, keepdims=True)
    degenerate = totals[:, 0] <= 0.0
    if np.any(degenerate):
        logger.warning(f"{int(counts[degenerate].sum())} individuals have zero probability "
                       f"under current frequencies; using uniform posterior")
        weights[degenerate] = mask[degenerate]
        totals[degenerate] = mask[degenerate].sum(axis=1, keepdims=True)
    posterior = weights / totals
    expected = (counts[:, None] * posterior).sum(axis=0) @ contrib
    return expected / expected.sum()


def em_estimate(g, eps: float = 1e-5, max_iter: int = 100) -> EmResult:
    """
    Maximum-likelihood haplotype frequencies by EM from uniform start.

    Args:
        g: genotype matrix (n, K), entries in {0, 1, 2}
        eps: stop once max |new - old| <= eps
        max_iter: upper bound on EM updates

    Returns:
        EmResult; converged is True iff the last update moved no component
        by more than eps.
    """
    g = validate_genotypes(g)
    mask, counts, contrib = _compatibility(g)
    n_haplotypes = contrib.shape[1]
    htfs = np.full(n_haplotypes, 1.0 / n_haplotypes)
    trace = [observed_loglik(g, htfs)]

    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        updated = _em_step(htfs, mask, counts, contrib)
        delta = float(np.max(np.abs(updated - htfs)))
        htfs = updated
        trace.append(observed_loglik(g, htfs))
        if delta <= eps:
            converged = True
            break

    if not converged:
        logger.warning(f"EM did not converge in {max_iter} iterations (eps {eps})")
    logger.debug(f"EM finished after {iterations} iterations on {g.shape[0]} individuals")
    return EmResult(htfs, converged, iterations, eps, trace)


def em_estimator(batch) -> np.ndarray:
    """EM estimates for every dataset of a genotype batch (b, n, K)."""
    batch = np.asarray(batch)
    return np.stack([em_estimate(np.rint(dataset)).htfs for dataset in batch])


# ==================== CSV ====================

def read_genotypes(path: str) -> np.ndarray:
    """Read columns g1..gK (integer cells) from a CSV file."""
    try:
        frame = pd.read_csv(path)
        columns = sorted((c for c in frame.columns if GENOTYPE_COLUMN.match(str(c))),
                         key=lambda c: int(GENOTYPE_COLUMN.match(c).group(1)))
        expected = [f"g{i}" for i in range(1, len(columns) + 1)]
        if not columns or columns != expected:
            raise InputError(f"genotype table needs columns g1..gK, found {list(frame.columns)}")
        values = frame[columns].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
        return validate_genotypes(values)
    except Exception as e:
        logger.error(f"Failed to read genotypes from {path}: {e}")
        raise


def em_result_frame(result: EmResult) -> pd.DataFrame:
    row = {f"htf_{h}": value for h, value in enumerate(result.htfs)}
    row["converged"] = result.converged
    row["iterations"] = result.iterations
    return pd.DataFrame([row])
