"""Information quantity of a training set and replay budget allocation.

InfoQ is the effective rank of the Gaussian kernel matrix of a set's
features, normalised by the number of samples. Budgets are split across
training sets with a temperature softmax over InfoQ values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import svdvals


@dataclass
class InfoQRecord:
    domain_id: int
    info_q: float
    n_used: int
    effective_rank: int
    gamma_k: float = 0.2
    epsilon: float = 1e-6

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "InfoQRecord":
        return cls(**raw)


@dataclass
class AllocationResult:
    sizes: list[int]
    k_total: int
    tau: float


def squared_distances(features: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    sq = (f * f).sum(1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (f @ f.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return 0.5 * (d2 + d2.T)


def kernel_matrix(features, gamma_k: float = 0.2) -> np.ndarray:
    """Gaussian kernel ``A_ij = exp(-gamma_k * ||f_i - f_j||^2)``."""
    try:
        f = np.asarray(features, dtype=np.float64)
    except ValueError as exc:
        raise ValueError("feature vectors must share one dimension") from exc
    if f.ndim != 2 or f.shape[0] < 1:
        raise ValueError(f"expected an (n, D) feature array with n >= 1, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("features contain non-finite values")
    if gamma_k <= 0:
        raise ValueError("gamma_k must be > 0")
    return np.exp(-gamma_k * squared_distances(f))


def median_gamma(features: np.ndarray) -> float:
    """Median heuristic bandwidth 1 / median of off-diagonal squared distances."""
    d2 = squared_distances(features)
    iu = np.triu_indices(len(d2), 1)
    med = float(np.median(d2[iu])) if len(iu[0]) else 0.0
    return 1.0 / med if med > 0 else 1.0


def effective_rank(A: np.ndarray, epsilon: float = 1e-6) -> int:
    """Number of singular values at least ``epsilon`` times the largest."""
    A = np.asarray(A, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    s = svdvals(A)
    if s.size == 0 or s[0] == 0:
        raise ValueError("effective rank is undefined for an all-zero matrix")
    return int(np.count_nonzero(s >= epsilon * s[0]))


def info_quantity_from_features(features: np.ndarray, domain_id: int = 0,
                                gamma_k: float = 0.2, epsilon: float = 1e-6,
                                cap: int = 2048, seed: int = 0,
                                use_median: bool = False) -> InfoQRecord:
    f = np.asarray(features, dtype=np.float64)
    if cap < 2:
        raise ValueError("cap must be >= 2")
    n = len(f)
    if n > cap:
        rng = np.random.default_rng(seed)
        f = f[np.sort(rng.choice(n, cap, replace=False))]
    if use_median:
        gamma_k = median_gamma(f)
    rank = effective_rank(kernel_matrix(f, gamma_k), epsilon)
    return InfoQRecord(domain_id, rank / len(f), len(f), rank, float(gamma_k), float(epsilon))


def info_quantity(dataset, model, cap: int = 2048, gamma_k: float = 0.2,
                  epsilon: float = 1e-6, seed: int = 0, use_median: bool = False) -> InfoQRecord:
    """InfoQ of ``dataset.train`` under the descriptors produced by ``model``."""
    from .data import stack_points
    from .encoder import embed

    feats = embed(model, stack_points(dataset.train))
    return info_quantity_from_features(feats, dataset.domain_id, gamma_k, epsilon, cap,
                                       seed, use_median)


def allocate_sizes(records, k_total: int, tau: float = 4.0) -> AllocationResult:
    """Split ``k_total`` replay slots with a softmax over InfoQ / tau.

    Real-valued shares are rounded by the largest-remainder method. Ties among
    remainders go to the larger InfoQ, then to the earlier set.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if k_total < 0:
        raise ValueError("k_total must be >= 0")
    q = np.array([r.info_q if isinstance(r, InfoQRecord) else float(r) for r in records])
    if q.size == 0:
        raise ValueError("need at least one record")
    z = (q - q.max()) / tau
    w = np.exp(z)
    share = k_total * w / w.sum()
    base = np.floor(share).astype(int)
    # guard against floor overshoot from rounding in the shares
    while base.sum() > k_total:
        base[np.argmax(base)] -= 1
    rem = share - base
    left = k_total - int(base.sum())
    order = sorted(range(len(q)), key=lambda i: (-rem[i], -q[i], i))
    for i in order[:left]:
        base[i] += 1
    return AllocationResult([int(b) for b in base], int(k_total), float(tau))


def uniform_sizes(n_sets: int, k_total: int, info_q=None) -> AllocationResult:
    """Equal split; the ``k_total % n_sets`` extra slots go to the largest InfoQ.

    This matches the large-temperature limit of ``allocate_sizes``, including
    its tie order (larger InfoQ, then the earlier set). Without ``info_q`` the
    earliest sets get the extras.
    """
    if n_sets < 1:
        raise ValueError("need at least one set")
    base, extra = divmod(k_total, n_sets)
    q = [0.0] * n_sets if info_q is None else \
        [r.info_q if isinstance(r, InfoQRecord) else float(r) for r in info_q]
    if len(q) != n_sets:
        raise ValueError("info_q must have one value per set")
    order = sorted(range(n_sets), key=lambda i: (-q[i], i))
    sizes = [base] * n_sets
    for i in order[:extra]:
        sizes[i] += 1
    return AllocationResult(sizes, k_total, float("inf"))
