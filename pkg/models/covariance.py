"""
Covariance building blocks shared by the generators and the likelihoods.

RandomEffectSpec describes the stacked subject effects (b, u) and yields Psi.
ResidualSpec describes the 2x2 cross-response matrix Lambda and the temporal
correlation family of Omega. Torch counterparts at the bottom are used inside
the batched likelihoods.
"""
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

from utils import logging
logger = logging.getLogger(__name__)

# Constants
CORR_FAMILIES = ("iid", "exponential")
_SYMMETRY_TOL = 1e-12

class CovarianceError(ValueError):
    """Raised for matrices that are not valid covariance/correlation matrices.

    minor_index is the 1-based size of the first leading minor that is not
    positive definite, pair the index pair of duplicated visit times.
    """
    def __init__(self, message, minor_index=None, pair=None):
        super(CovarianceError, self).__init__(message)
        self.minor_index = minor_index
        self.pair = pair

def _first_failing_minor(matrix):
    """1-based index of the first leading principal minor that is not PD, else None."""
    for k in range(1, matrix.shape[0] + 1):
        try:
            np.linalg.cholesky(matrix[:k, :k])
        except np.linalg.LinAlgError:
            return k
    return None

@dataclass(frozen=True, eq=False)
class RandomEffectSpec:
    names: Tuple[str, ...]
    sds: Tuple[float, ...]
    corr: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        object.__setattr__(self, "sds", tuple(float(s) for s in self.sds))
        q = len(self.names)
        corr = np.eye(q) if self.corr is None else np.array(self.corr, dtype=float)
        corr.setflags(write=False)
        object.__setattr__(self, "corr", corr)

    @property
    def dim(self):
        return len(self.names)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            logger.error("Random effect {0} not in {1}".format(name, self.names))
            raise

    @classmethod
    def from_config(cls, cfg):
        """Builds a spec from ``names``, ``sds`` and a list of ``[a, b, corr]`` triples."""
        names = list(cfg["names"])
        corr = np.eye(len(names))
        for entry in (cfg.get("corr", None) or []):
            a, b, value = entry
            i, j = names.index(str(a)), names.index(str(b))
            corr[i, j] = corr[j, i] = float(value)
        return cls(names=tuple(names), sds=tuple(cfg["sds"]), corr=corr)

    def with_correlation(self, a, b, value):
        corr = np.array(self.corr)
        i, j = self.index(a), self.index(b)
        corr[i, j] = corr[j, i] = float(value)
        return RandomEffectSpec(names=self.names, sds=self.sds, corr=corr)

    def scaled(self, variance_divisor):
        """All variances divided by variance_divisor, correlations kept."""
        assert variance_divisor > 0, "Variance divisor must be positive"
        factor = 1.0 / math.sqrt(variance_divisor)
        return RandomEffectSpec(names=self.names, sds=tuple(s * factor for s in self.sds), corr=self.corr)

    def sub_spec(self, names):
        idx = [self.index(n) for n in names]
        return RandomEffectSpec(names=tuple(names), sds=tuple(self.sds[i] for i in idx),
                                corr=self.corr[np.ix_(idx, idx)])

def check_correlation(corr):
    """Validates a correlation matrix; raises CovarianceError with the failing minor."""
    corr = np.asarray(corr, dtype=float)
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
        raise CovarianceError("Correlation matrix must be square, got shape {0}".format(corr.shape))
    if np.any(np.abs(corr - corr.T) > _SYMMETRY_TOL):
        raise CovarianceError("Correlation matrix is not symmetric")
    if np.any(np.abs(np.diag(corr) - 1.0) > _SYMMETRY_TOL):
        raise CovarianceError("Correlation matrix needs a unit diagonal")
    if np.any(np.abs(corr) > 1.0):
        bad = np.argwhere(np.abs(corr) > 1.0)[0]
        raise CovarianceError("Not a correlation matrix: |corr[{0},{1}]| = {2} > 1".format(
            bad[0], bad[1], abs(corr[bad[0], bad[1]])), minor_index=int(max(bad)) + 1)
    minor = _first_failing_minor(corr)
    if minor is not None:
        raise CovarianceError("Correlation matrix is not positive definite (leading minor {0})".format(minor),
                              minor_index=minor)
    return corr

def build_psi(spec, allow_degenerate=False):
    """Psi = D corr D for D = diag(sds).

    Args:
        spec (RandomEffectSpec): stacked random-effect specification
        allow_degenerate (bool): accept zero standard deviations (positive
            semi-definite result), used by the generators only

    Returns:
        psi (ndarray): exactly symmetric covariance matrix
    """
    sds = np.asarray(spec.sds, dtype=float)
    if spec.corr.shape != (len(sds), len(sds)):
        logger.error("Random effect spec has {0} sds but corr of shape {1}".format(len(sds), spec.corr.shape))
        raise CovarianceError("Dimensions of sds and corr disagree")
    if np.any(sds < 0) or (not allow_degenerate and np.any(sds <= 0)):
        raise CovarianceError("Random effect standard deviations must be positive: {0}".format(spec.sds))
    corr = check_correlation(spec.corr)
    psi = np.outer(sds, sds) * corr
    if not allow_degenerate:
        minor = _first_failing_minor(psi)
        if minor is not None:
            raise CovarianceError("Psi is not positive definite (leading minor {0})".format(minor),
                                  minor_index=minor)
    return psi

@dataclass(frozen=True)
class ResidualSpec:
    sigma_eps: float
    sigma_zeta: float = 1.0
    rho_eps: float = 0.0
    corr_family: str = "iid"
    range_d: Optional[float] = None
    nugget_c0: float = 0.0

    def __post_init__(self):
        if self.sigma_eps <= 0 or self.sigma_zeta <= 0:
            raise ValueError("Residual standard deviations must be positive")
        if not -1.0 < self.rho_eps < 1.0:
            raise ValueError("rho_eps must lie in (-1, 1), got {0}".format(self.rho_eps))
        if self.corr_family not in CORR_FAMILIES:
            raise ValueError("Unknown correlation family {0}, choose from {1}".format(self.corr_family, CORR_FAMILIES))
        if self.corr_family == "exponential":
            if self.range_d is None or self.range_d <= 0:
                raise ValueError("Exponential family needs a positive range_d")
            if not 0.0 <= self.nugget_c0 < 1.0:
                raise ValueError("nugget_c0 must lie in [0, 1), got {0}".format(self.nugget_c0))

    @classmethod
    def from_config(cls, cfg):
        return cls(sigma_eps=float(cfg["sigma_eps"]),
                   sigma_zeta=float(cfg.get("sigma_zeta", 1.0)),
                   rho_eps=float(cfg.get("rho_eps", 0.0)),
                   corr_family=str(cfg.get("corr_family", "iid")),
                   range_d=None if cfg.get("range_d", None) is None else float(cfg["range_d"]),
                   nugget_c0=float(cfg.get("nugget_c0", 0.0) or 0.0))

    def lambda_matrix(self):
        cross = self.rho_eps * self.sigma_eps * self.sigma_zeta
        return np.array([[self.sigma_eps ** 2, cross], [cross, self.sigma_zeta ** 2]])

    def omega(self, times):
        if self.corr_family == "iid":
            times = np.asarray(times, dtype=float)
            return OmegaMatrix(times=tuple(times), range_d=None, nugget_c0=0.0, entries=np.eye(len(times)))
        return omega_exponential(times, self.range_d, self.nugget_c0)

@dataclass(frozen=True, eq=False)
class OmegaMatrix:
    times: Tuple[float, ...]
    range_d: Optional[float]
    nugget_c0: float
    entries: np.ndarray = field(repr=False)

    @property
    def size(self):
        return len(self.times)

def exponential_correlation(lags, d, c0):
    """(1-c0) exp(-|lag|/d) away from lag zero."""
    return (1.0 - c0) * np.exp(-np.abs(lags) / d)

def omega_exponential(times, d, c0):
    """Exponential temporal correlation with a multiplicative nugget.

    Unit diagonal, entry (i,j) = (1-c0) exp(-|t_i-t_j|/d) for i != j.
    """
    times = np.asarray(times, dtype=float)
    if not d > 0:
        raise ValueError("Range d must be positive, got {0}".format(d))
    if not 0.0 <= c0 < 1.0:
        raise ValueError("Nugget c0 must lie in [0, 1), got {0}".format(c0))
    if not np.all(np.isfinite(times)):
        raise ValueError("Visit times must be finite")
    if c0 == 0.0:
        order = np.argsort(times, kind="stable")
        gaps = np.diff(times[order])
        if np.any(gaps == 0.0):
            k = int(np.flatnonzero(gaps == 0.0)[0])
            pair = tuple(sorted((int(order[k]), int(order[k + 1]))))
            logger.error("Duplicate visit times at indices {0} make Omega singular".format(pair))
            raise CovarianceError("Duplicate visit times at indices {0} with c0=0".format(pair), pair=pair)
    entries = exponential_correlation(times[:, None] - times[None, :], d, c0)
    np.fill_diagonal(entries, 1.0)
    try:
        np.linalg.cholesky(entries)
    except np.linalg.LinAlgError:
        raise CovarianceError("Omega is not positive definite for d={0}, c0={1}".format(d, c0),
                              minor_index=_first_failing_minor(entries))
    entries.setflags(write=False)
    return OmegaMatrix(times=tuple(times), range_d=float(d), nugget_c0=float(c0), entries=entries)

def assemble_sigma(lambda_, omega):
    """Residual covariance Lambda (x) Omega_i.

    Index ordering is (response, visit): block (a, b) of size n_i x n_i equals
    Lambda[a, b] * Omega_i, so the stacked residual vector is (eps_i, zeta_i).
    """
    lam = np.asarray(lambda_, dtype=float)
    entries = omega.entries if isinstance(omega, OmegaMatrix) else np.asarray(omega, dtype=float)
    if lam.shape != (2, 2):
        raise ValueError("Lambda must be 2x2, got shape {0}".format(lam.shape))
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
        raise ValueError("Omega must be square, got shape {0}".format(entries.shape))
    for name, mat in (("Lambda", lam), ("Omega", entries)):
        try:
            np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            raise CovarianceError("{0} is not positive definite".format(name), minor_index=_first_failing_minor(mat))
    return np.kron(lam, entries)

# Unconstrained parameterisation of correlation matrices. Canonical partial
# correlations z in (-1,1) are mapped onto a Cholesky factor row by row, so
# every real vector gives a valid correlation matrix. For two effects the
# single entry is the correlation itself.

def n_correlations(dim):
    return dim * (dim - 1) // 2

def corr_cholesky(raw, dim):
    """Lower Cholesky factor of the correlation matrix for atanh-scale partial correlations."""
    if dim == 0:
        return raw.new_zeros((0, 0))
    z = torch.tanh(raw)
    rows = [torch.cat([raw.new_ones(1), raw.new_zeros(dim - 1)])]
    k = 0
    for i in range(1, dim):
        entries = []
        remaining = raw.new_ones(())
        for j in range(i):
            value = z[k] * torch.sqrt(remaining)
            entries.append(value)
            remaining = remaining - value ** 2
            k += 1
        entries.append(torch.sqrt(remaining))
        if i + 1 < dim:
            entries.append(raw.new_zeros(dim - i - 1))
        rows.append(torch.cat([e.reshape(-1) for e in entries]))
    return torch.stack(rows)

def corr_from_raw(raw, dim):
    chol = corr_cholesky(raw, dim)
    corr = chol @ chol.T
    return corr

def raw_from_corr(corr, clip=0.999999):
    """Inverse of corr_cholesky: atanh partial correlations for a PD correlation matrix."""
    corr = np.asarray(corr, dtype=float)
    dim = corr.shape[0]
    if dim < 2:
        return np.zeros(0)
    chol = np.linalg.cholesky(corr)
    raw = []
    for i in range(1, dim):
        remaining = 1.0
        for j in range(i):
            z = chol[i, j] / math.sqrt(max(remaining, 1e-300))
            z = float(np.clip(z, -clip, clip))
            raw.append(math.atanh(z))
            remaining -= chol[i, j] ** 2
    return np.array(raw)

def masked_omega(times, mask, family, range_d=None, nugget_c0=None):
    """Batched Omega for padded visit times, zero on padded rows and columns.

    Args:
        times (tensor): (M, n) visit times, padded entries arbitrary
        mask (tensor): (M, n) 1 for observed visits, 0 for padding
        family (str): iid or exponential
    """
    n = times.shape[-1]
    eye = torch.eye(n, dtype=times.dtype, device=times.device)
    pair_mask = mask.unsqueeze(-1) * mask.unsqueeze(-2)
    if family == "iid":
        return eye * pair_mask
    lags = torch.abs(times.unsqueeze(-1) - times.unsqueeze(-2))
    off = (1.0 - nugget_c0) * torch.exp(-lags / range_d)
    omega = torch.where(eye.bool(), torch.ones_like(off), off)
    return omega * pair_mask

def kron_lambda_omega(lam, omega):
    """Batched Lambda (x) Omega with (response, visit) ordering: (M, 2n, 2n)."""
    m, n, _ = omega.shape
    blocks = lam.view(1, 2, 1, 2, 1) * omega.view(m, 1, n, 1, n)
    return blocks.reshape(m, 2 * n, 2 * n)
