"""
Univariate linear mixed model

Y_i = X_i beta + Z_i b_i + eps_i,  b_i ~ N(0, Psi),  eps_i ~ N(0, sigma_eps^2 I)

fitted by maximum likelihood with beta profiled out. The same class serves the
interval models of the diagnostics through ``response`` = "r" or "s".
"""
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from data.panel import DTYPE, DesignError, PaddedPanel, uses_decay
from models.covariance import n_correlations
from models.mixedModelBase import MixedModelBase, masked_identity

from utils import logging
logger = logging.getLogger(__name__)

RESPONSES = ("y", "r", "s")

@dataclass(frozen=True)
class LmmSpec:
    fixed: Tuple[str, ...]
    random: Tuple[str, ...] = ("intercept",)
    response: str = "y"
    decay_rate: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(str(t) for t in self.fixed))
        object.__setattr__(self, "random", tuple(str(t) for t in self.random))
        if not self.fixed:
            raise ValueError("A mixed model needs at least one fixed term")
        if self.response not in RESPONSES:
            raise ValueError("Unknown response {0}, choose from {1}".format(self.response, RESPONSES))
        if uses_decay(self.fixed + self.random) and not (self.decay_rate and self.decay_rate > 0):
            raise ValueError("Decay terms need a positive decay_rate")

    @classmethod
    def from_config(cls, cfg):
        return cls(fixed=tuple(cfg["fixed"]), random=tuple(cfg.get("random", ["intercept"]) or ()),
                   response=str(cfg.get("response", "y")),
                   decay_rate=None if cfg.get("decay_rate", None) is None else float(cfg["decay_rate"]))

    def to_dict(self):
        return {"model_type": "univariate", "fixed": list(self.fixed), "random": list(self.random),
                "response": self.response, "decay_rate": self.decay_rate}

    def with_decay_rate(self, decay_rate):
        return LmmSpec(fixed=self.fixed, random=self.random, response=self.response, decay_rate=decay_rate)

def check_design(panel, fixed, random, decay_rate=None):
    """Full column rank of X, and Z inside the column space of X."""
    p = len(fixed)
    rank, cond = panel.design_rank(fixed, decay_rate)
    if rank < p:
        logger.error("Fixed design {0} has rank {1} < {2} (condition number {3:.3g})".format(fixed, rank, p, cond))
        raise DesignError("Rank-deficient fixed design {0}".format(list(fixed)), condition_number=cond)
    if random:
        joint_rank, _ = panel.design_rank(tuple(fixed) + tuple(random), decay_rate)
        if joint_rank > rank:
            logger.error("Random terms {0} are not representable from fixed terms {1}".format(random, fixed))
            raise DesignError("Random terms {0} outside the fixed-effect design".format(list(random)))
    return cond

class LinearMixedModel(MixedModelBase):

    def __init__(self, panel, spec, **kwargs):
        super(LinearMixedModel, self).__init__(panel, spec, **kwargs)
        self._model_type = "univariate"
        check_design(panel, spec.fixed, spec.random, spec.decay_rate)

        mask = panel.mask()
        self.register_buffer("_y", panel.response(spec.response))
        self.register_buffer("_x", panel.design(spec.fixed, spec.decay_rate))
        self.register_buffer("_z", panel.design(spec.random, spec.decay_rate))
        self.register_buffer("_mask", mask)
        self.register_buffer("_pad", 1.0 - mask)
        self._n_obs = panel.n_obs

        q = len(spec.random)
        self._declare(re_log_sd=q, re_corr=n_correlations(q), log_sigma=1)

    @property
    def beta_names(self):
        return list(self._spec.fixed)

    @property
    def re_names(self):
        return list(self._spec.random)

    def covariance(self, raw=None):
        raw = self._current(raw)
        sigma = torch.exp(self._piece(raw, "log_sigma"))[0]
        zf = torch.einsum("mlq,qk->mlk", self._z, self.re_factor(raw))
        return zf @ zf.transpose(-1, -2) + masked_identity(sigma ** 2 * self._mask + self._pad)

    def natural_params(self, raw=None):
        raw = self._current(raw)
        out = self._re_natural(raw, OrderedDict())
        out["sigma_eps"] = torch.exp(self._piece(raw, "log_sigma"))[0]
        return out

    def raw_from_natural(self, params):
        raw = torch.zeros(self.n_raw, dtype=DTYPE)
        self._re_raw(params, raw)
        raw[self._layout["log_sigma"]] = math.log(float(params["sigma_eps"]))
        return raw

    def moment_start(self):
        """Splits the OLS residual variance evenly between the random effects and the residual."""
        obs = self._mask.bool()
        x = self._x[obs].numpy()
        y = self._y[obs].numpy()
        coef, *_ = np.linalg.lstsq(x, y, rcond=None)
        resid_var = max(float(np.var(y - x @ coef)), 1e-8)
        share = resid_var / 2.0
        params = {"sigma_eps": math.sqrt(share)}
        z = self._z[obs].numpy()
        for j, name in enumerate(self.re_names):
            scale = max(float(np.sqrt(np.mean(z[:, j] ** 2))), 1e-3)
            params["sd({0})".format(name)] = math.sqrt(share / len(self.re_names)) / scale
        return self.raw_from_natural(params)

def beta_tensor(beta, names):
    """Fixed effects from a mapping or sequence, ordered like names."""
    if isinstance(beta, dict):
        return torch.as_tensor([float(beta[n]) for n in names], dtype=DTYPE)
    beta = torch.as_tensor(np.asarray(beta, dtype=float), dtype=DTYPE)
    assert beta.numel() == len(names), "Expected {0} fixed effects, got {1}".format(len(names), beta.numel())
    return beta

def lmm_loglik(params, ds, spec):
    """Marginal ML log-likelihood of a univariate mixed model.

    Args:
        params (dict): "beta" (mapping or sequence; profiled when absent) and
            the natural variance parameters "sd(<term>)", "corr(<a>,<b>)", "sigma_eps"
        ds (LongitudinalDataset): data
        spec (LmmSpec): model specification

    Returns:
        loglik (float), -inf for a non-positive-definite covariance
    """
    model = LinearMixedModel(PaddedPanel(ds), spec)
    raw = model.raw_from_natural(params)
    beta = beta_tensor(params["beta"], model.beta_names) if params.get("beta", None) is not None else None
    with torch.no_grad():
        return float(model(raw, beta).loglik)
