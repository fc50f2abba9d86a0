"""
Bivariate (Y, R) mixed model with separable residual covariance.

    Y_ij = X_ij'beta  + Z_ij'b_i + eps_ij
    R_ij = G_ij'alpha + L_ij'u_i + zeta_ij
    (b_i, u_i) ~ N(0, Psi),  cov(eps_i, zeta_i) = Lambda (x) Omega_i

The stacked per-subject response is (y_i, r_i) of length 2 n_i with the
(response, visit) ordering of assemble_sigma. R enters in reduced form: its
fixed effects are functions of time and baseline covariates only, Y is never
a regressor.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
from scipy.special import logit

from data.panel import DTYPE, PaddedPanel
from models.covariance import (CORR_FAMILIES, RandomEffectSpec, ResidualSpec, kron_lambda_omega,
                               masked_omega, n_correlations)
from models.lmm import LmmSpec, beta_tensor, check_design
from models.mixedModelBase import MixedModelBase, corr_key, masked_identity, sd_key

from utils import logging
logger = logging.getLogger(__name__)

# bounds of the temporal correlation parameters
RANGE_BOUNDS = (1e-3, 1e2)
NUGGET_MAX = 0.95
_LOG_RANGE = (math.log(RANGE_BOUNDS[0]), math.log(RANGE_BOUNDS[1]))

def y_name(term):
    return "y:{0}".format(term)

def r_name(term):
    return "r:{0}".format(term)

@dataclass(frozen=True, eq=False)
class JointSpec:
    y_fixed: Tuple[str, ...]
    r_fixed: Tuple[str, ...]
    y_random: Tuple[str, ...] = ("intercept",)
    r_random: Tuple[str, ...] = ("intercept",)
    corr_family: str = "exponential"
    decay_rate: Optional[float] = None
    re_spec: Optional[RandomEffectSpec] = None
    residual: Optional[ResidualSpec] = None

    def __post_init__(self):
        for name in ("y_fixed", "r_fixed", "y_random", "r_random"):
            object.__setattr__(self, name, tuple(str(t) for t in getattr(self, name)))
        if self.corr_family not in CORR_FAMILIES:
            raise ValueError("Unknown correlation family {0}, choose from {1}".format(self.corr_family, CORR_FAMILIES))
        if self.residual is not None and self.residual.corr_family != self.corr_family:
            raise ValueError("Residual spec family {0} disagrees with {1}".format(self.residual.corr_family, self.corr_family))
        if self.re_spec is not None and self.re_spec.dim != len(self.y_random) + len(self.r_random):
            raise ValueError("Random-effect spec has {0} components for {1} stacked random terms".format(
                self.re_spec.dim, len(self.y_random) + len(self.r_random)))
        # both submodels validate their own terms
        self.y_spec()
        self.r_spec()

    @property
    def stacked_names(self):
        return [y_name(t) for t in self.y_random] + [r_name(t) for t in self.r_random]

    def y_spec(self):
        return LmmSpec(fixed=self.y_fixed, random=self.y_random, response="y", decay_rate=self.decay_rate)

    def r_spec(self):
        return LmmSpec(fixed=self.r_fixed, random=self.r_random, response="r", decay_rate=self.decay_rate)

    def natural_params(self):
        """Natural variance parameters implied by re_spec and residual."""
        assert self.re_spec is not None and self.residual is not None, "JointSpec without re_spec/residual"
        names = self.stacked_names
        params = OrderedDict()
        for name, sd in zip(names, self.re_spec.sds):
            params[sd_key(name)] = sd
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                params[corr_key(names[i], names[j])] = float(self.re_spec.corr[i, j])
        params["sigma_eps"] = self.residual.sigma_eps
        params["sigma_zeta"] = self.residual.sigma_zeta
        params["rho_eps"] = self.residual.rho_eps
        if self.corr_family == "exponential":
            params["range_d"] = self.residual.range_d
            params["nugget_c0"] = self.residual.nugget_c0
        return params

    @classmethod
    def from_config(cls, cfg):
        return cls(y_fixed=tuple(cfg["y_fixed"]), r_fixed=tuple(cfg["r_fixed"]),
                   y_random=tuple(cfg.get("y_random", ["intercept"]) or ()),
                   r_random=tuple(cfg.get("r_random", ["intercept"]) or ()),
                   corr_family=str(cfg.get("corr_family", "exponential")),
                   decay_rate=None if cfg.get("decay_rate", None) is None else float(cfg["decay_rate"]))

    def to_dict(self):
        return {"model_type": "joint", "y_fixed": list(self.y_fixed), "r_fixed": list(self.r_fixed),
                "y_random": list(self.y_random), "r_random": list(self.r_random),
                "corr_family": self.corr_family, "decay_rate": self.decay_rate}

    def with_decay_rate(self, decay_rate):
        return JointSpec(y_fixed=self.y_fixed, r_fixed=self.r_fixed, y_random=self.y_random,
                         r_random=self.r_random, corr_family=self.corr_family, decay_rate=decay_rate,
                         re_spec=self.re_spec, residual=self.residual)

def _block_design(top, bottom):
    """Stacks (M,n,p) and (M,n,k) designs into the (M,2n,p+k) block-diagonal layout."""
    m, n, p = top.shape
    k = bottom.shape[-1]
    upper = torch.cat([top, top.new_zeros((m, n, k))], dim=-1)
    lower = torch.cat([bottom.new_zeros((m, n, p)), bottom], dim=-1)
    return torch.cat([upper, lower], dim=1)

class JointModel(MixedModelBase):

    def __init__(self, panel, spec, **kwargs):
        super(JointModel, self).__init__(panel, spec, **kwargs)
        self._model_type = "joint"
        if not panel.dataset.has_r:
            logger.error("Joint model needs R at every visit; use fit_lmm for Y alone")
            raise ValueError("Dataset has no recommended intervals R; the univariate fit_lmm does not need them")
        check_design(panel, spec.y_fixed, spec.y_random, spec.decay_rate)
        check_design(panel, spec.r_fixed, spec.r_random, spec.decay_rate)

        mask = panel.mask()
        stacked_mask = torch.cat([mask, mask], dim=-1)
        self.register_buffer("_y", torch.cat([panel.response("y"), panel.response("r")], dim=-1))
        self.register_buffer("_x", _block_design(panel.design(spec.y_fixed, spec.decay_rate),
                                                 panel.design(spec.r_fixed, spec.decay_rate)))
        self.register_buffer("_z", _block_design(panel.design(spec.y_random, spec.decay_rate),
                                                 panel.design(spec.r_random, spec.decay_rate)))
        self.register_buffer("_times", panel.times())
        self.register_buffer("_mask", mask)
        self.register_buffer("_pad", 1.0 - stacked_mask)
        self._n_obs = 2 * panel.n_obs

        q = len(self.re_names)
        blocks = OrderedDict(re_log_sd=q, re_corr=n_correlations(q), log_sigma_eps=1, log_sigma_zeta=1, atanh_rho=1)
        if spec.corr_family == "exponential":
            blocks.update(range_raw=1, nugget_raw=1)
        self._declare(**blocks)

    @property
    def beta_names(self):
        return [y_name(t) for t in self._spec.y_fixed] + [r_name(t) for t in self._spec.r_fixed]

    @property
    def re_names(self):
        return self._spec.stacked_names

    def _temporal(self, raw):
        if self._spec.corr_family != "exponential":
            return None, None
        frac = torch.sigmoid(self._piece(raw, "range_raw"))[0]
        range_d = torch.exp(_LOG_RANGE[0] + (_LOG_RANGE[1] - _LOG_RANGE[0]) * frac)
        nugget = NUGGET_MAX * torch.sigmoid(self._piece(raw, "nugget_raw"))[0]
        return range_d, nugget

    def lambda_matrix(self, raw=None):
        raw = self._current(raw)
        s_eps = torch.exp(self._piece(raw, "log_sigma_eps"))[0]
        s_zeta = torch.exp(self._piece(raw, "log_sigma_zeta"))[0]
        cross = torch.tanh(self._piece(raw, "atanh_rho"))[0] * s_eps * s_zeta
        return torch.stack([torch.stack([s_eps ** 2, cross]), torch.stack([cross, s_zeta ** 2])])

    def covariance(self, raw=None):
        raw = self._current(raw)
        range_d, nugget = self._temporal(raw)
        omega = masked_omega(self._times, self._mask, self._spec.corr_family, range_d, nugget)
        wf = torch.einsum("mlq,qk->mlk", self._z, self.re_factor(raw))
        residual = kron_lambda_omega(self.lambda_matrix(raw), omega)
        return wf @ wf.transpose(-1, -2) + residual + masked_identity(self._pad)

    def natural_params(self, raw=None):
        raw = self._current(raw)
        out = self._re_natural(raw, OrderedDict())
        out["sigma_eps"] = torch.exp(self._piece(raw, "log_sigma_eps"))[0]
        out["sigma_zeta"] = torch.exp(self._piece(raw, "log_sigma_zeta"))[0]
        out["rho_eps"] = torch.tanh(self._piece(raw, "atanh_rho"))[0]
        range_d, nugget = self._temporal(raw)
        if range_d is not None:
            out["range_d"] = range_d
            out["nugget_c0"] = nugget
        return out

    def raw_from_natural(self, params):
        raw = torch.zeros(self.n_raw, dtype=DTYPE)
        self._re_raw(params, raw)
        raw[self._layout["log_sigma_eps"]] = math.log(float(params["sigma_eps"]))
        raw[self._layout["log_sigma_zeta"]] = math.log(float(params["sigma_zeta"]))
        raw[self._layout["atanh_rho"]] = math.atanh(float(np.clip(params.get("rho_eps", 0.0), -0.999999, 0.999999)))
        if self._spec.corr_family == "exponential":
            log_d = math.log(float(np.clip(params["range_d"], *RANGE_BOUNDS)))
            frac = np.clip((log_d - _LOG_RANGE[0]) / (_LOG_RANGE[1] - _LOG_RANGE[0]), 1e-9, 1 - 1e-9)
            raw[self._layout["range_raw"]] = float(logit(frac))
            c0 = np.clip(float(params["nugget_c0"]) / NUGGET_MAX, 1e-6, 1 - 1e-6)
            raw[self._layout["nugget_raw"]] = float(logit(c0))
        return raw

    def decoupled_start(self, y_params, r_params):
        """Raw point reproducing two univariate fits: zero cross-correlations, rho 0, vanishing range.

        At the lower range bound Omega is the identity up to exp(-gap/1e-3), so
        the joint likelihood starts at the sum of the univariate likelihoods.
        """
        params = {}
        for term in self._spec.y_random:
            params[sd_key(y_name(term))] = y_params[sd_key(term)]
        for term in self._spec.r_random:
            params[sd_key(r_name(term))] = r_params[sd_key(term)]
        for block, prefix, source in ((self._spec.y_random, y_name, y_params), (self._spec.r_random, r_name, r_params)):
            for i, a in enumerate(block):
                for b in block[i + 1:]:
                    params[corr_key(prefix(a), prefix(b))] = source.get(corr_key(a, b), 0.0)
        params["sigma_eps"] = y_params["sigma_eps"]
        params["sigma_zeta"] = r_params["sigma_eps"]
        params["rho_eps"] = 0.0
        params["range_d"] = RANGE_BOUNDS[0]
        params["nugget_c0"] = 0.5 * NUGGET_MAX
        raw = self.raw_from_natural(params)
        if self._spec.corr_family == "exponential":
            raw[self._layout["range_raw"]] = -40.0
        return raw

    def start_points(self, base, n_starts):
        starts = super(JointModel, self).start_points(base, n_starts)
        for raw in starts[1:]:
            if self._spec.corr_family == "exponential":
                raw[self._layout["range_raw"]] = 0.0
                raw[self._layout["nugget_raw"]] = 0.0
        return starts

    def moment_start(self):
        obs = self._mask.bool()
        n = self._mask.shape[-1]
        params = {}
        for part, names, sigma in ((0, self._spec.y_random, "sigma_eps"), (1, self._spec.r_random, "sigma_zeta")):
            y = self._y[:, part * n:(part + 1) * n][obs].numpy()
            x = self._x[:, part * n:(part + 1) * n][obs].numpy()
            coef, *_ = np.linalg.lstsq(x, y, rcond=None)
            share = max(float(np.var(y - x @ coef)), 1e-8) / 2.0
            params[sigma] = math.sqrt(share)
            prefix = y_name if part == 0 else r_name
            for name in names:
                params[sd_key(prefix(name))] = math.sqrt(share / max(len(names), 1))
        params["rho_eps"] = 0.0
        params["range_d"] = 0.5
        params["nugget_c0"] = 0.4
        return self.raw_from_natural(params)

def joint_loglik(params, ds, spec):
    """Marginal ML log-likelihood of the joint (Y, R) model.

    Args:
        params (dict): "beta" (mapping keyed "y:<term>"/"r:<term>", or a
            sequence; profiled when absent) plus natural variance parameters;
            JointSpec.natural_params() supplies them from re_spec and residual
        ds (LongitudinalDataset): data with R at every visit
        spec (JointSpec): model specification

    Returns:
        loglik (float), -inf for a non-positive-definite covariance
    """
    model = JointModel(PaddedPanel(ds), spec)
    raw = model.raw_from_natural(params)
    beta = beta_tensor(params["beta"], model.beta_names) if params.get("beta", None) is not None else None
    with torch.no_grad():
        return float(model(raw, beta).loglik)
