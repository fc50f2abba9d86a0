"""
Base class for Gaussian mixed-model likelihoods.

Defines the machinery shared by the univariate and the joint model. Subjects
are stacked into padded batches; padded rows of the design are zero and the
padded block of each covariance is the identity, so padding contributes
nothing to the likelihood. Variance parameters live in one flat unconstrained
vector ``raw`` whose layout is declared by the subclasses.

This class inherits from torch.nn.Module so the raw vector is registered as a
parameter and can be handed to torch.optim directly.
"""
import math
from collections import OrderedDict

import numpy as np
import torch
import torch.nn as nn

from data.panel import DTYPE
from models.covariance import corr_cholesky, raw_from_corr

from utils import logging
logger = logging.getLogger(__name__)

from utils.helpers import OutputContainer

_LOG_2PI = math.log(2.0 * math.pi)

def sd_key(name):
    return "sd({0})".format(name)

def corr_key(a, b):
    return "corr({0},{1})".format(a, b)

class MixedModelBase(nn.Module):
    def __init__(self, panel, spec, **kwargs):
        super(MixedModelBase, self).__init__(**kwargs)
        assert panel.n_subjects > 0, "Empty panel"

        self._model_type = None
        """a short tag identifying the model, univariate or joint"""

        self._panel = panel
        self._spec = spec
        self._layout = OrderedDict()
        self._output_container = OutputContainer()

    def type(self):
        """String identifier for current model.

        Returns:
            model_type: "univariate", "joint"
        """
        return self._model_type

    @property
    def spec(self):
        return self._spec

    @property
    def panel(self):
        return self._panel

    @property
    def n_raw(self):
        return sum(s.stop - s.start for s in self._layout.values())

    @property
    def n_beta(self):
        return len(self.beta_names)

    @property
    def beta_names(self):
        raise NotImplementedError

    @property
    def re_names(self):
        raise NotImplementedError

    def _declare(self, **sizes):
        """Registers the flat raw vector from an ordered list of (block, size)."""
        start = 0
        for name, size in sizes.items():
            self._layout[name] = slice(start, start + size)
            start += size
        self.raw = nn.Parameter(torch.zeros(start, dtype=DTYPE))

    def _piece(self, raw, name):
        return raw[self._layout[name]]

    def _current(self, raw):
        return self.raw if raw is None else raw

    # Random effects: log sds and atanh partial correlations in blocks
    # "re_log_sd" and "re_corr", shared by both models.

    def re_factor(self, raw=None):
        """Lower factor L with L L' = Psi."""
        raw = self._current(raw)
        q = len(self.re_names)
        sds = torch.exp(self._piece(raw, "re_log_sd"))
        chol = corr_cholesky(self._piece(raw, "re_corr"), q)
        return sds.unsqueeze(-1) * chol

    def re_covariance(self, raw=None):
        factor = self.re_factor(raw)
        return factor @ factor.T

    def _re_natural(self, raw, out):
        names = self.re_names
        q = len(names)
        sds = torch.exp(self._piece(raw, "re_log_sd"))
        chol = corr_cholesky(self._piece(raw, "re_corr"), q)
        corr = chol @ chol.T
        for i, name in enumerate(names):
            out[sd_key(name)] = sds[i]
        for i in range(q):
            for j in range(i + 1, q):
                out[corr_key(names[i], names[j])] = corr[i, j]
        return out

    def _re_raw(self, params, raw):
        names = self.re_names
        q = len(names)
        sds = np.array([float(params[sd_key(n)]) for n in names])
        corr = np.eye(q)
        for i in range(q):
            for j in range(i + 1, q):
                corr[i, j] = corr[j, i] = float(params.get(corr_key(names[i], names[j]), 0.0))
        with np.errstate(divide="ignore"):
            raw[self._layout["re_log_sd"]] = torch.as_tensor(np.log(sds), dtype=DTYPE)
        if q > 1:
            raw[self._layout["re_corr"]] = torch.as_tensor(raw_from_corr(corr), dtype=DTYPE)
        return raw

    def natural_params(self, raw=None):
        """Ordered mapping of named variance parameters (differentiable in raw)."""
        raise NotImplementedError

    def raw_from_natural(self, params):
        """Raw vector for a mapping of natural variance parameters."""
        raise NotImplementedError

    def variance_names(self):
        return list(self.natural_params().keys())

    def moment_start(self):
        """Rough raw starting point from least-squares moments."""
        raise NotImplementedError

    def start_points(self, base, n_starts):
        """Multistart raw points: random-effect sds of base scaled by 1, 1/2, 2, 1/4, 4, ..."""
        starts = []
        for k in range(n_starts):
            raw = base.detach().clone()
            exponent = (-1) ** k * ((k + 1) // 2)
            raw[self._layout["re_log_sd"]] += exponent * math.log(2.0)
            starts.append(raw)
        return starts

    # Batched data: subclasses fill these buffers
    #   _y (M, L), _x (M, L, p), _z (M, L, q), _pad (M, L) 1 on padded slots

    def covariance(self, raw=None):
        """(M, L, L) marginal covariance, identity on the padded block."""
        raise NotImplementedError

    def __repr__(self):
        parameter_string = "\n".join(["{0}: {1}".format(key, tuple(val.shape)) if isinstance(val, torch.Tensor)
                                      else "{0}: {1}".format(key, val) for key, val in self.__dict__.items()])
        return parameter_string

    def forward(self, raw=None, beta=None):
        """Marginal Gaussian log-likelihood.

        Args:
            raw (tensor, optional): unconstrained variance parameters,
                the registered parameter by default
            beta (tensor, optional): fixed effects; profiled out by GLS when None

        Returns:
            out (OutputContainer): loglik, beta, valid and the Cholesky factor
        """
        out = self._output_container.clear()
        raw = self._current(raw)
        cov = self.covariance(raw)
        chol, info = torch.linalg.cholesky_ex(cov)
        if bool((info > 0).any()):
            logger.debug("Covariance not positive definite for {0} subjects".format(int((info > 0).sum())))
            out.loglik = raw.sum() * 0.0 - math.inf
            out.beta = beta
            out.valid = False
            out.chol = None
            return out

        x_w = torch.linalg.solve_triangular(chol, self._x, upper=False)
        y_w = torch.linalg.solve_triangular(chol, self._y.unsqueeze(-1), upper=False).squeeze(-1)
        if beta is None:
            gram = torch.einsum("mlp,mlk->pk", x_w, x_w)
            cross = torch.einsum("mlp,ml->p", x_w, y_w)
            beta = torch.linalg.solve(gram, cross)
        resid = y_w - torch.einsum("mlp,p->ml", x_w, beta)
        logdet = 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum()
        out.loglik = -0.5 * (self._n_obs * _LOG_2PI + logdet + (resid ** 2).sum())
        out.beta = beta
        out.valid = True
        out.chol = chol
        return out

    def blups(self, raw=None, beta=None):
        """Conditional means Psi Z' V^-1 (y - X beta), shape (M, q)."""
        raw = self._current(raw)
        out = self.forward(raw, beta)
        assert out.valid, "BLUPs need a positive definite covariance"
        resid = self._y - torch.einsum("mlp,p->ml", self._x, out.beta)
        v_inv_resid = torch.cholesky_solve(resid.unsqueeze(-1), out.chol).squeeze(-1)
        psi = self.re_covariance(raw)
        return torch.einsum("qk,mlk,ml->mq", psi, self._z, v_inv_resid)

    def print_model_info(self):
        logger.info("Model {0}: {1} subjects, {2} observations".format(self._model_type, self._panel.n_subjects, self._n_obs))
        logger.info("Fixed effects: {0}".format(", ".join(self.beta_names)))
        logger.info("Random effects: {0}".format(", ".join(self.re_names) or "none"))
        for key, val in self._layout.items():
            logger.debug("{0}: {1} raw entries".format(key, val.stop - val.start))

def masked_identity(pad):
    """diag(pad) for a (M, L) padding indicator."""
    return torch.diag_embed(pad)