"""
Fit engine for the mixed models.

Maximises the marginal likelihood with L-BFGS (strong Wolfe line search) from
several starting points, then derives standard errors from the observed
information. Non-convergence never raises; it is reported on the FitResult.
"""
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Tuple

import pandas as pd
import torch

from data.panel import PaddedPanel
from engine.engineBase import EngineBase
from models.lmm import beta_tensor
from models.modelCreator import ModelCreator, spec_from_dict

from utils import logging
logger = logging.getLogger(__name__)

@dataclass
class FitResult:
    model_type: str
    spec: Dict
    beta: Dict[str, float]
    variance: Dict[str, float]
    loglik: float = float("nan")
    se_beta: Dict[str, float] = field(default_factory=dict)
    se_variance: Dict[str, float] = field(default_factory=dict)
    converged: bool = False
    iterations: int = 0
    grad_norm: float = float("nan")
    n_subjects: int = 0
    n_obs: int = 0
    n_starts: int = 0
    raw: Tuple[float, ...] = ()
    message: str = ""

    def estimate(self, name):
        """Fixed effect by term name; joint results also answer to the bare Y term."""
        if name in self.beta:
            return self.beta[name]
        if "y:{0}".format(name) in self.beta:
            return self.beta["y:{0}".format(name)]
        logger.error("Fixed effect {0} not in {1}".format(name, list(self.beta)))
        raise KeyError(name)

    def se(self, name):
        key = name if name in self.se_beta else "y:{0}".format(name)
        return self.se_beta.get(key, float("nan"))

    def to_dict(self):
        out = asdict(self)
        out["raw"] = list(self.raw)
        return out

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        values["raw"] = tuple(values.get("raw", ()))
        return cls(**values)

class FitEngine(EngineBase):

    def __init__(self, cfg=None, tol=1e-6, max_iter=500, n_starts=3, history_size=20, fd_step=1e-5,
                 n_polish=5, **kwargs):
        logger.info("Setting up fit engine.")
        super(FitEngine,self).__init__(cfg, **kwargs)
        assert n_starts >= 1, "Need at least one start"
        self._tol = float(tol)
        self._max_iter = int(max_iter)
        self._n_starts = int(n_starts)
        self._history_size = int(history_size)
        self._fd_step = float(fd_step)
        self._n_polish = int(n_polish)
        self.model_creator = ModelCreator(cfg)

    @property
    def tol(self):
        return self._tol

    def settings(self):
        return {"tol": self._tol, "max_iter": self._max_iter, "n_starts": self._n_starts,
                "history_size": self._history_size, "fd_step": self._fd_step, "n_polish": self._n_polish}

    def fit_lmm(self, ds, spec):
        """ML fit of a univariate mixed model (LmmSpec)."""
        if ds.n_subjects < 2:
            logger.error("A mixed-model fit needs at least 2 subjects, got {0}".format(ds.n_subjects))
            raise ValueError("Too few subjects")
        self.model = self.model_creator.init_model(PaddedPanel(ds), spec)
        base = self.model.moment_start()
        return self.fit(self.model, self.model.start_points(base, self._n_starts))

    def fit_joint(self, ds, spec, y_fit=None, r_fit=None):
        """ML fit of the joint (Y, R) model (JointSpec).

        The first start reproduces the separate univariate fits of Y and R,
        so the joint log-likelihood never ends below their sum.
        """
        if not ds.has_r:
            logger.error("fit_joint needs R at every visit; fit Y alone with fit_lmm")
            raise ValueError("Dataset has no recommended intervals R")
        if y_fit is None:
            y_fit = self.fit_lmm(ds, spec.y_spec())
        if r_fit is None:
            r_fit = self.fit_lmm(ds, spec.r_spec())
        self.model = self.model_creator.init_model(PaddedPanel(ds), spec)
        base = self.model.decoupled_start(y_fit.variance, r_fit.variance)
        result = self.fit(self.model, self.model.start_points(base, self._n_starts))
        decoupled = y_fit.loglik + r_fit.loglik
        if result.loglik < decoupled - 1e-6:
            logger.warning("Joint log-likelihood {0:.6f} below the decoupled fits {1:.6f}".format(result.loglik, decoupled))
        return result

    def _objective(self, model):
        return -model().loglik / model.panel.n_subjects

    def _grad_norm(self, model):
        model.zero_grad()
        loss = self._objective(model)
        if not torch.isfinite(loss):
            return math.inf
        loss.backward()
        return float(model.raw.grad.abs().max()) if model.raw.numel() else 0.0

    def _optimise(self, model, start):
        with torch.no_grad():
            model.raw.copy_(start)
            initial = model().loglik
        if not torch.isfinite(initial):
            logger.warning("Start point has a non-finite log-likelihood; skipped")
            return {"raw": start.clone(), "loglik": -math.inf, "grad_norm": math.inf, "iterations": 0, "converged": False}
        if model.raw.numel() == 0:
            return {"raw": start.clone(), "loglik": float(initial), "grad_norm": 0.0, "iterations": 0, "converged": True}

        self.optimiser = torch.optim.LBFGS([model.raw], lr=1.0, max_iter=self._max_iter,
                                           history_size=self._history_size, tolerance_grad=self._tol,
                                           tolerance_change=1e-12, line_search_fn="strong_wolfe")

        def closure():
            self.optimiser.zero_grad()
            loss = self._objective(model)
            if torch.isfinite(loss):
                loss.backward()
            return loss

        last_good = model.raw.detach().clone()
        grad_norm = math.inf
        for _ in range(self._n_polish):
            self.optimiser.step(closure)
            if not torch.isfinite(model.raw).all():
                logger.warning("Optimiser left the finite parameter region; restoring last finite point")
                with torch.no_grad():
                    model.raw.copy_(last_good)
                grad_norm = self._grad_norm(model)
                break
            last_good = model.raw.detach().clone()
            grad_norm = self._grad_norm(model)
            if grad_norm < self._tol:
                break
            if self.optimiser.state[model.raw].get("n_iter", 0) >= self._max_iter:
                break
        with torch.no_grad():
            loglik = float(model().loglik)
        iterations = int(self.optimiser.state[model.raw].get("n_iter", 0))
        return {"raw": model.raw.detach().clone(), "loglik": loglik, "grad_norm": grad_norm,
                "iterations": iterations, "converged": bool(grad_norm < self._tol and math.isfinite(loglik))}

    def fit(self, model, starts):
        """Multistart maximisation; the best log-likelihood wins.

        Args:
            model (MixedModelBase): model with data attached
            starts (list of tensor): raw starting points

        Returns:
            result (FitResult)
        """
        best = None
        for k, start in enumerate(starts):
            outcome = self._optimise(model, start)
            logger.debug("Start {0}: loglik {1:.6f}, |grad| {2:.2e}, {3} iterations".format(
                k, outcome["loglik"], outcome["grad_norm"], outcome["iterations"]))
            if best is None or outcome["loglik"] > best["loglik"]:
                best = outcome
        with torch.no_grad():
            model.raw.copy_(best["raw"])
        result = self.evaluate(model, best)
        result.n_starts = len(starts)
        if not result.converged:
            logger.warning("{0} fit did not converge: |grad| {1:.3g} after {2} iterations".format(
                model.type(), result.grad_norm, result.iterations))
        return result

    def _hessian(self, model, beta, raw):
        """Central differences of the autograd gradient over (beta, raw)."""
        p = beta.numel()
        theta0 = torch.cat([beta.detach(), raw.detach()])

        def gradient(theta):
            theta = theta.clone().requires_grad_(True)
            loglik = model(theta[p:], theta[:p]).loglik
            if not torch.isfinite(loglik):
                return torch.full_like(theta, math.nan)
            grad, = torch.autograd.grad(loglik, theta)
            return grad

        k = theta0.numel()
        hess = torch.zeros((k, k), dtype=theta0.dtype)
        for j in range(k):
            step = self._fd_step * max(1.0, abs(float(theta0[j])))
            shift = torch.zeros_like(theta0)
            shift[j] = step
            hess[:, j] = (gradient(theta0 + shift) - gradient(theta0 - shift)) / (2.0 * step)
        return 0.5 * (hess + hess.T)

    def evaluate(self, model, outcome):
        """FitResult at the current raw point, with observed-information SEs."""
        with torch.no_grad():
            out = model()
            beta = out.beta.detach().clone()
            loglik = float(out.loglik)
        raw = model.raw.detach().clone()
        natural = {k: float(v) for k, v in model.natural_params(raw).items()}
        beta_names = model.beta_names

        se_beta = {name: math.nan for name in beta_names}
        se_variance = {name: math.nan for name in natural}
        message = ""
        information = -self._hessian(model, beta, raw)
        chol, info = torch.linalg.cholesky_ex(information)
        if bool(torch.isfinite(information).all()) and int(info) == 0:
            cov = torch.cholesky_inverse(chol)
            p = len(beta_names)
            for i, name in enumerate(beta_names):
                se_beta[name] = math.sqrt(float(cov[i, i]))
            if raw.numel():
                jac = torch.autograd.functional.jacobian(
                    lambda r: torch.stack(list(model.natural_params(r).values())), raw)
                cov_natural = jac @ cov[p:, p:] @ jac.T
                for i, name in enumerate(natural):
                    se_variance[name] = math.sqrt(max(float(cov_natural[i, i]), 0.0))
        else:
            message = "observed information not positive definite"
            logger.warning("Observed information of the {0} fit is not positive definite; SEs set to NaN".format(model.type()))

        return FitResult(model_type=model.type(), spec=model.spec.to_dict(),
                         beta={name: float(b) for name, b in zip(beta_names, beta)},
                         variance=natural, loglik=loglik, se_beta=se_beta, se_variance=se_variance,
                         converged=bool(outcome["converged"]), iterations=int(outcome["iterations"]),
                         grad_norm=float(outcome["grad_norm"]), n_subjects=model.panel.n_subjects,
                         n_obs=model.panel.n_obs, raw=tuple(float(v) for v in raw), message=message)

def fit_lmm(ds, spec, engine=None):
    return (engine or FitEngine()).fit_lmm(ds, spec)

def fit_joint(ds, spec, engine=None):
    return (engine or FitEngine()).fit_joint(ds, spec)

def predict_blups(fit, ds):
    """Posterior means E[b_i | y_i] at the fitted parameters.

    Returns:
        blups (DataFrame): one row per subject (index subject_id), one column per random effect
    """
    if not fit.converged:
        logger.warning("Predicting random effects from a non-converged fit")
    panel = PaddedPanel(ds)
    model = ModelCreator().init_model(panel, spec_from_dict(fit.spec))
    raw = model.raw_from_natural(fit.variance)
    beta = beta_tensor(fit.beta, model.beta_names)
    with torch.no_grad():
        values = model.blups(raw, beta).numpy()
    return pd.DataFrame(values, index=pd.Index(panel.subject_ids, name="subject_id"), columns=model.re_names)

def icc_from_sds(sigma_b, sigma_eps):
    sigma_b, sigma_eps = float(sigma_b), float(sigma_eps)
    total = sigma_b ** 2 + sigma_eps ** 2
    assert total > 0, "Zero total variance"
    return sigma_b ** 2 / total

def icc(fit):
    """sigma_b^2 / (sigma_b^2 + sigma_eps^2) of the random intercept."""
    for key in ("sd(intercept)", "sd(y:intercept)"):
        if key in fit.variance:
            return icc_from_sds(fit.variance[key], fit.variance["sigma_eps"])
    logger.error("ICC needs a random intercept; the fit has {0}".format(list(fit.variance)))
    raise ValueError("Model without random intercept")
