"""
Shared fixtures: scenario and model configs read straight from configs/,
small hand-built datasets and a fit engine with a single start.
"""
from pathlib import Path

import numpy as np
import pytest
import torch
from omegaconf import OmegaConf

from data.dataset import LongitudinalDataset, SubjectRecord
from engine.engine import FitEngine
from models.samplers.studySampler import StudyScenario

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def load_config(group, name):
    return OmegaConf.load(CONFIG_DIR / group / "{0}.yaml".format(name))


def load_scenario(name):
    return StudyScenario.from_config(load_config("scenario", name))


def make_dataset(rows, tau=10.0, with_r=False, baseline=None):
    """Dataset from a list of (times, y) pairs; r defaults to a copy of y + 1."""
    subjects = []
    for i, (times, y) in enumerate(rows):
        r = [v + 1.0 for v in y] if with_r else None
        subjects.append(SubjectRecord(id=i, visit_times=times, y=y, r=r,
                                      baseline={} if baseline is None else {k: v[i] for k, v in baseline.items()}))
    return LongitudinalDataset(subjects=tuple(subjects), tau=tau)


@pytest.fixture
def scenario():
    return load_scenario


@pytest.fixture
def model_config():
    return lambda name: load_config("model", name)


@pytest.fixture
def engine():
    return FitEngine(n_starts=1)


@pytest.fixture
def toy_dataset():
    """Three subjects with well separated levels, four visits each."""
    times = [0.0, 1.0, 2.0, 3.0]
    return make_dataset([
        (times, [0.5, -0.5, 1.0, -1.0]),
        (times, [5.8, 4.2, 5.5, 4.5]),
        (times, [10.7, 9.3, 10.2, 9.8]),
    ])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def central_difference_gradient(fn, theta, step=1e-6):
    """Gradient of a scalar torch function by central differences, one coordinate at a time."""
    grad = torch.zeros_like(theta)
    for k in range(theta.numel()):
        shift = torch.zeros_like(theta)
        shift[k] = step
        grad[k] = (fn(theta + shift) - fn(theta - shift)) / (2.0 * step)
    return grad


def gradient_mismatch(model, beta, raw):
    """Relative gap between autograd and central differences of the log-likelihood in (beta, raw)."""
    p = beta.numel()
    theta = torch.cat([beta, raw]).detach().requires_grad_(True)
    loglik = model(theta[p:], theta[:p]).loglik
    analytic, = torch.autograd.grad(loglik, theta)
    with torch.no_grad():
        numeric = central_difference_gradient(lambda th: model(th[p:], th[:p]).loglik, theta.detach())
    return float(torch.linalg.norm(analytic - numeric) / max(float(torch.linalg.norm(analytic)), 1.0))
