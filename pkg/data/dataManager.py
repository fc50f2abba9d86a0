"""
Data Manager

Supplies the dataset of a run: read from a long-format CSV when the config
names one, otherwise simulated from the configured scenario.
"""
from data.dataset import LongitudinalDataset, validate_dataset
from models.samplers.studySampler import StudyScenario, simulate_study

from utils import logging
logger = logging.getLogger(__name__)

class DataManager(object):
    def __init__(self, cfg=None):
        self._config = cfg
        self._dataset = None
        self._scenario = None
        self._report = None

    @property
    def dataset(self):
        assert self._dataset is not None, "Dataset not loaded, call init_dataset() first"
        return self._dataset

    @property
    def report(self):
        return self._report

    @property
    def scenario(self):
        if self._scenario is None:
            assert self._config is not None and self._config.get("scenario", None) is not None, \
                "No scenario configured"
            self._scenario = StudyScenario.from_config(self._config.scenario)
        return self._scenario

    def init_dataset(self):
        path = self._config.get("dataset", None) if self._config is not None else None
        if path:
            logger.info("Loading dataset {0}".format(path))
            ds = LongitudinalDataset.load(path)
        else:
            n = int(self._config.n_subjects)
            seed = int(self._config.seed)
            logger.info("Simulating {0} subjects of scenario {1} (seed {2})".format(
                n, self.scenario.name or self.scenario.study, seed))
            ds = simulate_study(self.scenario, n, seed)
        self._report = validate_dataset(ds)
        for notice in self._report.notices:
            logger.info(notice)
        if not self._report.is_valid:
            for violation in self._report:
                logger.error("subject {0}, {1}: {2}".format(violation.subject_id, violation.field, violation.message))
            raise ValueError("Dataset has {0} invariant violations".format(len(self._report)))
        logger.info("{0} subjects, {1} visits".format(ds.n_subjects, int(ds.visit_counts().sum())))
        self._dataset = ds
        return ds
