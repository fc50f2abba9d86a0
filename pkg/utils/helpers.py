"""
Unsorted helper functions

"""
import platform
from types import SimpleNamespace

import numpy as np

from utils import logging
logger = logging.getLogger(__name__)

class OutputContainer(SimpleNamespace):
    """ Common return type of the model forward() calls: the likelihood, the
        profiled fixed effects and the factorised covariance travel together in
        one namespace instead of tuples of different length per model.
        This is based on types.SimpleNamespace but adds a fallback.
    """

    def __getattr__(self, item):
        """Only gets invoked if item doesn't exist in namespace.

        Args:
            item (): Requested output item
        """
        try:
            return self.__dict__[item]
        except KeyError:
            logger.error("You requested a attribute {0} from the output object but it does not exist.".format(item))
            logger.error("Did you add the attribute in the forward() call of your model?")
            items = (f"{k}" for k, v in self.__dict__.items())
            logger.error("Available attributes: {0}".format("{}({})".format(type(self).__name__, ", ".join(items))))
            raise AttributeError(item)

    def clear(self):
        """Clears the current namespace. Safety feature.
        """
        for key,_ in self.__dict__.items():
            self.__dict__[key]=None
        return self

def subject_seed(seed, *keys):
    """Integer seed of an independent stream derived from (seed, keys...).

    Used for per-subject and per-replication streams so results do not depend
    on the order in which workers pick up their share.
    """
    sequence = np.random.SeedSequence([int(seed)] + [int(k) for k in keys])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])

def package_versions():
    """Versions of the numerical stack, echoed into run manifests."""
    import scipy
    import torch
    import pandas
    import omegaconf
    import hydra
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
        "pandas": pandas.__version__,
        "omegaconf": omegaconf.__version__,
        "hydra": hydra.__version__,
    }
