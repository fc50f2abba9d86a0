"""
ModelCreator - Interface between engines and models.

Provides initialisation of models from their specifications.
"""

from utils import logging
logger = logging.getLogger(__name__)

#import defined models
from models.lmm import LinearMixedModel, LmmSpec
from models.jointModel import JointModel, JointSpec

_MODEL_DICT={
    "univariate": LinearMixedModel,
    "joint": JointModel,
}

_SPEC_DICT={
    "univariate": LmmSpec,
    "joint": JointSpec,
}

def spec_type(spec):
    for key, spec_class in _SPEC_DICT.items():
        if isinstance(spec, spec_class):
            return key
    logger.error("Unknown specification type {0}".format(type(spec).__name__))
    raise NotImplementedError

def spec_from_config(cfg):
    """Spec from a config node or dict carrying ``model_type``."""
    model_type = str(cfg.get("model_type", "univariate")).lower()
    if model_type not in _SPEC_DICT:
        logger.error("Unknown Model Type {0}. Make sure your model is registered in modelCreator._SPEC_DICT.".format(model_type))
        raise NotImplementedError
    return _SPEC_DICT[model_type].from_config(cfg)

spec_from_dict = spec_from_config

class ModelCreator(object):

    def __init__(self, cfg=None):
        self._config=cfg
        self._model=None

    def init_model(self, panel, spec):
        model_type = spec_type(spec)
        for key, model_class in _MODEL_DICT.items():
            if key==model_type:
                logger.debug("Initialising Model Type {0}".format(model_type))
                self.model = model_class(panel, spec)
                return self.model
        logger.error("Unknown Model Type. Make sure your model is registered in modelCreator._MODEL_DICT.")
        raise NotImplementedError

    @property
    def model(self):
        assert self._model is not None, "Model is not defined."
        return self._model

    @model.setter
    def model(self,model):
        self._model=model
