import json

from . import _core
from ._core import (
    ConfigurationError,
    DomainError,
    LoadError,
    Model,
    TrainingError,
    TrainingState,
    decode,
    encode,
    entropy,
    load_checkpoint,
    lr_schedule,
    perplexity,
    prepare,
    temperature_schedule,
    usage_summary,
)

__all__ = [
    "ConfigurationError",
    "DomainError",
    "LoadError",
    "Model",
    "TrainingError",
    "TrainingState",
    "create_model",
    "decode",
    "encode",
    "entropy",
    "grad_check",
    "load_checkpoint",
    "lr_schedule",
    "parameter_count",
    "perplexity",
    "prepare",
    "temperature_schedule",
    "train",
    "usage_summary",
]


def _model_section(config):
    if isinstance(config, str):
        with open(config) as f:
            config = json.load(f)
    return config.get("model", config) if "train" in config or "model" in config else config


def create_model(config, seed=0):
    """Build a model from a model-config dict, a run-config dict or a JSON path."""
    return Model.create(json.dumps(_model_section(config)), seed)


def parameter_count(config):
    total, parts = _core.parameter_count(json.dumps(_model_section(config)))
    return total, dict(parts)


def grad_check(config, seed=7):
    return json.loads(_core.grad_check_json(json.dumps(_model_section(config)), seed))


def train(config, data_dir, out_dir, resume=None):
    if isinstance(config, str):
        with open(config) as f:
            config = json.load(f)
    return json.loads(_core.train(json.dumps(config), str(data_dir), str(out_dir), resume))


def _trace(self, text, tau=1.0):
    return json.loads(self.trace_json(text, tau))


def _utilization(self):
    return json.loads(self.utilization_json())


Model.trace = _trace
Model.utilization = _utilization
