from .layers import BatchNorm, Conv2D, Dense, PReLU, Tanh
from .model import Architecture, CrosstalkNet, CrosstalkStage, Extractor, crosstalk_stage_forward
from .optim import Adam, NonFiniteGradientError

__all__ = [
    "Adam", "Architecture", "BatchNorm", "Conv2D", "CrosstalkNet", "CrosstalkStage", "Dense",
    "Extractor", "NonFiniteGradientError", "PReLU", "Tanh", "crosstalk_stage_forward",
]
