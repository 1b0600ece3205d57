from .config import ModelConfig
from .detector import GroundingDetector, ImageFeatures, Prediction, QueryState, SetPrediction

__all__ = ["GroundingDetector", "ImageFeatures", "ModelConfig", "Prediction", "QueryState", "SetPrediction"]
