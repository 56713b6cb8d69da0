"""Meta-learning based noise-tolerant training for small dense classifiers."""
from mlnt.estimator import MLNTClassifier, PreSoftmaxFeatures

__all__ = ["MLNTClassifier", "PreSoftmaxFeatures"]
__version__ = "0.1.0"
