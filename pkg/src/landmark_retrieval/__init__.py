"""Landmark retrieval: label cleaning, corner cutmix, metric-learning head, mAP@k."""
from .cleaner import CosineDBSCAN, EmbeddingClusterCleaner, clean_dataset, dbscan
from .config import PipelineConfig, load_config
from .core import LabeledEmbedding, gem_pool, l2_normalize
from .cutmix import Corner, corner_cutmix, make_mixed_sample
from .eval import CosineRetriever, ap_at_k, build_index, ensemble_evaluate, evaluate, search
from .exceptions import LandmarkError
from .extractor import ToyExtractor, generate_synthetic_dataset
from .head import MetricLearningHead, train_two_stage

__version__ = "0.1.0"

__all__ = [
    "Corner",
    "CosineDBSCAN",
    "CosineRetriever",
    "EmbeddingClusterCleaner",
    "LabeledEmbedding",
    "LandmarkError",
    "MetricLearningHead",
    "PipelineConfig",
    "ToyExtractor",
    "ap_at_k",
    "build_index",
    "clean_dataset",
    "corner_cutmix",
    "dbscan",
    "ensemble_evaluate",
    "evaluate",
    "gem_pool",
    "generate_synthetic_dataset",
    "l2_normalize",
    "load_config",
    "make_mixed_sample",
    "search",
    "train_two_stage",
]
