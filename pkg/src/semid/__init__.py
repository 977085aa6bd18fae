"""Multimodal semantic IDs for CTR prediction.

Item embeddings from several modalities are quantized into short discrete
codes (VQ, PQ, RQ, or prefix-conditioned residual quantization), and a
DIN-style attention model scores (user history, target item) pairs using
those codes alongside item IDs.
"""

from .data import EmbeddingMatrix, Event, InteractionDataset, Sample, build_samples, mark_cold_items
from .kmeans import Centroids, kmeans_assign, kmeans_fit
from .metrics import Metrics, auc, evaluate, report
from .pipeline import QuantizeConfig, SemanticBundle, build_joint, quantize_all
from .quantizers import Codebook, SemanticIdTable, assign, fit, pq_fit, psrq_fit, rq_fit, vq_fit

__version__ = "0.1.0"

__all__ = [
    "Centroids", "Codebook", "EmbeddingMatrix", "Event", "InteractionDataset", "Metrics",
    "QuantizeConfig", "Sample", "SemanticBundle", "SemanticIdTable", "assign", "auc",
    "build_joint", "build_samples", "evaluate", "fit", "kmeans_assign", "kmeans_fit",
    "mark_cold_items", "pq_fit", "psrq_fit", "quantize_all", "report", "rq_fit", "vq_fit",
]
