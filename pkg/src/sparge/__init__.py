"""Sparse-coding graph embedding for incomplete, noisy patient records."""

from .matrix_recovery import ObservedMatrix, complete_low_rank, shrink_singular_values
from .sparse_coding import CodingParams, Dictionary, batch_encode, sparse_encode
from .graph_embedding import (
    LaplacianPair,
    StiefelProjection,
    build_supervised,
    build_unsupervised,
    trace_quotient,
)
from .trainer import FitReport, Hyperparams, SpargeModel, fit, gradcheck, grid_search
from .similarity import embed, evaluate, knn_classify, knn_query
from .data_io import SyntheticSpec, generate_synthetic, load_csv, load_model, save_model

__all__ = [
    "ObservedMatrix", "complete_low_rank", "shrink_singular_values",
    "CodingParams", "Dictionary", "batch_encode", "sparse_encode",
    "LaplacianPair", "StiefelProjection", "build_supervised", "build_unsupervised",
    "trace_quotient", "FitReport", "Hyperparams", "SpargeModel", "fit", "gradcheck",
    "grid_search", "embed", "evaluate", "knn_classify", "knn_query",
    "SyntheticSpec", "generate_synthetic", "load_csv", "load_model", "save_model",
]
