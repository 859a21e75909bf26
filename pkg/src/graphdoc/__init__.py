"""Graph-attention document embeddings with contrastive pretraining.

Submodules: ``gradcore`` (autodiff and Adam), ``docmodel`` (passage graph
encoder), ``contrastive`` (pretraining), ``retrieval`` (BM25, dense search,
fusion, metrics), ``taskheads`` (classification, clustering), ``corpusio``
(corpora and checkpoints), ``config`` and ``cli``.
"""
from .docmodel import Document, GraphDocModel, ModelConfig
from .errors import GraphDocError
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "Document", "GraphDocError", "GraphDocModel", "ModelConfig", "__version__"]
