"""Session-based next-item recommendation with alternating graph and attention layers.

Typical flow::

    corpus = prepare_corpus(sessions)          # vocabulary + cleaned sequences
    result = train(augment_all(train_seqs), ModelConfig(len(corpus.vocab)), TrainConfig())
    matrix = build_matrix(result.model.params["item_embedding"], k=100)
    Recommender(result.model, matrix, corpus.vocab).infer(InferenceRequest(items=[...]))
"""

__version__ = "0.1.0"

from .dataio import (
    SessionRecord,
    TrainingSequence,
    Vocabulary,
    augment_all,
    augment_prefixes,
    build_vocabulary,
    clean_sequence,
    parse_sessions,
    prepare_corpus,
    split_holdout,
)
from .evaluation import EvalReport, ablate, evaluate, popularity_baseline
from .knn import NearestNeighborMatrix, build_matrix, candidates
from .model import GraphSessionModel, ModelConfig
from .serving import InferenceRequest, Recommender, filter_session, serve
from .sessiongraph import build_graph, build_shortcut
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "SessionRecord", "TrainingSequence", "Vocabulary", "augment_all", "augment_prefixes",
    "build_vocabulary", "clean_sequence", "parse_sessions", "prepare_corpus", "split_holdout",
    "EvalReport", "ablate", "evaluate", "popularity_baseline",
    "NearestNeighborMatrix", "build_matrix", "candidates",
    "GraphSessionModel", "ModelConfig",
    "InferenceRequest", "Recommender", "filter_session", "serve",
    "build_graph", "build_shortcut",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
