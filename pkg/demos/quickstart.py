"""
Training on a planted Markov corpus
===================================

Sessions are random walks over a sparse transition table, so the next item
is predictable from the current one.  A small model should beat the
popularity ranking by a wide margin after a couple of epochs.
"""

import numpy as np

from sessrec import (
    ModelConfig, TrainConfig, augment_all, build_matrix, evaluate, popularity_baseline, prepare_corpus,
    split_holdout, train,
)
from sessrec.synthetic import planted_markov_corpus

# 200 items, 5000 sessions; every item has four possible successors
corpus = prepare_corpus(planted_markov_corpus(200, 5000, seed=0).sessions, min_frequency=1)
train_seqs, valid_seqs = split_holdout(corpus.sequences)
train_pairs, valid_pairs = augment_all(train_seqs), augment_all(valid_seqs)
print(f"{len(corpus.vocab)} items, {len(train_pairs)} training pairs, {len(valid_pairs)} validation pairs")

# each prefix of a session predicts the item that follows it
print("first pair:", train_pairs[0].inputs, "->", train_pairs[0].target)

# the yardstick: rank everything by training frequency
print("popularity:", popularity_baseline(train_seqs, valid_pairs, len(corpus.vocab)))

# one gated layer followed by one attention layer
config = ModelConfig(len(corpus.vocab), embedding_dim=32, layer_pattern="GA")
result = train(train_pairs, config, TrainConfig(learning_rate=0.003, batch_size=128, epochs=3, seed=0),
               validation=valid_pairs, on_epoch=print)
model = result.model

# offline evaluation scores every item in the catalog
print("full catalog:", evaluate(model, valid_pairs))

# serving only scores the neighbors of the session's items
matrix = build_matrix(model.params["item_embedding"], k=25)
print("25 neighbors:", evaluate(model, valid_pairs, matrix=matrix))

# the model's favorites for one prefix against the planted successors of its last item
planted = planted_markov_corpus(200, 1, seed=0)
pair = valid_pairs[0]
last_raw = corpus.vocab.raw(pair.inputs[-1])
succ = np.flatnonzero(planted.transitions[last_raw - 1000]) + 1000
top = np.argsort(-model.logits([pair.inputs])[0])[:5]
print("planted successors:", sorted(int(r) for r in succ))
print("model top 5:       ", [corpus.vocab.raw(int(i)) for i in top])
