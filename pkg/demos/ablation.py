"""
Layer patterns and neighborhood size
====================================

Two small grids on the planted corpus.  Metrics come from neighbor-restricted
ranking, the same way the service sees candidates.
"""

from sessrec import ModelConfig, TrainConfig, ablate, augment_all, prepare_corpus, split_holdout
from sessrec.synthetic import planted_markov_corpus

corpus = prepare_corpus(planted_markov_corpus(200, 4000, seed=2).sessions, min_frequency=1)
train_seqs, valid_seqs = split_holdout(corpus.sequences)
train_pairs, valid_pairs = augment_all(train_seqs), augment_all(valid_seqs)
base = ModelConfig(len(corpus.vocab), 32, "GA")
tc = TrainConfig(learning_rate=0.003, batch_size=128, epochs=2, seed=0)

# G is a gated message-passing layer, A an attention layer
grid = ablate("layer_pattern", ["GGGG", "AAAA", "GGAA", "AAGG", "GAGA"], train_pairs, valid_pairs, base, tc)
print(grid.to_csv())

# one trained model, several neighbor tables; more neighbors means more
# candidates, which helps recall and costs latency
grid = ablate("nn_size", [25, 50, 75, 100, 125, 150], train_pairs, valid_pairs, base, tc)
print(grid.to_csv())
