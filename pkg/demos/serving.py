"""
Serving recommendations over HTTP
=================================

Train briefly, write a checkpoint with its neighbor table, then query the
service the way a client would.
"""

import http.client
import json
import tempfile
from pathlib import Path

from sessrec import (
    ModelConfig, Recommender, TrainConfig, augment_all, build_matrix, prepare_corpus, save_checkpoint, serve,
    train,
)
from sessrec.synthetic import planted_markov_corpus

# four categories; 10% of clicks stray into another category
planted = planted_markov_corpus(120, 3000, seed=1, n_categories=4, stray_rate=0.1)
corpus = prepare_corpus(planted.sessions, min_frequency=1)
model = train(augment_all(corpus.sequences), ModelConfig(len(corpus.vocab), 16, "GA"),
              TrainConfig(learning_rate=0.003, batch_size=128, epochs=2)).model

# a checkpoint directory holds weights, vocabulary and the neighbor table
ckpt = Path(tempfile.mkdtemp()) / "ckpt"
save_checkpoint(ckpt, model, corpus.vocab.content_hash(), corpus.vocab)
build_matrix(model.params["item_embedding"], k=30).save(ckpt)

service = serve(Recommender.from_checkpoint(ckpt), "127.0.0.1:0", workers=2).start()
host, port = service.address
conn = http.client.HTTPConnection(host, port)


def post(payload):
    conn.request("POST", "/recommend", json.dumps(payload), {"Content-Type": "application/json"})
    return json.loads(conn.getresponse().read())


# raw ids go in and come out; items outside the last item's category are ignored
session = [int(r) for r in planted.sessions[0].items[:4]]
print("session:", session)
print(post({"items": session, "n": 5}))

# nothing known about the session: popularity fallback
print(post({"items": [-1], "n": 5}))

# malformed requests get a structured error and the service keeps going
print(post({"items": "oops"}))

conn.request("GET", "/stats")
print(json.loads(conn.getresponse().read()))
conn.close()
service.stop()
