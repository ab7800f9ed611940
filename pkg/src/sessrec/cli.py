"""Command-line entry point: prepare, train, build-nn, eval, ablate, serve, bench."""

from __future__ import annotations

import argparse
import http.client
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .dataio import CorpusError, ParseReport, Vocabulary, parse_sessions, prepare_corpus, read_training_set, save_prepared
from .numerics import ConfigError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("sessrec")


class UsageError(Exception):
    pass


def read_config(path: str | None) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment."""
    if not path:
        return {}
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _opt(args, cfg: dict, name: str, default, cast=str):
    v = getattr(args, name, None)
    if v is not None:
        return v
    if name in cfg:
        return cast(cfg[name])
    return default


def _model_config(args, cfg, catalog_size):
    from .model import ModelConfig

    return ModelConfig(
        catalog_size=catalog_size,
        embedding_dim=_opt(args, cfg, "dim", 32, int),
        layer_pattern=_opt(args, cfg, "pattern", "GA"),
        dropout=_opt(args, cfg, "dropout", 0.146, float),
        graph_mode=_opt(args, cfg, "graph_mode", "disjoint"),
    )


def _train_config(args, cfg):
    from .training import TrainConfig

    return TrainConfig(
        learning_rate=_opt(args, cfg, "lr", 0.00045, float),
        batch_size=_opt(args, cfg, "batch_size", 64, int),
        weight_decay=_opt(args, cfg, "weight_decay", 0.0001, float),
        epochs=_opt(args, cfg, "epochs", 10, int),
        seed=args.seed,
    )


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_prepare(args, cfg) -> int:
    report = ParseReport()
    sessions = list(parse_sessions(args.input, report))
    corpus = prepare_corpus(sessions, _opt(args, cfg, "min_frequency", 10, int))
    manifest = save_prepared(_out_dir(args), corpus, _opt(args, cfg, "holdout", 0.1, float))
    manifest["skipped_lines"] = report.skipped
    print(json.dumps(manifest, indent=2))
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from .training import save_checkpoint, train

    data = Path(args.data)
    vocab = Vocabulary.load(data / "vocab.json")
    train_pairs = read_training_set(data / "train.bin")
    valid = data / "valid.bin"
    valid_pairs = read_training_set(valid) if valid.exists() else None
    mc, tc = _model_config(args, cfg, len(vocab)), _train_config(args, cfg)
    result = train(train_pairs, mc, tc, validation=valid_pairs or None)
    out = _out_dir(args)
    save_checkpoint(out, result.model, vocab.content_hash(), vocab, tc)
    result.write_csv(out / "train_log.csv")
    for r in result.log:
        print(f"epoch {r.epoch}  loss {r.loss:.4f}  hit@10 {r.hit10}  {r.seconds:.1f}s")
    return EXIT_OK


def cmd_build_nn(args, cfg) -> int:
    from .knn import build_matrix
    from .training import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    k = _opt(args, cfg, "k", 100, int)
    matrix = build_matrix(ckpt.model.params["item_embedding"], k, _opt(args, cfg, "metric", "cosine"))
    matrix.save(Path(args.checkpoint))
    print(f"wrote {Path(args.checkpoint) / 'nn_matrix.bin'} ({matrix.no_items} x {matrix.k})")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from .evaluation import evaluate
    from .knn import NearestNeighborMatrix
    from .training import load_checkpoint

    data = Path(args.data)
    vocab = Vocabulary.load(data / "vocab.json")
    ckpt = load_checkpoint(args.checkpoint, expected_vocab_hash=vocab.content_hash())
    pairs = read_training_set(data / (args.split + ".bin"))
    k = _opt(args, cfg, "k", 10, int)
    out = _out_dir(args)
    rows = [("offline", evaluate(ckpt.model, pairs, k))]
    if args.restricted:
        matrix = NearestNeighborMatrix.load(Path(args.checkpoint))
        rows.append(("nn_restricted", evaluate(ckpt.model, pairs, k, matrix)))
    with open(out / "eval.csv", "w") as fh:
        fh.write(f"mode,cases,hit@{k},mrr@{k},ndcg@{k}\n")
        for mode, rep in rows:
            fh.write(f"{mode},{rep.case_count},{rep.hit!r},{rep.mrr!r},{rep.ndcg!r}\n")
    for mode, rep in rows:
        print(f"[{mode}]\n{rep.table()}")
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    from .evaluation import ablate

    data = Path(args.data)
    vocab = Vocabulary.load(data / "vocab.json")
    train_pairs = read_training_set(data / "train.bin")
    test_pairs = read_training_set(data / "valid.bin")
    defaults = {"layer_pattern": "GGGG,AAAA,GGAA,AAGG,GAGA", "nn_size": "25,50,75,100,125,150",
                "embedding_dim": "16,32,64"}
    values = (args.values or defaults.get(args.axis, "")).split(",")
    grid = ablate(args.axis, values, train_pairs, test_pairs, _model_config(args, cfg, len(vocab)),
                  _train_config(args, cfg), nn_size=_opt(args, cfg, "k", 100, int))
    text = grid.to_csv()
    (_out_dir(args) / f"ablation_{args.axis}.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_serve(args, cfg) -> int:
    from threadpoolctl import threadpool_limits

    from .serving import Recommender, serve

    threadpool_limits(1)
    rec = Recommender.from_checkpoint(args.checkpoint)
    service = serve(rec, args.bind, args.workers, args.protocol)
    host, port = service.address
    print(f"serving {args.protocol} on {host}:{port} with {args.workers} worker(s)", flush=True)
    try:
        service.server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.server.server_close()
    return EXIT_OK


def random_recommender(items: int, dim: int, k: int, seed: int):
    """Untrained model + exact NN table at the requested scale, for latency work."""
    from .knn import build_matrix
    from .model import GraphSessionModel, ModelConfig
    from .serving import Recommender

    model = GraphSessionModel(ModelConfig(items, dim, "GA"), seed=seed)
    return Recommender(model, build_matrix(model.params["item_embedding"], k))


def bench_http(rec, requests: int, session_len: int = 3, seed: int = 0) -> dict:
    """Start an in-process one-worker HTTP server and time ``requests`` sequential POSTs."""
    from .serving import serve

    service = serve(rec, "127.0.0.1:0", workers=1).start()
    host, port = service.address
    rng = np.random.default_rng(seed)
    m = rec.model.config.catalog_size
    raw = (lambda i: int(i)) if rec.vocab is None else rec.vocab.raw
    conn = http.client.HTTPConnection(host, port)
    lat = []
    try:
        for _ in range(requests):
            body = json.dumps({"items": [raw(i) for i in rng.choice(m, session_len, replace=False)], "n": 10})
            t0 = time.perf_counter()
            conn.request("POST", "/recommend", body, {"Content-Type": "application/json"})
            resp = conn.getresponse()
            resp.read()
            lat.append((time.perf_counter() - t0) * 1e3)
            if resp.status != 200:
                raise RuntimeError(f"bench request failed with HTTP {resp.status}")
    finally:
        conn.close()
        service.stop()
    lat = np.array(lat)
    return {"requests": requests, "p50_ms": float(np.percentile(lat, 50)),
            "p95_ms": float(np.percentile(lat, 95)), "p99_ms": float(np.percentile(lat, 99))}


def cmd_bench(args, cfg) -> int:
    from threadpoolctl import threadpool_limits

    from .serving import Recommender

    threadpool_limits(1)
    if args.checkpoint:
        rec = Recommender.from_checkpoint(args.checkpoint)
    else:
        rec = random_recommender(args.items, args.dim, args.k, args.seed)
    print(json.dumps(bench_http(rec, args.requests, seed=args.seed), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sessrec", description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_opts(sp):
        sp.add_argument("--dim", type=int)
        sp.add_argument("--pattern")
        sp.add_argument("--dropout", type=float)
        sp.add_argument("--graph-mode", dest="graph_mode", choices=["disjoint", "merged"])
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--weight-decay", dest="weight_decay", type=float)
        sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("prepare", help="parse sessions, build vocabulary, write training set")
    sp.add_argument("--input", required=True)
    sp.add_argument("--min-frequency", dest="min_frequency", type=int)
    sp.add_argument("--holdout", type=float)
    sp.set_defaults(fn=cmd_prepare)

    sp = sub.add_parser("train", help="train a model from a prepared directory")
    sp.add_argument("--data", required=True)
    model_opts(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("build-nn", help="build the nearest-neighbor matrix for a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--metric", choices=["cosine", "dot"])
    sp.set_defaults(fn=cmd_build_nn)

    sp = sub.add_parser("eval", help="hit/mrr/ndcg of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="valid", choices=["train", "valid"])
    sp.add_argument("--k", type=int)
    sp.add_argument("--restricted", action="store_true", help="also score the NN-restricted candidate set")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="layer pattern / NN size / embedding dimension grid")
    sp.add_argument("--data", required=True)
    sp.add_argument("--axis", required=True)
    sp.add_argument("--values", help="comma separated axis values")
    sp.add_argument("--k", type=int)
    model_opts(sp)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("serve", help="run the recommendation service")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bind", default="127.0.0.1:8080")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--protocol", choices=["http", "raw"], default="http")
    sp.set_defaults(fn=cmd_serve)

    sp = sub.add_parser("bench", help="end-to-end HTTP latency on one inference thread")
    sp.add_argument("--checkpoint")
    sp.add_argument("--items", type=int, default=10_000)
    sp.add_argument("--dim", type=int, default=32)
    sp.add_argument("--k", type=int, default=100)
    sp.add_argument("--requests", type=int, default=1000)
    sp.set_defaults(fn=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = read_config(args.config)
        return args.fn(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        log.exception("command failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
