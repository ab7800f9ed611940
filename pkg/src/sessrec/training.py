"""Mini-batch training, AdamW updates and portable checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import TrainingSequence, Vocabulary
from .model import GraphSessionModel, ModelConfig
from .numerics import ConfigError, ParamStore, Tape

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sessrec-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST = "manifest.txt"
PAYLOAD = "params.bin"
VOCAB_FILE = "vocab.json"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.00045
    batch_size: int = 64
    weight_decay: float = 0.0001
    epochs: int = 10
    seed: int = 0
    precision: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


def clip_gradients(params: ParamStore, max_norm: float) -> float:
    """Scale all trainable gradients so their joint L2 norm is at most ``max_norm``."""
    names = params.names(trainable_only=True)
    total = float(np.sqrt(sum(float(np.sum(params.entry(n).grad.astype(np.float64) ** 2)) for n in names)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for n in names:
            params.entry(n).grad *= scale
    return total


def optimizer_step(params: ParamStore, config: TrainConfig, step: int) -> None:
    """One AdamW update (``step`` counts from 1); decay is decoupled from the moments."""
    lr, b1, b2 = config.learning_rate, config.beta1, config.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name in params.names(trainable_only=True):
        e = params.entry(name)
        m = e.slots.setdefault("m", np.zeros_like(e.value))
        v = e.slots.setdefault("v", np.zeros_like(e.value))
        g = e.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if config.weight_decay:
            e.value -= lr * config.weight_decay * e.value
        e.value -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    hit10: float | None
    seconds: float


@dataclass
class TrainResult:
    model: GraphSessionModel
    log: list[EpochLog] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "hit@10", "wall_seconds"])
            for r in self.log:
                w.writerow([r.epoch, f"{r.loss:.6f}", "" if r.hit10 is None else f"{r.hit10:.6f}", f"{r.seconds:.3f}"])


def _param_norms(params: ParamStore) -> dict[str, float]:
    return {n: float(np.linalg.norm(e.value)) for n, e in params.items()}


def train(
    dataset: Sequence[TrainingSequence],
    model_config: ModelConfig,
    train_config: TrainConfig,
    validation: Sequence[TrainingSequence] | None = None,
    model: GraphSessionModel | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Train for ``train_config.epochs`` passes over ``dataset``.

    Each epoch shuffles with a generator derived from the seed, and each batch
    builds its graph, runs a taped forward pass, backpropagates the
    cross-entropy, clips and applies AdamW.
    """
    from .evaluation import evaluate

    if not dataset:
        raise TrainingError("training set is empty")
    tc = train_config
    model = model or GraphSessionModel(model_config, seed=tc.seed, dtype=tc.dtype)
    params = model.params
    rng = np.random.default_rng(tc.seed)
    result = TrainResult(model)
    step = 0
    n = len(dataset)
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for bi, start in enumerate(range(0, n, tc.batch_size)):
            batch = [dataset[i] for i in order[start:start + tc.batch_size]]
            params.zero_grad()
            tape = Tape()
            loss, binding = model.batch_loss([b.inputs for b in batch], [b.target for b in batch], tape, "train", rng)
            value = float(loss.value[0, 0])
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch} batch {bi}; parameter norms: {_param_norms(params)}"
                )
            tape.backward(loss)
            binding.flush()
            if tc.clip_norm is not None:
                clip_gradients(params, tc.clip_norm)
            step += 1
            optimizer_step(params, tc, step)
            total += value
            batches += 1
        hit = None
        if validation:
            hit = evaluate(model, validation, k=10).hit
        entry = EpochLog(epoch, total / batches, hit, time.perf_counter() - t0)
        result.log.append(entry)
        log.info("epoch %d loss %.4f hit@10 %s (%.1fs)", epoch, entry.loss, hit, entry.seconds)
        if on_epoch:
            on_epoch(entry)
    return result


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: GraphSessionModel
    vocab_hash: str
    vocab: Vocabulary | None = None
    train_config: dict | None = None


def save_checkpoint(path: str | Path, model: GraphSessionModel, vocab_hash: str, vocab: Vocabulary | None = None,
                    train_config: TrainConfig | None = None) -> Path:
    """Write ``manifest.txt`` (key=value lines plus one ``param`` line per tensor) and ``params.bin``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        f"format={CHECKPOINT_FORMAT}",
        f"version={CHECKPOINT_VERSION}",
        f"vocab_hash={vocab_hash}",
        f"model_config={json.dumps(model.config.to_dict(), sort_keys=True)}",
    ]
    if train_config is not None:
        lines.append(f"train_config={json.dumps(asdict(train_config), sort_keys=True)}")
    payload = bytearray()
    for name, e in model.params.items():
        r, c = e.value.shape
        lines.append(f"param {name} {r} {c} {int(e.trainable)}")
        payload += np.ascontiguousarray(e.value, dtype="<f4").tobytes()
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    (out / PAYLOAD).write_bytes(bytes(payload))
    if vocab is not None:
        vocab.save(out / VOCAB_FILE)
    return out


def _parse_manifest(text: str) -> tuple[dict[str, str], list[tuple[str, int, int, bool]]]:
    fields: dict[str, str] = {}
    table: list[tuple[str, int, int, bool]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("param "):
            parts = line.split()
            if len(parts) != 5:
                raise CheckpointError(f"manifest line {lineno}: field 'param' malformed: {line!r}")
            try:
                table.append((parts[1], int(parts[2]), int(parts[3]), parts[4] == "1"))
            except ValueError:
                raise CheckpointError(f"manifest line {lineno}: field 'param {parts[1]}' has a non-integer shape")
            continue
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise CheckpointError(f"manifest line {lineno}: unparseable field {line!r}")
        fields[key] = value
    for key in ("format", "version", "vocab_hash", "model_config"):
        if key not in fields:
            raise CheckpointError(f"manifest missing field '{key}'")
    if fields["format"] != CHECKPOINT_FORMAT:
        raise CheckpointError(f"manifest field 'format': expected {CHECKPOINT_FORMAT}, got {fields['format']!r}")
    try:
        version = int(fields["version"])
    except ValueError:
        raise CheckpointError(f"manifest field 'version': not an integer: {fields['version']!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"manifest field 'version': unsupported version {version}")
    return fields, table


def load_checkpoint(path: str | Path, model_config: ModelConfig | None = None,
                    expected_vocab_hash: str | None = None, dtype=np.float32) -> Checkpoint:
    """Read a checkpoint directory.

    ``model_config`` (if given) must match the stored shapes; a mismatch names
    the offending parameter.  ``expected_vocab_hash`` guards against pairing a
    model with the wrong vocabulary.
    """
    src = Path(path)
    fields, table = _parse_manifest((src / MANIFEST).read_text())
    try:
        stored_cfg = ModelConfig(**json.loads(fields["model_config"]))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"manifest field 'model_config': {exc}")
    if expected_vocab_hash is not None and fields["vocab_hash"] != expected_vocab_hash:
        raise CheckpointError(
            f"vocabulary hash mismatch: checkpoint {fields['vocab_hash']}, expected {expected_vocab_hash}"
        )
    cfg = model_config or stored_cfg
    model = GraphSessionModel(cfg, dtype=dtype)
    expected = model.params.shapes()
    stored_names = [t[0] for t in table]
    for name in expected:
        if name not in stored_names:
            raise CheckpointError(f"parameter '{name}' missing from checkpoint")
    payload = np.frombuffer((src / PAYLOAD).read_bytes(), dtype="<f4")
    need = sum(r * c for _, r, c, _ in table)
    if payload.size != need:
        raise CheckpointError(f"payload holds {payload.size} values, manifest declares {need}")
    pos = 0
    for name, r, c, _ in table:
        if name not in expected:
            raise CheckpointError(f"parameter '{name}' is not part of the model configuration")
        if expected[name] != (r, c):
            raise CheckpointError(f"parameter '{name}': checkpoint shape {(r, c)} != model shape {expected[name]}")
        model.params.set_value(name, payload[pos:pos + r * c].reshape(r, c))
        pos += r * c
    vocab = Vocabulary.load(src / VOCAB_FILE) if (src / VOCAB_FILE).exists() else None
    tc = json.loads(fields["train_config"]) if "train_config" in fields else None
    return Checkpoint(model, fields["vocab_hash"], vocab, tc)
