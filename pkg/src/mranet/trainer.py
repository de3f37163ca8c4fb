"""Adam training loop, evaluation, checkpoints and the per-epoch log."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import BatchNormState, RngStream, Tensor, no_grad, softmax_cross_entropy
from .data import DataError, DatasetManifest, ImageCache, TaskSpec, batch_iterator, decode_tensor, encode_tensor
from .metrics import compute_report, write_predictions
from .model import Model, ModelConfig, ModelParams, build_model, mranet_s

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MRCK"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when the loss or an activation becomes non-finite."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=mranet_s)
    task: TaskSpec = field(default_factory=lambda: TaskSpec.for_k(3))
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 5
    workers: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.task.k != self.model.num_classes:
            raise ValueError(f"task has {self.task.k} classes but the model head has {self.model.num_classes}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor] | ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, {k: np.zeros_like(p.data) for k, p in params.items()})

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(params, grads: Mapping[str, np.ndarray], state: AdamState, config) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for name, _ in params.items():
        if grads.get(name) is None:
            raise ValueError(f"adam_step: missing gradient for parameter {name}")
    state.t += 1
    t = state.t
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.epsilon
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


@dataclass
class TrainState:
    adam: AdamState
    rng: RngStream
    epoch: int = 0
    best_val_acc: float = -math.inf
    best_epoch: int = 0


@dataclass
class LogRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)
    test: "EvalResult | None" = None

    HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, row: LogRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError(f"log epochs must increase: {row.epoch} after {self.rows[-1].epoch}")
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.HEADER)
            for r in self.rows:
                writer.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in self.HEADER[1:]])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            if tuple(next(reader, ())) != cls.HEADER:
                raise ValueError(f"{path}: unexpected TrainLog header")
            for row in reader:
                out.append(LogRow(int(row[0]), *map(float, row[1:])))
        return out


@dataclass
class EvalResult:
    loss: float
    labels: np.ndarray
    predictions: np.ndarray
    scores: np.ndarray
    paths: list[str]

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.labels == self.predictions))


# ---------------------------------------------------------------------------
# Determinism
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    """Pin BLAS to one thread so floating-point reductions happen in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# ---------------------------------------------------------------------------
# Epochs
# ---------------------------------------------------------------------------


def train_epoch(
    model: Model,
    data: DatasetManifest,
    state: TrainState,
    config: TrainConfig,
    epoch: int,
    cache: ImageCache | None = None,
) -> tuple[float, float, TrainState]:
    """One pass over the training split; returns sample-averaged loss and accuracy."""
    size = model.config.input_shape[1:]
    total_loss = 0.0
    correct = 0
    seen = 0
    batches = batch_iterator(
        data, "train", config.batch_size, shuffle=True, seed=config.seed, epoch=epoch, size=size,
        workers=config.workers, cache=cache,
    )
    for b, (images, onehot) in enumerate(batches):
        n = images.shape[0]
        if n < 2:
            log.warning("epoch %d batch %d: skipping a single-sample batch (batch norm needs >= 2)", epoch, b)
            continue
        model.params.zero_grad()
        try:
            logits = model.logits(Tensor(images), "train", state.rng)
            loss = softmax_cross_entropy(logits, onehot)
            loss.backward()
        except FloatingPointError as exc:
            raise TrainingError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
        value = float(loss.data)
        grads = {k: p.grad for k, p in model.params.items()}
        adam_step(model.params, grads, state.adam, config)
        total_loss += value * n
        correct += int((logits.data.argmax(axis=1) == onehot.argmax(axis=1)).sum())
        seen += n
    if seen == 0:
        raise DataError("training split produced no usable batch")
    return total_loss / seen, correct / seen, state


def evaluate(
    model: Model,
    data: DatasetManifest,
    split: str,
    task: TaskSpec | None = None,
    batch_size: int = 32,
    cache: ImageCache | None = None,
) -> EvalResult:
    """Inference-mode predictions (argmax, ties to the lowest class) and probability rows."""
    if task is not None and tuple(data.classes) != tuple(task.classes):
        raise DataError(f"manifest classes {data.classes} do not match task classes {task.classes}")
    samples = data.split_samples(split)
    if not samples:
        raise DataError(f"split {split!r} is empty")
    size = model.config.input_shape[1:]
    loss_sum = 0.0
    scores = []
    with no_grad():
        for images, onehot in batch_iterator(data, split, batch_size, shuffle=False, size=size, cache=cache):
            logits = model.logits(Tensor(images), "infer")
            loss_sum += float(softmax_cross_entropy(logits, onehot).data) * images.shape[0]
            z = logits.data.astype(np.float64)
            z = np.exp(z - z.max(axis=1, keepdims=True))
            scores.append(z / z.sum(axis=1, keepdims=True))
    scores = np.concatenate(scores)
    labels = np.array([s.label for s in samples])
    return EvalResult(loss_sum / len(samples), labels, scores.argmax(axis=1), scores, [s.path for s in samples])


def best_epoch(val_accs) -> int:
    """1-based epoch with the highest validation accuracy; the earliest wins ties."""
    best, best_acc = 0, -math.inf
    for e, acc in enumerate(val_accs, start=1):
        if _improves(acc, best_acc):
            best, best_acc = e, acc
    return best


def _improves(acc: float, best: float) -> bool:
    if math.isnan(acc):
        return best == -math.inf
    return acc > best


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    digest: bytes
    params: ModelParams
    adam: AdamState
    epoch: int
    rng_states: dict[str, tuple[int, int, int]]
    best_val_acc: float = -math.inf
    best_epoch: int = 0


def _int_limbs(value: int) -> np.ndarray:
    # 16-bit limbs are exact in f32
    value &= (1 << 64) - 1
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(4)], dtype=np.float32)


def _from_limbs(arr: np.ndarray) -> int:
    return sum(int(v) << (16 * i) for i, v in enumerate(arr.reshape(-1)))


def _float_limbs(x: float) -> np.ndarray:
    return _int_limbs(struct.unpack("<Q", struct.pack("<d", x))[0])


def _float_from_limbs(arr: np.ndarray) -> float:
    return struct.unpack("<d", struct.pack("<Q", _from_limbs(arr)))[0]


def _records(ckpt: Checkpoint):
    for name, t in ckpt.params.items():
        yield f"param/{name}", t.data
    for prefix, s in ckpt.params.bn.items():
        yield f"bn/{prefix}/running_mean", s.running_mean
        yield f"bn/{prefix}/running_var", s.running_var
    for name, m in ckpt.adam.m.items():
        yield f"adam.m/{name}", m
    for name, v in ckpt.adam.v.items():
        yield f"adam.v/{name}", v
    yield "adam.t", _int_limbs(ckpt.adam.t)
    yield "epoch", _int_limbs(ckpt.epoch)
    yield "best.val_acc", _float_limbs(ckpt.best_val_acc)
    yield "best.epoch", _int_limbs(ckpt.best_epoch)
    for name, state in ckpt.rng_states.items():
        yield f"rng/{name}", np.concatenate([_int_limbs(v) for v in state])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: ``MRCK``, u16 version, 32-byte config digest, u32 record count,
    then per record a u16-length-prefixed UTF-8 name and a u32-length-prefixed NTSR tensor."""
    if len(ckpt.digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), ckpt.digest]
    records = list(_records(ckpt))
    parts.append(struct.pack("<I", len(records)))
    for name, arr in records:
        raw = name.encode()
        blob = encode_tensor(arr)
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<I", len(blob)), blob]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(b"".join(parts))
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"{path}: cannot write checkpoint ({exc.strerror})") from exc


def load_checkpoint(path, config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``config`` given, its digest must match."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(buf) < 42:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = buf[6:38]
    if config is not None and config.digest() != digest:
        raise CheckpointError(f"{path}: checkpoint was written for a different model config")
    (count,) = struct.unpack_from("<I", buf, 38)
    pos = 42
    records: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + nlen].decode()
            pos += 2 + nlen
            (blen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if pos + blen > len(buf):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            arr, end = decode_tensor(buf[pos : pos + blen], source=f"{path}:{name}")
            if end != blen:
                raise CheckpointError(f"{path}: record {name!r} has {blen - end} stray bytes")
            records[name] = arr
            pos += blen
    except (struct.error, DataError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after the last record")

    tensors, bn, m, v, rng = {}, {}, {}, {}, {}
    for name, arr in records.items():
        kind, _, rest = name.partition("/")
        if kind == "param":
            tensors[rest] = Tensor(arr.copy(), requires_grad=True)
        elif kind == "bn":
            prefix, _, stat = rest.rpartition("/")
            bn.setdefault(prefix, {})[stat] = arr.copy()
        elif kind == "adam.m":
            m[rest] = arr.copy()
        elif kind == "adam.v":
            v[rest] = arr.copy()
        elif kind == "rng":
            rng[rest] = tuple(_from_limbs(arr[4 * i : 4 * i + 4]) for i in range(3))
    try:
        bn_states = {k: BatchNormState(d["running_mean"], d["running_var"]) for k, d in bn.items()}
        return Checkpoint(
            digest=digest,
            params=ModelParams(tensors, bn_states),
            adam=AdamState(m, v, _from_limbs(records["adam.t"])),
            epoch=_from_limbs(records["epoch"]),
            rng_states=rng,
            best_val_acc=_float_from_limbs(records["best.val_acc"]),
            best_epoch=_from_limbs(records["best.epoch"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing record {exc}") from exc


def _snapshot(model: Model, state: TrainState) -> Checkpoint:
    return Checkpoint(
        digest=model.config.digest(),
        params=model.params.copy(),
        adam=state.adam.copy(),
        epoch=state.epoch,
        rng_states={"dropout": state.rng.state()},
        best_val_acc=state.best_val_acc,
        best_epoch=state.best_epoch,
    )


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------


def fit(
    config: TrainConfig,
    manifest: DatasetManifest,
    out_dir=None,
    resume: Checkpoint | str | Path | None = None,
    cache: ImageCache | None = None,
) -> tuple[TrainLog, Checkpoint]:
    """Train for ``config.epochs`` epochs, tracking the best validation accuracy.

    With ``out_dir`` set this writes ``train_log.csv``, ``best.mrck``,
    ``ckpt_epochNNN.mrck`` every ``checkpoint_every`` epochs and, when the
    test split is non-empty, ``predictions.csv``, ``metrics.txt`` and
    ``confusion.csv`` from the best checkpoint.
    """
    mcfg = config.model
    if mcfg.mask_override is not None:
        raise ValueError("mask_override is a test hook and cannot be used for training")
    if tuple(manifest.classes) != tuple(config.task.classes):
        raise DataError(f"manifest classes {manifest.classes} do not match task classes {config.task.classes}")
    if any(s.split is None for s in manifest.samples):
        raise DataError("manifest has no split assignments")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    cache = cache if cache is not None else ImageCache()
    root = RngStream(config.seed)

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume, mcfg)
        if ckpt.digest != mcfg.digest():
            raise CheckpointError("checkpoint was written for a different model config")
        model = Model(mcfg, ckpt.params.copy())
        state = TrainState(
            ckpt.adam.copy(), RngStream.from_state(ckpt.rng_states["dropout"]), ckpt.epoch,
            ckpt.best_val_acc, ckpt.best_epoch,
        )
    else:
        model = Model(mcfg, build_model(mcfg, root.fork("init")))
        state = TrainState(AdamState.zeros(model.params), root.fork("dropout"))

    trainlog = TrainLog()
    log_path = out / "train_log.csv" if out is not None else None
    if resume is not None and log_path is not None and log_path.exists():
        for row in TrainLog.read_csv(log_path).rows:
            if row.epoch <= state.epoch:
                trainlog.append(row)
    best = _snapshot(model, state)
    if resume is not None and state.best_epoch not in (0, state.epoch):
        stored = out / "best.mrck" if out is not None else None
        if stored is not None and stored.exists() and load_checkpoint(stored, mcfg).epoch == state.best_epoch:
            best = load_checkpoint(stored, mcfg)
        else:
            log.warning("best checkpoint of epoch %d not found; best tracking restarts from the resume point",
                        state.best_epoch)
    has_val = bool(manifest.split_samples("val"))

    for epoch in range(state.epoch + 1, config.epochs + 1):
        train_loss, train_acc, state = train_epoch(model, manifest, state, config, epoch, cache)
        if has_val:
            ev = evaluate(model, manifest, "val", config.task, config.batch_size, cache)
            val_loss, val_acc = ev.loss, ev.accuracy
        else:
            val_loss = val_acc = float("nan")
        state.epoch = epoch
        trainlog.append(LogRow(epoch, train_loss, train_acc, val_loss, val_acc))
        log.info("epoch %d: train loss %.4f acc %.4f | val loss %.4f acc %.4f",
                 epoch, train_loss, train_acc, val_loss, val_acc)
        if _improves(val_acc, state.best_val_acc):
            state.best_val_acc, state.best_epoch = val_acc, epoch
            best = _snapshot(model, state)
            if out is not None:
                save_checkpoint(best, out / "best.mrck")
        if out is not None:
            trainlog.to_csv(log_path)
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(_snapshot(model, state), out / f"ckpt_epoch{epoch:03d}.mrck")

    if manifest.split_samples("test"):
        best_model = Model(mcfg, best.params)
        trainlog.test = evaluate(best_model, manifest, "test", config.task, config.batch_size, cache)
        if out is not None:
            write_eval_outputs(trainlog.test, config.task, out)
    return trainlog, best


def write_eval_outputs(result: EvalResult, task: TaskSpec, out_dir) -> None:
    """``predictions.csv``, ``metrics.txt`` and ``confusion.csv`` for one evaluation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_predictions(out_dir / "predictions.csv", result.paths, result.labels, result.predictions, result.scores)
    rep, cm = compute_report(result.labels, result.predictions, result.scores, task.k)
    (out_dir / "metrics.txt").write_text(rep.to_text(task.classes))
    cm.to_csv(out_dir / "confusion.csv", task.classes)
