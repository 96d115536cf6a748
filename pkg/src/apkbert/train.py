"""Fine-tuning loop, evaluation, inference and optional MLM pretraining."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import EmptyDataset, MissingCategory
from .metrics import MetricsReport, build_report
from .model import EncoderConfig, EncoderModel, classify, mlm_logits, mlm_loss
from .preprocess import CATEGORIES, clean_text, default_config, split_train_test
from .tokenizer import N_SPECIAL, Vocab, encode, mask_for_mlm

log = logging.getLogger(__name__)

BINARY_LR = 2e-5
MULTI_LR = 1e-3
MAX_SUPPORTED_SEQ_LEN = 512
TASKS = ("binary", "multi")
BINARY_CLASSES = ("benign", "malware")


@dataclass
class TrainConfig:
    task: str = "binary"
    learning_rate: float | None = None  # None -> per-task default
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 2
    seed: int = 0
    max_seq_len: int = 128
    clip_norm: float = 1.0
    val_fraction: float = 0.1
    mlm_pretrain_steps: int = 0
    mask_rate: float = 0.15

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return BINARY_LR if self.task == "binary" else MULTI_LR

    @classmethod
    def field_names(cls):
        return {f.name for f in fields(cls)}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    seconds: float
    train_acc: float = float("nan")


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    stopping_reason: str = "max-epochs"
    best_epoch: int = 0

    @property
    def train_losses(self):
        return [e.train_loss for e in self.epochs]

    @property
    def val_losses(self):
        return [e.val_loss for e in self.epochs]

    def to_lines(self) -> str:
        keys = ("epoch", "train_loss", "val_loss", "val_acc", "seconds")
        lines = [json.dumps({k: getattr(e, k) for k in keys}) for e in self.epochs]
        lines.append(json.dumps({"stopping_reason": self.stopping_reason, "best_epoch": self.best_epoch}))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_lines())


# ---------------------------------------------------------------- task plumbing

def class_names(task: str):
    return BINARY_CLASSES if task == "binary" else CATEGORIES


def task_records(records, task: str):
    """Binary uses every record; multi uses malware records only."""
    if task == "binary":
        return list(records)
    return [r for r in records if r.label == 1]


def targets(records, task: str) -> np.ndarray:
    if task == "binary":
        return np.array([r.label for r in records], dtype=np.int64)
    out = []
    for r in records:
        if r.category is None:
            raise MissingCategory(f"record {r.id} has no category for the multi task")
        out.append(CATEGORIES.index(r.category))
    return np.array(out, dtype=np.int64)


def encode_records(records, vocab: Vocab, max_seq_len: int):
    seqs = [encode(r.text, vocab, max_seq_len) for r in records]
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    mask = np.array([s.attention_mask for s in seqs], dtype=np.int64)
    return ids, mask


def _trim(ids, mask):
    # padding beyond the longest real sequence never affects [CLS] logits
    n = int(mask.sum(axis=1).max())
    return ids[:, :n], mask[:, :n]


def carve_validation(records, fraction: float = 0.1, seed: int = 0):
    return split_train_test(records, fraction, seed)


def make_encoder_config(vocab: Vocab, task: str, max_seq_len: int, **overrides) -> EncoderConfig:
    params = dict(vocab_size=len(vocab), n_classes=len(class_names(task)), max_positions=max_seq_len)
    params.update(overrides)
    return EncoderConfig(**params)


# ---------------------------------------------------------------- training

def _forward_loss(model, ids, mask, y, n_classes, training, rng):
    logits = classify((ids, mask), model, training=training, rng=rng)
    return logits, T.cross_entropy(logits, T.one_hot(y, n_classes))


def _score(model, ids, mask, y, n_classes, batch_size=128):
    """Per-record losses and argmax predictions in eval mode."""
    losses, preds = [], []
    with T.no_grad():
        for start in range(0, len(y), batch_size):
            bi, bm = _trim(ids[start : start + batch_size], mask[start : start + batch_size])
            logits = classify((bi, bm), model).data
            logq = T.log_softmax(logits, axis=-1)
            yb = y[start : start + batch_size]
            losses.extend(-logq[np.arange(len(yb)), yb])
            preds.extend(np.argmax(logits, axis=-1))
    return np.array(losses), np.array(preds, dtype=np.int64)


def train(model: EncoderModel, train_records, val_records, vocab: Vocab, config: TrainConfig):
    """Fine-tune ``model`` in place; returns ``(model, history)``.

    The returned parameters are those of the epoch with the lowest
    validation loss.
    """
    train_records = list(train_records)
    val_records = list(val_records)
    if not train_records or not val_records:
        raise EmptyDataset("training and validation sets must be non-empty")
    n_classes = len(class_names(config.task))
    y_train = targets(train_records, config.task)
    y_val = targets(val_records, config.task)
    ids, mask = encode_records(train_records, vocab, config.max_seq_len)
    val_ids, val_mask = encode_records(val_records, vocab, config.max_seq_len)

    state = T.AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    # an MLM head left over from pretraining is off the classification path
    params = {k: v for k, v in model.params.items() if not k.startswith("mlm.")}
    history = TrainHistory()
    best_loss, best_arrays, stale = np.inf, model.arrays(), 0
    n = len(train_records)
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        drop_rng = np.random.default_rng([config.seed, epoch, 1])
        total, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            bi, bm = _trim(ids[idx], mask[idx])
            logits, loss = _forward_loss(model, bi, bm, y_train[idx], n_classes, True, drop_rng)
            loss.backward()
            if config.clip_norm:
                T.clip_grad_norm(params, config.clip_norm)
            T.adam_step(params, state)
            model.zero_grad()
            total += loss.item() * len(idx)
            correct += int((np.argmax(logits.data, axis=-1) == y_train[idx]).sum())
        val_losses, val_preds = _score(model, val_ids, val_mask, y_val, n_classes)
        record = EpochRecord(
            epoch=epoch,
            train_loss=total / n,
            val_loss=float(val_losses.mean()),
            val_acc=float((val_preds == y_val).mean()),
            seconds=time.perf_counter() - started,
            train_acc=correct / n,
        )
        history.epochs.append(record)
        log.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f (%.1fs)", epoch,
                 record.train_loss, record.val_loss, record.val_acc, record.seconds)
        if record.val_loss < best_loss:
            best_loss, best_arrays, stale = record.val_loss, model.arrays(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                history.stopping_reason = "early-stop"
                break
    model.load_arrays(best_arrays)
    return model, history


def evaluate(model: EncoderModel, records, vocab: Vocab, task: str, max_seq_len: int | None = None) -> MetricsReport:
    records = list(records)
    if not records:
        raise EmptyDataset("nothing to evaluate")
    max_seq_len = max_seq_len or model.config.max_positions
    names = class_names(task)
    y = targets(records, task)
    ids, mask = encode_records(records, vocab, max_seq_len)
    losses, preds = _score(model, ids, mask, y, len(names))
    return build_report(y.tolist(), preds.tolist(), losses.tolist(), list(names))


def predict(model: EncoderModel, raw_manifest_text: str, vocab: Vocab, task: str, cleaning=None):
    """Returns ``(label_index, probabilities)`` for one manifest."""
    text = clean_text(raw_manifest_text, cleaning or default_config())
    seq = encode(text, vocab, model.config.max_positions)
    with T.no_grad():
        logits = classify(seq, model).data
    probs = np.exp(T.log_softmax(logits))
    return int(np.argmax(probs)), probs


# ---------------------------------------------------------------- MLM pretraining

def mlm_pretrain(model: EncoderModel, texts, vocab: Vocab, steps: int, mask_rate: float = 0.15,
                 lr: float = 1e-3, batch_size: int = 32, max_seq_len: int = 128, seed: int = 0):
    """Masked-token pretraining on raw texts; returns the per-step losses."""
    texts = list(texts)
    if not texts:
        raise EmptyDataset("no texts for MLM pretraining")
    seqs = [encode(t, vocab, max_seq_len) for t in texts]
    state = T.AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    # the pooler and classifier sit off the MLM path and receive no gradient
    params = {k: v for k, v in model.params.items() if not k.startswith(("pooler.", "classifier."))}
    losses = []
    for _ in range(steps):
        batch, labels = _mlm_batch(seqs, batch_size, mask_rate, len(vocab), rng)
        if batch is None:
            continue
        ids, mask = _trim(*batch)
        loss = mlm_loss(mlm_logits((ids, mask), model, training=True, rng=rng), labels)
        loss.backward()
        T.clip_grad_norm(params, 1.0)
        T.adam_step(params, state)
        model.zero_grad()
        losses.append(loss.item())
    return losses


def _mlm_batch(seqs, batch_size, mask_rate, vocab_size, rng):
    pick = rng.integers(len(seqs), size=batch_size)
    masked, labels = [], []
    for i in pick:
        m, lab = mask_for_mlm(seqs[i], mask_rate, rng, vocab_size)
        masked.append(m)
        labels.append(lab)
    if not any(labels):
        return None, None
    ids = np.array([s.ids for s in masked], dtype=np.int64)
    mask = np.array([s.attention_mask for s in masked], dtype=np.int64)
    return (ids, mask), labels


def mlm_accuracy(model: EncoderModel, texts, vocab: Vocab, mask_rate: float = 0.15, max_seq_len: int = 128,
                 seed: int = 1, rounds: int = 1) -> float:
    """Fraction of masked positions whose argmax prediction is the original id."""
    seqs = [encode(t, vocab, max_seq_len) for t in texts]
    rng = np.random.default_rng(seed)
    hit = total = 0
    with T.no_grad():
        for _ in range(rounds):
            for s in seqs:
                m, lab = mask_for_mlm(s, mask_rate, rng, len(vocab))
                if not lab:
                    continue
                logits = mlm_logits(m, model).data
                for pos, tid in lab.items():
                    hit += int(np.argmax(logits[pos]) == tid)
                    total += 1
    return hit / total if total else float("nan")


def config_snapshot(config: TrainConfig) -> dict:
    snap = asdict(config)
    snap["lr"] = config.lr
    return snap
