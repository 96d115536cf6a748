"""Transformer encoder (post-layer-norm) with a pooled [CLS] classifier and an MLM head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import BadConfig, CheckpointError, IdOutOfRange, MlmHeadAbsent, ShapeMismatch
from .tensor import Tensor
from .tokenizer import TokenizedSequence, Vocab, batch_arrays

LN_EPS = 1e-12
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_classes: int = 2
    n_layers: int = 2
    hidden: int = 128
    n_heads: int = 4
    d_ff: int = 512
    max_positions: int = 128
    dropout: float = 0.1
    mlm_head: bool = False

    def validate(self) -> None:
        for name in ("vocab_size", "n_classes", "n_layers", "hidden", "n_heads", "d_ff", "max_positions"):
            if getattr(self, name) < 1:
                raise BadConfig(f"{name} must be positive")
        if self.hidden % self.n_heads:
            raise BadConfig(f"hidden size {self.hidden} not divisible by {self.n_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise BadConfig("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads


def parameter_shapes(cfg: EncoderConfig) -> dict[str, tuple]:
    """Ordered name -> shape table; the order fixes initialisation draws."""
    d, f = cfg.hidden, cfg.d_ff
    shapes = {
        "embeddings.token": (cfg.vocab_size, d),
        "embeddings.position": (cfg.max_positions, d),
        "embeddings.segment": (2, d),
        "embeddings.ln.gamma": (d,),
        "embeddings.ln.beta": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "ffn.in.weight"] = (d, f)
        shapes[p + "ffn.in.bias"] = (f,)
        shapes[p + "ffn.out.weight"] = (f, d)
        shapes[p + "ffn.out.bias"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
    shapes["pooler.weight"] = (d, d)
    shapes["pooler.bias"] = (d,)
    shapes["classifier.weight"] = (d, cfg.n_classes)
    shapes["classifier.bias"] = (cfg.n_classes,)
    if cfg.mlm_head:
        shapes["mlm.weight"] = (d, cfg.vocab_size)
        shapes["mlm.bias"] = (cfg.vocab_size,)
    return shapes


class EncoderModel:
    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def layer(self, i: int) -> dict[str, Tensor]:
        prefix = f"layer{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ShapeMismatch(f"{k}: {arrays[k].shape} vs {p.shape}")
            p.data = np.array(arrays[k], dtype=T.DTYPE)

    def zero_grad(self) -> None:
        T.zero_grads(self.params)

    def clone(self) -> "EncoderModel":
        return EncoderModel(self.config, {k: Tensor(p.data.copy(), requires_grad=True, name=k)
                                          for k, p in self.params.items()})


def init_model(config: EncoderConfig, seed: int = 0) -> EncoderModel:
    """Weights ~ N(0, 0.02^2); biases and layer-norm shifts 0; layer-norm scales 1."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith((".bias", ".beta")):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return EncoderModel(config, params)


# ---------------------------------------------------------------- forward pieces

def _as_batch(seq):
    """Accept a TokenizedSequence, a list of them, or an ``(ids, mask)`` pair."""
    if isinstance(seq, TokenizedSequence):
        ids, mask = batch_arrays([seq])
        return ids, mask, True
    if isinstance(seq, tuple) and len(seq) == 2 and isinstance(seq[0], np.ndarray):
        return np.asarray(seq[0]), np.asarray(seq[1]), False
    ids, mask = batch_arrays(list(seq))
    return ids, mask, False


def _linear(x: Tensor, params: dict, name: str) -> Tensor:
    return x @ params[name + ".weight"] + params[name + ".bias"]


def embed(seq, model: EncoderModel, training: bool = False, rng=None) -> Tensor:
    ids, _, single = _as_batch(seq)
    cfg = model.config
    if ids.shape[1] > cfg.max_positions:
        raise ShapeMismatch(f"sequence length {ids.shape[1]} exceeds {cfg.max_positions} positions")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IdOutOfRange(f"token ids must lie in [0, {cfg.vocab_size})")
    tok = T.embedding_lookup(model["embeddings.token"], ids)
    pos = T.take(model["embeddings.position"], slice(0, ids.shape[1]))
    seg = T.take(model["embeddings.segment"], slice(0, 1))
    h = T.layer_norm(tok + pos + seg, model["embeddings.ln.gamma"], model["embeddings.ln.beta"], LN_EPS)
    h = T.dropout(h, cfg.dropout, rng, training)
    return T.take(h, 0) if single else h


def multi_head_attention(x: Tensor, attention_mask, params: dict, n_heads: int, return_weights=False):
    """Scaled dot-product self-attention over ``x`` of shape (B, T, d).

    Keys whose mask entry is 0 get -inf scores, so they receive exactly zero
    weight.  Returns the projected output, plus the (B, h, T, T) weights when
    ``return_weights`` is set.
    """
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    B, L, d = x.shape
    if d % n_heads:
        raise ShapeMismatch(f"hidden size {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    mask = np.asarray(attention_mask).reshape(B, 1, 1, L)

    def heads(t):
        return T.transpose(T.reshape(t, (B, L, n_heads, dh)), 1, 2)

    q = heads(_linear(x, params, "attn.q"))
    k = heads(_linear(x, params, "attn.k"))
    v = heads(_linear(x, params, "attn.v"))
    scores = (q @ T.transpose(k, -1, -2)) * (1.0 / math.sqrt(dh))
    scores = T.masked_fill(scores, mask == 0, -np.inf)
    weights = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(weights @ v, 1, 2), (B, L, d))
    out = _linear(ctx, params, "attn.o")
    if single:
        out, weights = T.take(out, 0), T.take(weights, 0)
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, params: dict) -> Tensor:
    return _linear(T.gelu(_linear(x, params, "ffn.in")), params, "ffn.out")


def encoder_layer(x: Tensor, mask, params: dict, n_heads: int, dropout: float = 0.0,
                  training: bool = False, rng=None) -> Tensor:
    a = T.dropout(multi_head_attention(x, mask, params, n_heads), dropout, rng, training)
    x = T.layer_norm(x + a, params["ln1.gamma"], params["ln1.beta"], LN_EPS)
    f = T.dropout(feed_forward(x, params), dropout, rng, training)
    return T.layer_norm(x + f, params["ln2.gamma"], params["ln2.beta"], LN_EPS)


def hidden_states(seq, model: EncoderModel, training: bool = False, rng=None) -> Tensor:
    ids, mask, single = _as_batch(seq)
    cfg = model.config
    h = embed((ids, mask), model, training, rng)
    for i in range(cfg.n_layers):
        h = encoder_layer(h, mask, model.layer(i), cfg.n_heads, cfg.dropout, training, rng)
    return T.take(h, 0) if single else h


def classify(seq, model: EncoderModel, training: bool = False, rng=None) -> Tensor:
    """[CLS] row -> tanh pooler -> class logits, shape (C,) or (B, C)."""
    ids, mask, single = _as_batch(seq)
    h = hidden_states((ids, mask), model, training, rng)
    cls_row = T.take(h, (slice(None), 0))
    pooled = T.tanh(_linear(cls_row, model.params, "pooler"))
    logits = _linear(pooled, model.params, "classifier")
    return T.take(logits, 0) if single else logits


def mlm_logits(seq, model: EncoderModel, training: bool = False, rng=None) -> Tensor:
    if not model.config.mlm_head:
        raise MlmHeadAbsent("model was built without an MLM head")
    ids, mask, single = _as_batch(seq)
    h = hidden_states((ids, mask), model, training, rng)
    logits = _linear(h, model.params, "mlm")
    return T.take(logits, 0) if single else logits


def mlm_loss(logits: Tensor, labels) -> Tensor:
    """Cross-entropy over selected positions only.

    ``labels`` is a list (one per batch row) of ``{position: true_id}``.
    """
    if logits.ndim == 2:
        logits = T.reshape(logits, (1,) + logits.shape)
        labels = [labels]
    rows, cols, targets = [], [], []
    for b, lab in enumerate(labels):
        for pos, tid in sorted(lab.items()):
            rows.append(b)
            cols.append(pos)
            targets.append(tid)
    if not rows:
        raise ValueError("no masked positions")
    picked = T.take(logits, (np.array(rows), np.array(cols)))
    return T.cross_entropy(picked, T.one_hot(targets, logits.shape[-1]))


# ---------------------------------------------------------------- checkpoints

def save_model(path, model: EncoderModel, vocab: Vocab, vocab_file: str = "vocab.tsv", extra=None) -> None:
    meta = {
        "config": asdict(model.config),
        "vocab": {"file": Path(vocab_file).name, "sha256": vocab.digest(), "content": vocab.to_text()},
    }
    if extra:
        meta.update(extra)
    Path(path).write_bytes(T.dump_tensors(model.arrays(), meta))


def load_model(path):
    """Returns ``(model, vocab, meta)``; the embedded vocab is hash-checked."""
    arrays, meta = T.load_tensors(Path(path).read_bytes())
    cfg = EncoderConfig(**meta["config"])
    vocab = Vocab.from_text(meta["vocab"]["content"])
    if vocab.digest() != meta["vocab"]["sha256"]:
        raise CheckpointError("embedded vocabulary does not match its recorded hash")
    model = init_model(cfg, seed=0)
    model.load_arrays(arrays)
    return model, vocab, meta


