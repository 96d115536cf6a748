"""Finite-difference gradient cases for every differentiable tensor op.

Each case maps a name to ``(build, inputs)``: ``build(*tensors)`` returns a
Tensor, and ``inputs`` are fresh float64 arrays.  The scalar checked is
``sum(out * R)`` for a fixed random ``R`` so every output element matters.
"""

import numpy as np

from apkbert import tensor as T
from oracles import numeric_grad, rel_error


def _cases(rng):
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    ids = np.array([[0, 2, 2], [4, 1, 2]])
    pad = np.array([[True, False, False, True], [False, False, True, False]])
    keep_rng_seed = 7
    return {
        "add_broadcast": (lambda a, b: T.add(a, b), [r(3, 4), r(4)]),
        "sub_broadcast": (lambda a, b: T.sub(a, b), [r(2, 3, 4), r(3, 1)]),
        "mul_broadcast": (lambda a, b: T.mul(a, b), [r(3, 4), r(1, 4)]),
        "scalar_div_neg": (lambda a: -(a / 3.0) + 2.0 * a, [r(3, 2)]),
        "matmul_2d": (lambda a, b: T.matmul(a, b), [r(3, 4), r(4, 2)]),
        "matmul_batched": (lambda a, b: T.matmul(a, b), [r(2, 3, 4), r(2, 4, 5)]),
        "matmul_weight": (lambda a, b: T.matmul(a, b), [r(2, 3, 4), r(4, 5)]),
        "transpose": (lambda a: T.transpose(a, 0, 2), [r(2, 3, 4)]),
        "reshape": (lambda a: T.reshape(a, (4, 6)), [r(2, 3, 4)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [r(2, 3), r(2, 2)]),
        "slice": (lambda a: a[1:, ::2], [r(3, 5)]),
        "fancy_index_repeats": (lambda a: T.take(a, np.array([0, 2, 2, 1])), [r(3, 4)]),
        "sum_axis": (lambda a: T.sum(a, axis=1), [r(3, 4)]),
        "mean_keepdims": (lambda a: T.mean(a, axis=-1, keepdims=True), [r(3, 4)]),
        "tanh": (lambda a: T.tanh(a), [r(3, 4)]),
        "gelu": (lambda a: T.gelu(a), [r(3, 4) * 2]),
        "softmax_last": (lambda a: T.softmax(a, axis=-1), [r(3, 5)]),
        "softmax_axis0": (lambda a: T.softmax(a, axis=0), [r(3, 5)]),
        "masked_fill_softmax": (lambda a: T.softmax(T.masked_fill(a, pad, -np.inf), -1), [r(2, 4)]),
        "layer_norm": (lambda a, g, b: T.layer_norm(a, g, b), [r(3, 6), r(6), r(6)]),
        "embedding_lookup": (lambda t: T.embedding_lookup(t, ids), [r(5, 3)]),
        "dropout_train": (lambda a: T.dropout(a, 0.3, keep_rng_seed, training=True), [r(4, 5)]),
        "cross_entropy_soft": (lambda z: T.cross_entropy(z, rng_soft_targets(8, 4)), [r(8, 4)]),
    }


def rng_soft_targets(n, k, seed=3):
    p = np.random.default_rng(seed).random((n, k))
    return p / p.sum(axis=1, keepdims=True)


def op_cases(seed=0):
    return _cases(np.random.default_rng(seed))


def check_case(build, arrays, step=1e-5, seed=1):
    """Max relative error between analytic and central-difference gradients."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    T.sum(T.mul(out, weights)).backward()

    def f():
        return float((build(*[T.Tensor(a) for a in arrays]).data * weights).sum())

    worst = 0.0
    for t, a in zip(tensors, arrays):
        num = numeric_grad(f, a, step)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def end_to_end_errors(seed=0, step=1e-5):
    """Per-parameter relative error of the classification-loss gradient.

    Tiny encoder: L=1, d=8, h=2, seq=4, two sequences (one padded).
    """
    from apkbert.model import EncoderConfig, classify, init_model

    cfg = EncoderConfig(vocab_size=11, n_classes=2, n_layers=1, hidden=8, n_heads=2, d_ff=16,
                        max_positions=4, dropout=0.0)
    model = init_model(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    # larger-than-init weights so every nonlinearity sees a non-trivial regime
    for p in model.params.values():
        p.data = p.data + rng.standard_normal(p.shape) * 0.3
    ids = np.array([[2, 7, 9, 3], [2, 5, 3, 0]])
    mask = np.array([[1, 1, 1, 1], [1, 1, 1, 0]])
    target = T.one_hot([1, 0], 2)

    def loss():
        return T.cross_entropy(classify((ids, mask), model), target)

    loss().backward()
    errors = {}
    with T.no_grad():
        for name, p in model.params.items():
            num = numeric_grad(lambda: loss().item(), p.data, step)
            errors[name] = rel_error(p.grad, num)
    return errors
