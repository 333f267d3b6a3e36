"""Finite-difference checks of every differentiable op and of tiny end-to-end models."""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .autodiff import gradcheck
from .baselines import LstmCaptioner, LstmConfig, lstm_cell, soft_attention
from .transformer import ModelConfig, Transformer, causal_mask, scaled_dot_attention

OP_TOL = 1e-4
MODEL_TOL = 1e-3

TINY_TRANSFORMER = dict(d_model=8, n_heads=2, n_enc_blocks=2, n_dec_blocks=2, d_ff=16, dropout_p=0.0,
                        feature_dim=6, n_regions=4, vocab_size=11, max_len=6)


def _weighted(fn, c):
    return lambda *xs: ad.tsum(fn(*xs) * c)


def op_checks(rng: np.random.Generator) -> dict:
    """name -> (build_loss, arrays)."""
    u = lambda *s: rng.uniform(-1, 1, size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    tgt = np.array([[1, 2, 0, 0], [3, 4, 5, 0]])
    mask = causal_mask(3)
    checks = {
        "add": (_weighted(ad.add, u(2, 3, 4)), [u(2, 3, 4), u(4)]),
        "sub": (_weighted(ad.sub, u(2, 3, 4)), [u(2, 3, 4), u(4)]),
        "mul": (_weighted(ad.mul, u(2, 3, 4)), [u(2, 3, 4), u(3, 1)]),
        "div": (_weighted(ad.div, u(3, 2)), [u(3, 2), pos(3, 2)]),
        "matmul": (_weighted(ad.matmul, u(3, 2)), [u(3, 4), u(4, 2)]),
        "matmul_batched": (_weighted(ad.matmul, u(2, 3, 5)), [u(2, 3, 4), u(4, 5)]),
        "relu": (_weighted(ad.relu, u(4, 5)), [u(4, 5)]),
        "tanh": (_weighted(ad.tanh, u(4, 5)), [u(4, 5)]),
        "sigmoid": (_weighted(ad.sigmoid, u(4, 5)), [u(4, 5)]),
        "exp": (_weighted(ad.exp, u(4, 5)), [u(4, 5)]),
        "log": (_weighted(ad.log, u(3, 3)), [pos(3, 3)]),
        "reshape_swapaxes": (_weighted(lambda a: ad.swapaxes(ad.reshape(a, (2, 3, 2)), 0, 1), u(3, 2, 2)), [u(12)]),
        "getitem_concat": (_weighted(lambda a, b: ad.concat([a[:, 1:], b], axis=-1), u(3, 4)), [u(3, 3), u(3, 2)]),
        "sum_mean": (_weighted(lambda a: ad.mean(a, axis=0), u(3)), [u(4, 3)]),
        "softmax": (_weighted(lambda a: ad.softmax(a, axis=-1), u(3, 6)), [u(3, 6)]),
        "log_softmax": (_weighted(lambda a: ad.log_softmax(a, axis=-1), u(2, 3, 6)), [u(2, 3, 6)]),
        "layer_norm": (_weighted(ad.layer_norm, u(2, 3, 8)), [u(2, 3, 8), u(8), u(8)]),
        "embedding_lookup": (_weighted(lambda t: ad.embedding_lookup(t, ids), u(2, 3, 4)), [u(5, 4)]),
        "cross_entropy": (lambda x: ad.cross_entropy(x, tgt, tgt != 0), [u(2, 4, 6)]),
        "pick": (_weighted(lambda x: ad.pick(x, ids[:, :2]), u(2, 2)), [u(2, 2, 4)]),
        "dropout_fixed_mask": (_weighted(lambda x: ad.dropout(x, 0.4, True, ad.make_rng(3)), u(4, 4)), [u(4, 4)]),
        "scaled_dot_attention": (_weighted(lambda q, k, v: scaled_dot_attention(q, k, v, mask), u(2, 3, 4)),
                                 [u(2, 3, 5), u(2, 3, 5), u(2, 3, 4)]),
        "lstm_cell": (lambda x, h, c, W, b: ad.tsum(lstm_cell(x, h, c, W, b)[0] * 0.7)
                      + ad.tsum(lstm_cell(x, h, c, W, b)[1] * -0.3),
                      [u(2, 3), u(2, 4), u(2, 4), u(7, 16), u(16)]),
        "soft_attention": (lambda h, v, vp, Wh, w: ad.tsum(soft_attention(h, v, vp, Wh, w)[0] * 0.5),
                           [u(2, 4), u(2, 5, 4), u(2, 5, 4), u(4, 4), u(4)]),
    }
    return checks


def _model_check(model, loss_of_model) -> float:
    names = list(model.params)
    saved = dict(model.params)

    def build(*ts):
        for n, t in zip(names, ts):
            model.params[n] = t
        return loss_of_model(model)

    try:
        return gradcheck(build, [saved[n].data for n in names])
    finally:
        model.params.update(saved)


def model_checks(rng: np.random.Generator) -> dict:
    from .training import scst_surrogate

    feats = rng.normal(size=(2, 4, 6))
    toks = rng.integers(4, 11, size=(2, 5))
    toks[:, 0] = 1
    tgt = rng.integers(2, 11, size=(2, 4))
    xe = lambda m: ad.cross_entropy(m.forward(feats, toks[:, :-1]), tgt)  # noqa: E731
    lstm = dict(hidden=8, feature_dim=6, n_regions=4, vocab_size=11, dropout_p=0.0, max_len=6)
    sampled = [[5, 6, 2], [7, 2]]
    adv = np.array([0.8, -0.4])
    mha = Transformer(ModelConfig(**TINY_TRANSFORMER))
    xq, xkv = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 4, 8))
    c = rng.normal(size=(2, 3, 8))
    return {
        "multi_head_attention": (mha, lambda m: ad.tsum(m.multi_head_attention(ad.Tensor(xq), ad.Tensor(xkv),
                                                                               "dec0.cross") * c), OP_TOL),
        "transformer_end_to_end": (Transformer(ModelConfig(**TINY_TRANSFORMER)), xe, MODEL_TOL),
        "lstm_plain_end_to_end": (LstmCaptioner(LstmConfig(mode="plain", **lstm)), xe, MODEL_TOL),
        "lstm_soft_attn_end_to_end": (LstmCaptioner(LstmConfig(mode="soft_attn", **lstm)), xe, MODEL_TOL),
        "scst_surrogate": (Transformer(ModelConfig(**TINY_TRANSFORMER)),
                           lambda m: scst_surrogate(m, feats, sampled, adv), MODEL_TOL),
    }


def run_suite(seed: int = 0) -> dict:
    """Returns name -> {rel_error, tol, passed, seconds}."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, (fn, arrays) in op_checks(rng).items():
        t = time.perf_counter()
        err = gradcheck(fn, arrays)
        out[name] = {"rel_error": err, "tol": OP_TOL, "passed": bool(err <= OP_TOL),
                     "seconds": time.perf_counter() - t}
    for name, (model, loss, tol) in model_checks(rng).items():
        t = time.perf_counter()
        err = _model_check(model, loss)
        out[name] = {"rel_error": err, "tol": tol, "passed": bool(err <= tol), "seconds": time.perf_counter() - t}
    return out
