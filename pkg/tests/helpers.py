"""Shared test utilities."""

import numpy as np

from surginstruct.autodiff import gradcheck
from surginstruct.baselines import LstmCaptioner, LstmConfig
from surginstruct.transformer import ModelConfig, Transformer

TINY = dict(d_model=8, n_heads=2, n_enc_blocks=2, n_dec_blocks=2, d_ff=16, dropout_p=0.0,
            feature_dim=6, n_regions=4, vocab_size=11, max_len=6)


def tiny_transformer(seed=0, **kw):
    return Transformer(ModelConfig(**{**TINY, **kw}), seed=seed)


def tiny_lstm(mode="soft_attn", seed=0, **kw):
    cfg = dict(mode=mode, hidden=8, feature_dim=6, n_regions=4, vocab_size=11, dropout_p=0.0, max_len=6)
    return LstmCaptioner(LstmConfig(**{**cfg, **kw}), seed=seed)


def model_gradcheck(model, loss_of_model, max_coords=None):
    """Finite-difference check of d loss / d every parameter of ``model``."""
    names = list(model.params)
    saved = dict(model.params)

    def build(*ts):
        for n, t in zip(names, ts):
            model.params[n] = t
        return loss_of_model(model)

    try:
        return gradcheck(build, [saved[n].data for n in names], max_coords=max_coords)
    finally:
        model.params.update(saved)


def toy_batch(rng, B=3, T=5, R=4, D=6, V=11):
    feats = rng.normal(size=(B, R, D))
    toks = rng.integers(4, V, size=(B, T))
    toks[:, 0] = 1
    return feats, toks


def tiny_run_config(n=60, **train):
    """Resolved run config for a very small synthetic task."""
    from surginstruct.config import load_config
    cfg = load_config()
    cfg["data"].update(n=n, n_regions=4, feature_dim=14, split=[0.8, 0.1, 0.1], min_count=1)
    cfg["transformer"].update(d_model=8, n_heads=2, n_enc_blocks=1, n_dec_blocks=1, d_ff=16)
    cfg["lstm"].update(hidden=8)
    cfg["train"].update(epochs_xe=2, epochs_scst=1, **train)
    return cfg
