"""Glue from raw caption records to model-ready arrays and models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import LstmCaptioner, LstmConfig
from .synthetic import synth_dataset
from .text import MAX_LEN, MIN_COUNT, Vocabulary, build_vocabulary, clean_text, encode, split_dataset
from .training import CaptionData, TrainConfig
from .transformer import ModelConfig, Transformer

MODEL_KINDS = ("transformer", "lstm", "lstm_attn")


@dataclass
class Corpus:
    train: CaptionData
    val: CaptionData
    test: CaptionData
    vocab: Vocabulary


def tokenize_records(records, rules=None) -> list[dict]:
    """Clean every caption; records whose caption cleans to nothing are dropped."""
    out = []
    for r in records:
        toks = clean_text(r["caption"], rules)
        if toks:
            out.append({**r, "tokens": toks})
    return out


def to_caption_data(records, vocab: Vocabulary, max_len: int = MAX_LEN) -> CaptionData:
    if not records:
        return CaptionData(np.zeros((0,)), np.zeros((0, max_len + 2), dtype=np.int64), [], [])
    feats = np.stack([np.asarray(r["features"], dtype=np.float64) for r in records])
    toks = np.stack([encode(r["tokens"], vocab, max_len) for r in records])
    # references are the cleaned captions cut to the same length the model sees
    refs = [list(r["tokens"][:max_len]) for r in records]
    return CaptionData(feats, toks, refs, [str(r["id"]) for r in records])


def build_corpus(records, ratios, seed: int, min_count: int = MIN_COUNT, max_len: int = MAX_LEN,
                 rules=None) -> Corpus:
    recs = tokenize_records(records, rules)
    tr, va, te = split_dataset(recs, tuple(ratios), seed)
    vocab = build_vocabulary([r["tokens"] for r in tr], min_count)
    return Corpus(*(to_caption_data(x, vocab, max_len) for x in (tr, va, te)), vocab)


def synthetic_corpus(data_cfg: dict, seed: int) -> Corpus:
    recs, _ = synth_dataset(data_cfg["n"], data_cfg["noise"], seed, data_cfg["n_regions"], data_cfg["feature_dim"])
    return build_corpus(recs, data_cfg["split"], seed, data_cfg.get("min_count", MIN_COUNT),
                        data_cfg.get("max_tokens", MAX_LEN))


def build_model(kind: str, cfg: dict, vocab_size: int, seed: int):
    """Instantiate a captioner from a resolved run config."""
    d = cfg["data"]
    max_len = d.get("max_tokens", MAX_LEN) + 2
    if kind == "transformer":
        t = cfg["transformer"]
        mc = ModelConfig(d_model=t["d_model"], n_heads=t["n_heads"], n_enc_blocks=t["n_enc_blocks"],
                         n_dec_blocks=t["n_dec_blocks"], d_ff=t["d_ff"], dropout_p=t["dropout_p"],
                         feature_dim=d["feature_dim"], n_regions=d["n_regions"], vocab_size=vocab_size,
                         max_len=max_len, encoder_pe=t.get("encoder_pe", True))
        return Transformer(mc, seed)
    if kind in ("lstm", "lstm_attn"):
        lc = LstmConfig(mode="plain" if kind == "lstm" else "soft_attn", hidden=cfg["lstm"]["hidden"],
                        feature_dim=d["feature_dim"], n_regions=d["n_regions"], vocab_size=vocab_size,
                        dropout_p=cfg["lstm"]["dropout_p"], max_len=max_len)
        return LstmCaptioner(lc, seed)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def train_config(cfg: dict, phase: str, n_train: int, seed: int) -> TrainConfig:
    """TrainConfig for one phase; warmup defaults to a fraction of all XE steps."""
    t = cfg["train"]
    epochs = t["epochs_xe"] if phase == "xe" else t["epochs_scst"]
    warmup = t.get("warmup_steps")
    if warmup is None:
        steps = t["epochs_xe"] * -(-n_train // t["batch_size"])
        warmup = max(1, int(round(t.get("warmup_fraction", 0.05) * steps)))
    return TrainConfig(phase=phase, epochs=epochs, batch_size=t["batch_size"], peak_lr_xe=t["peak_lr_xe"],
                       warmup_steps=warmup, lr_scst=t["lr_scst"], clip_norm=t.get("clip_norm", 5.0), seed=seed)
