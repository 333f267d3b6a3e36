"""Caption cleaning, vocabulary construction and fixed-length id encoding."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
MIN_COUNT = 5
MAX_LEN = 16

# 13,094 / 1,646 / 1,673 of 16,413 images
DAISI_RATIOS = (13094 / 16413, 1646 / 16413, 1673 / 16413)

_EDGE_PUNCT = ",;:!?()[]{}\"`"
_NON_ALPHA = re.compile(r"[^a-z\s]")


@dataclass(frozen=True)
class CleaningRules:
    abbreviations: dict = field(default_factory=dict)
    contractions: dict = field(default_factory=dict)
    max_len: int = MAX_LEN

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        keys = set(self.abbreviations) | set(self.contractions)
        for src, dst in {**self.abbreviations, **self.contractions}.items():
            clash = keys & set(dst.split())
            if clash:
                # expanding into another key would make cleaning non-idempotent
                raise ValueError(f"expansion of {src!r} contains rule key(s) {sorted(clash)}")

    @classmethod
    def from_json(cls, path: str | Path | None = None, max_len: int = MAX_LEN) -> "CleaningRules":
        """Load rules from ``path``, or the packaged defaults when omitted."""
        if path is None:
            text = resources.files("surginstruct").joinpath("data/cleaning_rules.json").read_text("utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        blob = json.loads(text)
        return cls({k.lower(): v.lower() for k, v in blob.get("abbreviations", {}).items()},
                   {k.lower(): v.lower() for k, v in blob.get("contractions", {}).items()},
                   max_len)


_default_rules: CleaningRules | None = None


def default_rules() -> CleaningRules:
    global _default_rules
    if _default_rules is None:
        _default_rules = CleaningRules.from_json()
    return _default_rules


def _expand(tok: str, rules: CleaningRules) -> str:
    if tok in rules.abbreviations:
        return rules.abbreviations[tok]
    t = tok.strip(_EDGE_PUNCT)
    if t in rules.abbreviations:
        return rules.abbreviations[t]
    t = t.rstrip(".")
    if t in rules.contractions:
        return rules.contractions[t]
    if t in rules.abbreviations:
        return rules.abbreviations[t]
    return tok


def clean_text(raw: str, rules: CleaningRules | None = None) -> list[str]:
    """Lowercase, expand abbreviations/contractions, drop digits and punctuation, tokenize.

    An empty list marks the sample as droppable.
    """
    rules = rules or default_rules()
    text = raw.lower().replace("’", "'")
    text = " ".join(_expand(t, rules) for t in text.split())
    text = text.replace("'", "")
    text = _NON_ALPHA.sub(" ", text)
    return " ".join(_expand(t, rules) for t in text.split()).split()


class Vocabulary:
    """Token/id bijection with the four reserved ids 0-3 and training counts."""

    def __init__(self, tokens, counts=None):
        self.itos = list(SPECIALS) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.counts = dict(counts or {})

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __contains__(self, token: str) -> bool:
        return token in self.stoi and self.stoi[token] > UNK

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, i: int) -> str:
        return self.itos[i]

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.itos)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:4]) != SPECIALS:
            raise ValueError(f"vocabulary header must be {SPECIALS}, got {lines[:4]}")
        return cls(lines[4:])

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def build_vocabulary(corpora, min_count: int = MIN_COUNT) -> Vocabulary:
    """Keep training tokens seen at least ``min_count`` times.

    Ids are assigned by descending count, ties broken lexicographically.
    """
    counts = Counter()
    n = 0
    for toks in corpora:
        counts.update(toks)
        n += 1
    if n == 0 or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept, {t: counts[t] for t in kept})


def encode(tokens, vocab: Vocabulary, max_len: int = MAX_LEN) -> np.ndarray:
    """BOS + ids of the first ``max_len`` tokens + EOS, right-padded to max_len + 2."""
    ids = [vocab.id(t) for t in tokens[:max_len]]
    out = np.full(max_len + 2, PAD, dtype=np.int64)
    out[0] = BOS
    out[1:1 + len(ids)] = ids
    out[1 + len(ids)] = EOS
    return out


def decode(ids, vocab: Vocabulary) -> list[str]:
    """Tokens up to the first EOS; PAD and BOS are dropped, UNK is kept."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        out.append(vocab.itos[i])
    return out


def split_dataset(records, ratios=DAISI_RATIOS, seed: int = 0):
    """Deterministic per-record partition into (train, val, test)."""
    records = list(records)
    if not records:
        raise ValueError("cannot split an empty dataset")
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(records)
    n_train = int(round(n * ratios[0]))
    n_val = min(int(round(n * ratios[1])), n - n_train)
    perm = np.random.Generator(np.random.Philox(int(seed))).permutation(n)
    pick = lambda idx: [records[i] for i in sorted(idx)]  # noqa: E731
    return (pick(perm[:n_train]), pick(perm[n_train:n_train + n_val]),
            pick(perm[n_train + n_val:]))
