"""Caption metrics: corpus BLEU-1..4, ROUGE-L, an exact-match METEOR, CIDEr-D.

All scorers take token lists.  References are per image lists of token
lists so several references per image work, although the captioning data
here carries one.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
MAX_ORDER = 4


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _as_ref_lists(refs):
    """Accept either one token list per image or a list of token lists per image."""
    out = []
    for r in refs:
        if r and isinstance(r[0], str):
            out.append([list(r)])
        elif not r:
            out.append([[]])
        else:
            out.append([list(x) for x in r])
    return out


# ---------------------------------------------------------------- BLEU

def bleu(hyps, refs, n: int = 4) -> float:
    """Corpus BLEU-n: clipped n-gram precisions, geometric mean, brevity penalty.

    No smoothing: any order without a single match yields 0.
    """
    if not 1 <= n <= MAX_ORDER:
        raise ValueError(f"BLEU order must be in 1..{MAX_ORDER}")
    refs = _as_ref_lists(refs)
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference corpora differ in length")
    if not hyps:
        raise ValueError("empty corpus")
    matched = [0] * n
    total = [0] * n
    c = r = 0
    for hyp, rs in zip(hyps, refs):
        c += len(hyp)
        # closest reference length, shorter wins ties
        r += min((abs(len(x) - len(hyp)), len(x)) for x in rs)[1]
        for k in range(1, n + 1):
            h = ngrams(hyp, k)
            cap = Counter()
            for x in rs:
                cap |= ngrams(x, k)
            matched[k - 1] += sum(min(cnt, cap[g]) for g, cnt in h.items())
            total[k - 1] += max(0, len(hyp) - k + 1)
    if c == 0 or min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def sentence_bleu(hyp, ref, n: int = 4) -> float:
    return bleu([hyp], [ref], n)


# ---------------------------------------------------------------- ROUGE-L

def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp, ref, beta: float = ROUGE_BETA) -> float:
    """LCS-based F-measure, best over references when several are given."""
    rs = _as_ref_lists([ref])[0]
    if not hyp:
        return 0.0
    best = 0.0
    for r in rs:
        if not r:
            raise ValueError("ROUGE-L needs a non-empty reference")
        lcs = lcs_length(hyp, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(hyp), lcs / len(r)
        best = max(best, (1 + beta**2) * p * rec / (rec + beta**2 * p))
    return best


def corpus_rouge_l(hyps, refs) -> float:
    return float(np.mean([rouge_l(h, r) for h, r in zip(hyps, refs)]))


# ---------------------------------------------------------------- METEOR (exact match only)

def align(hyp, ref):
    """Exact-match alignment with the most matches, then the fewest chunks.

    Dynamic programme over hypothesis positions; the state is the set of
    used reference positions plus the reference position matched by the
    previous hypothesis token.  Returns (matches, chunks).
    """
    where = {}
    for j, w in enumerate(ref):
        where.setdefault(w, []).append(j)
    # state -> (matches, -chunks); lexicographic max
    states = {(0, -1): (0, 0)}
    for w in hyp:
        nxt = {}
        for (used, last), (m, negc) in states.items():
            key = (used, -1)
            if nxt.get(key, (-1, 0)) < (m, negc):
                nxt[key] = (m, negc)
            for j in where.get(w, ()):
                if used >> j & 1:
                    continue
                val = (m + 1, negc - (0 if last >= 0 and j == last + 1 else 1))
                key = (used | 1 << j, j)
                if nxt.get(key, (-1, 0)) < val:
                    nxt[key] = val
        states = nxt
    m, negc = max(states.values())
    return m, -negc


def meteor_lite(hyp, ref) -> float:
    """F_mean = 10PR/(R+9P) with fragmentation penalty 0.5 (chunks/matches)^3."""
    best = 0.0
    for r in _as_ref_lists([ref])[0]:
        if not r:
            raise ValueError("METEOR needs a non-empty reference")
        if not hyp:
            continue
        m, chunks = align(hyp, r)
        if m == 0:
            continue
        p, rec = m / len(hyp), m / len(r)
        fmean = 10 * p * rec / (rec + 9 * p)
        best = max(best, fmean * (1 - 0.5 * (chunks / m) ** 3))
    return best


def corpus_meteor(hyps, refs) -> float:
    return float(np.mean([meteor_lite(h, r) for h, r in zip(hyps, refs)]))


# ---------------------------------------------------------------- CIDEr-D

class CiderD:
    """CIDEr-D with a document-frequency table frozen at construction.

    Weights are tf * (log N - log df) per n-gram, N the number of reference
    images; per order the similarity is the clipped cosine times a Gaussian
    length penalty (sigma 6); the score is 10 x the mean over orders and refs.
    """

    def __init__(self, reference_corpus, sigma: float = CIDER_SIGMA):
        refs = _as_ref_lists(reference_corpus)
        if not refs:
            raise ValueError("CIDEr-D needs at least one reference image")
        self.sigma = sigma
        self.df = Counter()
        for rs in refs:
            seen = set()
            for r in rs:
                for k in range(1, MAX_ORDER + 1):
                    seen.update(ngrams(r, k))
            self.df.update(seen)
        self.log_n = math.log(float(len(refs)))

    def _vec(self, tokens):
        vecs, norms = [], []
        for k in range(1, MAX_ORDER + 1):
            v = {g: tf * (self.log_n - math.log(max(1.0, self.df.get(g, 0.0))))
                 for g, tf in ngrams(tokens, k).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms

    def sentence_score(self, hyp, refs) -> float:
        rs = _as_ref_lists([refs])[0]
        if not hyp:
            return 0.0
        hv, hn = self._vec(hyp)
        total = 0.0
        for r in rs:
            rv, rn = self._vec(r)
            delta = len(hyp) - len(r)
            pen = math.exp(-(delta * delta) / (2 * self.sigma**2))
            for k in range(MAX_ORDER):
                if hn[k] == 0.0 or rn[k] == 0.0:
                    continue
                dot = sum(min(x, rv[k][g]) * rv[k][g] for g, x in hv[k].items() if g in rv[k])
                total += pen * dot / (hn[k] * rn[k])
        return 10.0 * total / (MAX_ORDER * len(rs))

    def corpus_score(self, hyps, refs) -> tuple[float, list]:
        refs = _as_ref_lists(refs)
        scores = [self.sentence_score(h, r) for h, r in zip(hyps, refs)]
        return float(np.mean(scores)) if scores else 0.0, scores


def cider_d(hyps, refs, idf_corpus=None) -> float:
    """Corpus CIDEr-D; document frequencies come from ``idf_corpus`` or ``refs``."""
    scorer = CiderD(refs if idf_corpus is None else idf_corpus)
    return scorer.corpus_score(hyps, refs)[0]


# ---------------------------------------------------------------- report

@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    meteor: float
    cider: float
    spice: None = None
    n: int = 0
    per_sentence: list = field(default_factory=list)

    COLUMNS = ("B1", "B2", "B3", "B4", "C", "M", "R", "S")

    def row(self) -> list:
        """Scores x100 at one decimal in B1 B2 B3 B4 C M R S order; SPICE stays None."""
        vals = (self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.cider, self.meteor, self.rouge_l)
        return [round(100 * v, 1) for v in vals] + [None]

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_sentence")
        return d

    def to_dict(self) -> dict:
        d = asdict(self)
        d["table_row"] = dict(zip(self.COLUMNS, self.row()))
        return d


def evaluate(hyps, refs, cider_scorer: CiderD | None = None, ids=None) -> MetricReport:
    """Score a corpus.  ``cider_scorer`` fixes the IDF table; by default it is built from ``refs``."""
    refs = _as_ref_lists(refs)
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference corpora differ in length")
    if not hyps:
        raise ValueError("empty corpus")
    scorer = cider_scorer or CiderD(refs)
    cider, cider_each = scorer.corpus_score(hyps, refs)
    rouge_each = [rouge_l(h, r) for h, r in zip(hyps, refs)]
    meteor_each = [meteor_lite(h, r) for h, r in zip(hyps, refs)]
    ids = list(ids) if ids is not None else list(range(len(hyps)))
    per = [{"id": i, "bleu4": sentence_bleu(h, r, 4), "rouge_l": rl, "meteor": me, "cider": ci}
           for i, h, r, rl, me, ci in zip(ids, hyps, refs, rouge_each, meteor_each, cider_each)]
    return MetricReport(
        bleu1=bleu(hyps, refs, 1), bleu2=bleu(hyps, refs, 2),
        bleu3=bleu(hyps, refs, 3), bleu4=bleu(hyps, refs, 4),
        rouge_l=float(np.mean(rouge_each)), meteor=float(np.mean(meteor_each)),
        cider=cider, n=len(hyps), per_sentence=per)
