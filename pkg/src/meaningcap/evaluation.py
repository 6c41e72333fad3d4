"""Caption metrics (BLEU-4, CIDEr, METEOR-lite) and report generation.

METEOR-lite keeps the METEOR scoring formula but matches only exact tokens
and crude suffix-stripped stems; it has no synonym or paraphrase stage and
its numbers are not comparable with official METEOR.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import InputError

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------- BLEU


def _closest_ref_len(cand_len: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def bleu4(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], smoothing: bool = False) -> float:
    """Corpus BLEU with clipped n-gram counts, uniform 1-4 gram weights and brevity penalty.

    With ``smoothing`` each order's precision is add-one smoothed; by
    default any order with no matches makes the score 0.
    """
    if not candidates:
        raise InputError("bleu4: empty candidate set")
    if len(candidates) != len(references):
        raise InputError("bleu4: candidates and references are not aligned")
    matches = [0] * 4
    totals = [0] * 4
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise InputError("bleu4: a candidate has no references")
        cand_len += len(cand)
        ref_len += _closest_ref_len(len(cand), refs)
        for n in range(1, 5):
            counts = ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)

    log_p = 0.0
    for m, t in zip(matches, totals):
        if smoothing:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t) / 4
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p)


# ---------------------------------------------------------------- CIDEr


def _tfidf(counts: Counter, doc_freq: Counter, log_n: float) -> dict:
    return {g: c * (log_n - math.log(max(1.0, doc_freq[g]))) for g, c in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider_scores(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], n: int = 4) -> list[float]:
    """Per-video CIDEr: mean over references of tf-idf cosine, averaged over 1..n grams, x10.

    Document frequencies count how many videos' reference sets contain
    each n-gram.
    """
    if len(candidates) != len(references):
        raise InputError("cider: candidates and references are not aligned")
    if len(candidates) < 2:
        raise InputError("cider: needs at least two videos for document frequencies")
    log_n = math.log(len(candidates))
    scores = [0.0] * len(candidates)
    for k in range(1, n + 1):
        doc_freq: Counter = Counter()
        for refs in references:
            doc_freq.update({g for r in refs for g in ngrams(r, k)})
        for i, (cand, refs) in enumerate(zip(candidates, references)):
            c_vec = _tfidf(ngrams(cand, k), doc_freq, log_n)
            sims = [_cosine(c_vec, _tfidf(ngrams(r, k), doc_freq, log_n)) for r in refs]
            scores[i] += sum(sims) / len(sims) / n
    return [10.0 * s for s in scores]


def cider(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> float:
    scores = cider_scores(candidates, references)
    return sum(scores) / len(scores)


# ---------------------------------------------------------------- METEOR-lite

_SUFFIXES = ("ing", "es", "ed", "s")
ALPHA, BETA, GAMMA = 0.9, 3.0, 0.5


def stem(word: str) -> str:
    for suf in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            return word[: -len(suf)]
    return word


def align(candidate: Tokens, reference: Tokens) -> list[tuple[int, int]]:
    """One-to-one word alignment, exact stage then stem stage.

    Within a stage each candidate word prefers the reference position that
    continues the previous match, else the leftmost free one, which keeps
    chunk counts low for ordinary sentences.
    """
    matched: dict[int, int] = {}
    used: set[int] = set()
    for key in (lambda w: w, stem):
        ref_keys = [key(w) for w in reference]
        for i, w in enumerate(candidate):
            if i in matched:
                continue
            k = key(w)
            free = [j for j, rk in enumerate(ref_keys) if rk == k and j not in used]
            if not free:
                continue
            prev = matched.get(i - 1)
            j = prev + 1 if prev is not None and prev + 1 in free else free[0]
            matched[i] = j
            used.add(j)
    return sorted(matched.items())


def count_chunks(alignment: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in alignment:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_sentence(candidate: Tokens, reference: Tokens) -> float:
    alignment = align(candidate, reference)
    m = len(alignment)
    if m == 0:
        return 0.0
    p, r = m / len(candidate), m / len(reference)
    fmean = p * r / (ALPHA * p + (1 - ALPHA) * r)
    penalty = GAMMA * (count_chunks(alignment) / m) ** BETA
    return fmean * (1 - penalty)


def meteor_lite(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> float:
    """Mean over videos of the best per-reference METEOR-lite score."""
    if len(candidates) != len(references):
        raise InputError("meteor_lite: candidates and references are not aligned")
    if not candidates:
        raise InputError("meteor_lite: empty candidate set")
    scores = [max(meteor_sentence(c, r) for r in refs) for c, refs in zip(candidates, references)]
    return sum(scores) / len(scores)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    split: str
    rows: dict[str, dict[str, float]] = field(default_factory=dict)
    captions: dict[str, dict[str, str]] = field(default_factory=dict)

    def add(self, name: str, candidates: dict[str, list[str]], references: dict[str, list[list[str]]]) -> None:
        vids = sorted(candidates)
        cands = [candidates[v] for v in vids]
        refs = [references[v] for v in vids]
        self.rows[name] = {
            "bleu4": bleu4(cands, refs),
            "meteor_lite": meteor_lite(cands, refs),
            "cider": cider(cands, refs) if len(vids) >= 2 else None,
        }
        self.captions[name] = {v: " ".join(candidates[v]) for v in vids}

    def to_json(self) -> str:
        return json.dumps({"split": self.split, "rows": self.rows, "captions": self.captions}, indent=1, sort_keys=True) + "\n"

    def table(self) -> str:
        header = ("Model", "BLEU4", "METEOR-lite", "CIDEr")
        num = lambda x: "n/a" if x is None else f"{x:.3f}"
        lines = [header] + [
            (name, num(r["bleu4"]), num(r["meteor_lite"]), num(r["cider"])) for name, r in self.rows.items()
        ]
        widths = [max(len(row[i]) for row in lines) for i in range(4)]
        fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
        rule = "-" * len(fmt(header))
        return "\n".join([fmt(header), rule, *map(fmt, lines[1:])]) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "bleu4", "meteor_lite", "cider"])
        for name, r in self.rows.items():
            w.writerow([name, *("" if r[k] is None else repr(r[k]) for k in ("bleu4", "meteor_lite", "cider"))])
        return buf.getvalue()


def evaluate_model(trainer, data, split: str = "test", name: str = "model", report: EvalReport | None = None) -> EvalReport:
    """Greedy-decode every video in ``split`` and score against all its references.

    ``trainer`` is a :class:`~meaningcap.training.Trainer` or a checkpoint path.
    """
    from .training import load_checkpoint

    if isinstance(trainer, (str, Path)):
        trainer = load_checkpoint(trainer)
    vids = data.videos(split)
    if not vids:
        raise InputError(f"split {split!r} has no videos")
    ids = trainer.caption(data, split)
    candidates = {v: trainer.vocab.decode(ids[v]) for v in vids}
    references = {v: [list(c) for c in data.manifest[v].captions] for v in vids}
    report = EvalReport(split) if report is None else report
    report.add(name, candidates, references)
    return report
