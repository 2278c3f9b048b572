"""Edit-distance scoring (CER/WER) and surrogate-code affinity."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class Alignment:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_distance(a: Sequence, b: Sequence) -> Alignment:
    """Levenshtein distance turning ``a`` into ``b`` with one optimal S/I/D split.

    Insertions are symbols of ``b`` absent from ``a``; deletions symbols of
    ``a`` dropped. Score a hypothesis with ``edit_distance(ref, hyp)``.
    Ties prefer substitution, then deletion, then insertion.
    """
    n, m = len(a), len(b)
    # row i holds (distance, S, I, D) for a[:i] against every prefix of b
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        x = a[i - 1]
        for j in range(1, m + 1):
            d, s, ins, de = prev[j - 1]
            best = (d, s, ins, de) if x == b[j - 1] else (d + 1, s + 1, ins, de)
            d, s, ins, de = prev[j]
            if d + 1 < best[0]:
                best = (d + 1, s, ins, de + 1)
            d, s, ins, de = cur[j - 1]
            if d + 1 < best[0]:
                best = (d + 1, s, ins + 1, de)
            cur.append(best)
        prev = cur
    return Alignment(*prev[m])


def normalize(text: str) -> str:
    """Lowercase, drop Unicode punctuation, collapse whitespace.

    The apostrophe is a letter of the synthetic alphabets and is kept.
    """
    out = []
    for ch in text.lower():
        if ch != "'" and unicodedata.category(ch).startswith("P"):
            continue
        out.append(ch)
    return " ".join("".join(out).split())


def units(text: str, unit: str) -> list[str]:
    if unit == "char":
        return list(text)
    if unit == "word":
        return text.split()
    raise ValueError(f"unit must be 'char' or 'word', got {unit!r}")


@dataclass(frozen=True)
class ScoreReport:
    substitutions: int
    insertions: int
    deletions: int
    ref_length: int
    excluded: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.errors / self.ref_length if self.ref_length else 0.0


def corpus_score(pairs: Iterable[tuple[str, str]], unit: str = "char") -> ScoreReport:
    """Micro-averaged error rate over ``(hyp, ref)`` pairs after normalization.

    Pairs whose reference normalizes to nothing are skipped and counted in
    ``excluded``.
    """
    s = i = d = n = excluded = 0
    seen = False
    for hyp, ref in pairs:
        seen = True
        r = units(normalize(ref), unit)
        if not r:
            excluded += 1
            continue
        a = edit_distance(r, units(normalize(hyp), unit))
        s, i, d, n = s + a.substitutions, i + a.insertions, d + a.deletions, n + len(r)
    if not seen:
        raise ValueError("corpus_score needs at least one pair")
    return ScoreReport(s, i, d, n, excluded)


def _unit_counts(texts: Iterable[str], unit: str) -> Counter:
    c: Counter = Counter()
    for t in texts:
        t = normalize(t)
        c.update(list(t.replace(" ", "")) if unit == "char" else t.split())
    return c


def code_affinity(target_corpus: Iterable[str], source_inventory: Iterable[str], unit: str = "char",
                  mode: str = "coverage") -> float:
    """Share of target unit occurrences that also occur in the source inventory.

    ``unit`` is ``"char"`` or ``"token"`` (whitespace words). ``mode="jaccard"``
    gives set Jaccard similarity of the two unit inventories instead.
    """
    if unit not in ("char", "token"):
        raise ValueError(f"unit must be 'char' or 'token', got {unit!r}")
    target = _unit_counts(target_corpus, unit)
    source = _unit_counts(source_inventory, unit)
    if not target or not source:
        raise ValueError("code_affinity needs nonempty target and source texts")
    if mode == "jaccard":
        a, b = set(target), set(source)
        return len(a & b) / len(a | b)
    if mode != "coverage":
        raise ValueError(f"unknown affinity mode {mode!r}")
    covered = sum(n for u, n in target.items() if u in source)
    return covered / sum(target.values())


def rank_codes(target_corpus: Sequence[str], inventories: dict[str, Sequence[str]],
               mode: str = "coverage") -> list[tuple[str, float, float]]:
    """Codes sorted by (char affinity + token affinity), best first.

    Returns ``(code, char_affinity, token_affinity)`` triples; ties break on code.
    """
    rows = [(code, code_affinity(target_corpus, inv, "char", mode), code_affinity(target_corpus, inv, "token", mode))
            for code, inv in inventories.items()]
    return sorted(rows, key=lambda r: (-(r[1] + r[2]), r[0]))
