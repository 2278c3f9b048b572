"""Diagonal Fisher information, the EWC penalty and Fisher overlap."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .model import Example, ParamStore, nll_loss


@dataclass
class FisherDiagonal:
    values: dict[str, np.ndarray]
    sample_count: int
    source_tag: str

    @property
    def trace(self) -> float:
        return float(sum(v.sum() for v in self.values.values()))

    def scaled(self, factor: float) -> "FisherDiagonal":
        return FisherDiagonal({k: v * factor for k, v in self.values.items()}, self.sample_count, self.source_tag)

    def save(self, path) -> str:
        header = {"sample_count": self.sample_count, "source_tag": self.source_tag}
        return checkpoint.save(path, checkpoint.MAGIC_FISHER, header, self.values)

    @classmethod
    def load(cls, path) -> "FisherDiagonal":
        header, values = checkpoint.load(path, checkpoint.MAGIC_FISHER)
        return cls(values, int(header["sample_count"]), str(header["source_tag"]))


class AlignmentError(ValueError):
    pass


def _check_aligned(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], what: str) -> None:
    if list(a) != list(b):
        raise AlignmentError(f"{what}: parameter names differ")
    for k in a:
        if a[k].shape != b[k].shape:
            raise AlignmentError(f"{what}: shape of {k} differs ({a[k].shape} vs {b[k].shape})")


def estimate_fisher(params: ParamStore, examples: Sequence[Example], cap: int | None = None,
                    source_tag: str = "") -> FisherDiagonal:
    """Empirical Fisher: mean squared per-utterance gradient of the reference NLL.

    Utterances are taken in the given order, the first ``cap`` of them.
    """
    if not examples:
        raise ValueError("estimate_fisher needs a nonempty corpus")
    if cap is not None and cap < 1:
        raise ValueError("cap must be at least 1")
    used = list(examples)[:cap] if cap is not None else list(examples)
    acc = {k: np.zeros_like(v) for k, v in params.items()}
    for ex in used:
        tape = ad.Tape()
        loss = nll_loss(params, [ex], tape=tape, trainable="base")
        for k, g in ad.backward(tape, loss).items():
            acc[k] += g * g
    n = len(used)
    return FisherDiagonal({k: v / n for k, v in acc.items()}, n, source_tag)


@dataclass
class EWCConfig:
    lam: float
    anchor: dict[str, np.ndarray]
    fisher: FisherDiagonal

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"EWC lambda must be finite and nonnegative, got {self.lam}")
        _check_aligned(self.anchor, self.fisher.values, "EWC anchor vs Fisher")


def ewc_penalty(leaves: Mapping[str, ad.Tensor], cfg: EWCConfig) -> ad.Tensor | None:
    """Sum over parameters of F_i (theta_i - anchor_i)^2, or None if nothing is tracked."""
    terms = [ad.weighted_sqdist(leaves[k], cfg.anchor[k], cfg.fisher.values[k])
             for k in cfg.anchor if k in leaves and leaves[k].tracked]
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def ewc_loss(task_loss: ad.Tensor, leaves: Mapping[str, ad.Tensor], cfg: EWCConfig):
    """``task_loss + lam * penalty``; returns ``(total, penalty)``."""
    names = list(leaves)
    if set(names) != set(cfg.anchor):
        raise AlignmentError("EWC: parameter names do not match the anchor")
    for k in names:
        if leaves[k].shape != cfg.anchor[k].shape:
            raise AlignmentError(f"EWC: shape of {k} differs from the anchor")
    penalty = ewc_penalty(leaves, cfg)
    if penalty is None or cfg.lam == 0.0:
        return task_loss, penalty
    return ad.add(task_loss, ad.scale(penalty, cfg.lam)), penalty


def fisher_weighted_distance(params: Mapping[str, np.ndarray], anchor: Mapping[str, np.ndarray],
                             fisher: FisherDiagonal) -> float:
    return float(sum((fisher.values[k] * (params[k] - anchor[k]) ** 2).sum() for k in anchor))


def normalize_unit_trace(f: FisherDiagonal) -> FisherDiagonal:
    tr = f.trace
    if not tr > 0:
        raise ValueError(f"cannot normalize Fisher {f.source_tag!r}: trace is {tr} (all gradients zero?)")
    return FisherDiagonal({k: v / tr for k, v in f.values.items()}, f.sample_count, f.source_tag)


def normalize_unit_mean(f: FisherDiagonal) -> FisherDiagonal:
    """Rescale so the average entry is 1 (unit trace times the parameter count).

    Keeps the relative importances and makes lambda independent of the raw
    gradient magnitude, which is tiny for a well-fit toy model.
    """
    n = sum(v.size for v in f.values.values())
    return normalize_unit_trace(f).scaled(float(n))


def _flat(f: FisherDiagonal) -> np.ndarray:
    return np.concatenate([v.reshape(-1) for v in f.values.values()])


def frechet_sq(f1: FisherDiagonal, f2: FisherDiagonal) -> float:
    """Half the squared Frobenius distance between square roots of unit-trace diagonals."""
    _check_aligned(f1.values, f2.values, "Fisher overlap")
    a, b = _flat(normalize_unit_trace(f1)), _flat(normalize_unit_trace(f2))
    return 0.5 * float(((np.sqrt(a) - np.sqrt(b)) ** 2).sum())


def fisher_overlap(f1: FisherDiagonal, f2: FisherDiagonal) -> float:
    """``1 - d^2``; for diagonals this is the Bhattacharyya coefficient."""
    _check_aligned(f1.values, f2.values, "Fisher overlap")
    a, b = _flat(normalize_unit_trace(f1)), _flat(normalize_unit_trace(f2))
    return float(min(1.0, np.sqrt(a * b).sum()))


def overlap_matrix(fishers: Sequence[FisherDiagonal]) -> np.ndarray:
    n = len(fishers)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = fisher_overlap(fishers[i], fishers[j])
    return out


def overlap_csv(tags: Sequence[str], matrix: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(tags))
    for tag, row in zip(tags, matrix):
        w.writerow([tag] + [f"{x:.6f}" for x in row])
    return buf.getvalue()
