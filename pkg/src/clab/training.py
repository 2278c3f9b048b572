"""Training loops: base training, the four adaptation methods, EWC and lambda selection."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterSpec, AdapterState, Method, create_adapter
from .continual import EWCConfig, ewc_loss, fisher_weighted_distance
from .metrics import ScoreReport, corpus_score
from .model import Example, Graph, ParamStore, decode_batch, loss_on_graph, make_batch

log = logging.getLogger(__name__)

# initial learning rates; FT/base use the fine-tuning rate
PAPER_LR = {Method.FULL_FT: 1e-5, Method.SPT: 1e-4, Method.SLCT: 1e-1, Method.LORA: 1e-4}
# toy-scale multipliers on top of the rates above
DEFAULT_LR_SCALE = {Method.FULL_FT: 100.0, Method.SPT: 1.0, Method.SLCT: 1.0, Method.LORA: 1.0}
LAMBDA_GRID = (1e0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NumericError(RuntimeError):
    pass


class ConfigConflict(ValueError):
    pass


@dataclass
class TrainConfig:
    adapter: AdapterSpec = field(default_factory=lambda: AdapterSpec(Method.FULL_FT))
    lr_initial: float | None = None
    lr_scale: float | None = None
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    ewc: EWCConfig | None = None
    lambda_grid: tuple[float, ...] = LAMBDA_GRID

    def __post_init__(self):
        if self.lr_initial is not None and not self.lr_initial > 0:
            raise ValueError("lr_initial must be positive")
        if not self.lambda_grid:
            raise ValueError("lambda grid must be nonempty")
        if list(self.lambda_grid) != sorted(self.lambda_grid, reverse=True):
            raise ValueError("lambda grid must be sorted in descending order")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @property
    def method(self) -> Method:
        return self.adapter.method

    @property
    def lr(self) -> float:
        if self.lr_initial is not None:
            return self.lr_initial
        scale = DEFAULT_LR_SCALE[self.method] if self.lr_scale is None else self.lr_scale
        return PAPER_LR[self.method] * scale


def lr_at(step: int, total: int, lr_initial: float) -> float:
    """Linear decay; ``step`` counts from 1 so the last of ``total`` steps has rate 0."""
    return lr_initial * (1.0 - step / total)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, values: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(x) for k, x in values.items()},
                   {k: np.zeros_like(x) for k, x in values.items()})


def adam_step(values: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              step: int, lr: float) -> None:
    """One bias-corrected Adam update, in place. ``step`` counts from 1."""
    b1, b2 = ADAM_BETAS
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k} at step {step}")
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for k, x in values.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr != 0.0:
            x -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


@dataclass
class TrainLog:
    steps: list[tuple[int, float, float, float | None]] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "penalty"])
        for step, loss, lr, pen in self.steps:
            w.writerow([step, repr(loss), repr(lr), "" if pen is None else repr(pen)])
        return buf.getvalue()


@dataclass
class TrainResult:
    params: ParamStore           # adapted copy for FULL_FT, the untouched base otherwise
    adapter: AdapterState | None
    log: TrainLog


def evaluate(params: ParamStore, examples: Sequence[Example], adapter=None, code: str | None = None,
             batch_size: int = 32) -> tuple[ScoreReport, ScoreReport, list[str]]:
    """Greedy-decode ``examples`` and score them; returns (CER, WER, hypotheses).

    Utterances are decoded in fixed chunks of ``batch_size`` grouped by code,
    so repeated evaluations go through identical arithmetic.
    """
    hyps = [""] * len(examples)
    by_code: dict[str, list[int]] = {}
    for i, ex in enumerate(examples):
        by_code.setdefault(code or ex.code, []).append(i)
    for c, idx in by_code.items():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            outs = decode_batch(params, [examples[i].features for i in chunk], c, adapter)
            for i, o in zip(chunk, outs):
                hyps[i] = o.text
    pairs = [(h, ex.text) for h, ex in zip(hyps, examples)]
    return corpus_score(pairs, "char"), corpus_score(pairs, "word"), hyps


def train(base: ParamStore, examples: Sequence[Example], cfg: TrainConfig,
          dev: Mapping[str, Sequence[Example]] | None = None, eval_every: int = 1,
          loss_fn: Callable[[Graph, list[Example]], ad.Tensor] | None = None) -> TrainResult:
    """Optimize on ``examples``; the base store is never modified.

    ``dev`` maps names to dev example lists scored every ``eval_every``
    epochs and after the last one. ``loss_fn`` replaces the transcription
    loss (used for probe problems).
    """
    if not examples:
        raise ValueError("training corpus is empty")
    method = cfg.method
    if cfg.ewc is not None and method is not Method.FULL_FT:
        raise ConfigConflict("EWC applies to full fine-tuning only")
    if method is Method.FULL_FT:
        params = base.copy()
        adapter = None
        trainables = params.tensors
        mode = "base"
    else:
        params = base
        adapter = create_adapter(cfg.adapter, base.config, base, cfg.seed)
        trainables = adapter.tensors
        mode = "adapter"

    n = len(examples)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    lr0 = cfg.lr
    adam = AdamState.zeros_like(trainables)
    tlog = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch, 303]).permutation(n)
        for b in range(per_epoch):
            chunk = [examples[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            tape = ad.Tape()
            g = Graph(params, adapter, tape, mode)
            loss = loss_fn(g, chunk) if loss_fn else loss_on_graph(g, make_batch(params.config, chunk))
            objective, penalty = loss, None
            if cfg.ewc is not None:
                objective, penalty = ewc_loss(loss, g.p, cfg.ewc)
            value = float(objective.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at step {step + 1}")
            grads = ad.backward(tape, objective)
            if mode == "adapter":
                grads = {k: grads[k] for k in trainables}
            step += 1
            lr = lr_at(step, total, lr0)
            adam_step(trainables, grads, adam, step, lr)
            tlog.steps.append((step, float(loss.data), lr,
                               None if penalty is None else float(penalty.data)))
        last = epoch == cfg.epochs - 1
        if dev and ((epoch + 1) % eval_every == 0 or last):
            row = {"epoch": epoch + 1}
            for name, dex in dev.items():
                cer, wer, _ = evaluate(params, dex, adapter)
                row[f"{name}_cer"] = cer.rate
                row[f"{name}_wer"] = wer.rate
            tlog.epochs.append(row)
            log.info("epoch %d %s", epoch + 1, row)
    return TrainResult(params, adapter, tlog)


@dataclass
class LambdaRow:
    lam: float
    dev_cer_new: float
    forgetting: float
    objective: float
    old_cers: dict[str, float]
    fisher_distance: float


def select_lambda(base: ParamStore, train_examples: Sequence[Example], dev_new: Sequence[Example],
                  dev_old: Mapping[str, Sequence[Example]], cfg: TrainConfig, ewc_template: EWCConfig,
                  grid: Sequence[float] | None = None, criterion: str = "composite",
                  baseline_old: Mapping[str, float] | None = None):
    """One EWC fine-tuning run per lambda; pick the best on the dev sets.

    ``composite`` minimizes new-language dev CER plus the mean increase in
    old-language dev CER over the base model; ``new`` uses the first term only.
    Returns ``(lambda_star, rows, results)`` with one row and result per lambda.
    """
    if criterion not in ("composite", "new"):
        raise ValueError(f"unknown selection criterion {criterion!r}")
    grid = tuple(cfg.lambda_grid if grid is None else grid)
    if not grid:
        raise ValueError("lambda grid must be nonempty")
    if baseline_old is None:
        baseline_old = {k: evaluate(base, ex)[0].rate for k, ex in dev_old.items()}
    rows, results = [], []
    for lam in grid:
        ewc = replace(ewc_template, lam=float(lam))
        res = train(base, train_examples, replace(cfg, ewc=ewc))
        new = evaluate(res.params, dev_new)[0].rate
        old = {k: evaluate(res.params, ex)[0].rate for k, ex in dev_old.items()}
        forgetting = float(np.mean([max(0.0, old[k] - baseline_old[k]) for k in old])) if old else 0.0
        objective = new + forgetting if criterion == "composite" else new
        dist = fisher_weighted_distance(res.params.tensors, ewc.anchor, ewc.fisher)
        rows.append(LambdaRow(float(lam), new, forgetting, objective, old, dist))
        results.append(res)
    best = min(range(len(grid)), key=lambda i: (rows[i].objective, i))
    return rows[best].lam, rows, results
