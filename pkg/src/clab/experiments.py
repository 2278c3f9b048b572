"""The default roster and the three canned experiments: zero-shot code choice,
method comparison, and forgetting with EWC.

Everything runs from an :class:`ExperimentManifest`. :func:`run_pipeline`
trains the base model and every adaptation job once, writes the run
directories, and stores plain result tables under ``results/``; the
``exp_*`` functions build those tables from a :class:`Lab`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import continual
from . import synthdata as sd
from .adapters import AdapterSpec, AdapterState, Method, surrogate_init, trainable_fraction
from .continual import EWCConfig, FisherDiagonal
from .metrics import rank_codes
from .model import Example, ModelConfig, ParamStore, init_model
from .training import LAMBDA_GRID, TrainConfig, TrainResult, evaluate, select_lambda, train

log = logging.getLogger(__name__)

CORPUS_SEED_STRIDE = 10_000_000


def default_roster() -> tuple[sd.LanguageSpec, ...]:
    """L0 and L1 unrelated roots; L2 and L3 children of L0 at mutation 0.3 and 0.6.

    L2 and L3 share a lineage seed, so every letter mutated in L2 is also
    mutated in L3. Only L0-L2 are seen in base training.
    """
    return (
        sd.make_language("L0", 11, code_token="<L0>", alphabet="abcdefghijklmnopqrst"),
        sd.make_language("L1", 23, code_token="<L1>", alphabet="ghijklmnopqrstuvwxyz'"),
        sd.make_language("L2", 37, code_token="<L2>", alphabet="abcdefghijklmnqrstuv",
                         parent="L0", mutation_rate=0.3),
        sd.make_language("L3", 37, code_token="<L3>", alphabet="abcdefghijklmnstuvwx",
                         parent="L0", mutation_rate=0.6),
    )


@dataclass(frozen=True)
class Job:
    name: str
    method: str                  # ft | lora | spt | slct
    lr_scale: float | None = None
    ewc_source: str | None = None

    @property
    def adapter_method(self) -> Method:
        return {"ft": Method.FULL_FT, "lora": Method.LORA, "spt": Method.SPT, "slct": Method.SLCT}[self.method]


DEFAULT_JOBS = (
    Job("ft", "ft", 10.0),
    Job("lora", "lora", 10.0),
    Job("spt", "spt", 100.0),
    Job("slct", "slct", 1.0),
    Job("ft_ewc_L0", "ft", 10.0, "L0"),
    Job("ft_ewc_L2", "ft", 10.0, "L2"),
)


@dataclass(frozen=True)
class ExperimentManifest:
    name: str = "default"
    seed: int = 0
    languages: tuple[sd.LanguageSpec, ...] = field(default_factory=default_roster)
    base_languages: tuple[str, ...] = ("L0", "L1", "L2")
    target: str = "L3"
    # the code an unsupported language falls back to; the zero-shot baseline
    default_code: str = "<L0>"
    base_epochs: int = 20
    base_lr: float = 1e-3
    batch_size: int = 16
    adapt_epochs: int = 10
    jobs: tuple[Job, ...] = DEFAULT_JOBS
    fisher_split: str = "train"
    fisher_cap: int | None = None
    lambda_grid: tuple[float, ...] = LAMBDA_GRID
    selection: str = "composite"
    # EWC source used for the headline mitigation check
    headline_ewc: str = "L0"

    def __post_init__(self):
        ids = [s.id for s in self.languages]
        if len(set(ids)) != len(ids):
            raise ValueError("language ids must be unique")
        for lid in (*self.base_languages, self.target):
            if lid not in ids:
                raise ValueError(f"manifest references unknown language {lid!r}")
        if self.target in self.base_languages:
            raise ValueError("the target language must not be a base language")
        names = [j.name for j in self.jobs]
        if len(set(names)) != len(names):
            raise ValueError("job names must be unique")
        for j in self.jobs:
            j.adapter_method
            if j.ewc_source is not None and j.ewc_source not in self.base_languages:
                raise ValueError(f"job {j.name}: EWC source {j.ewc_source!r} is not a base language")
        if self.fisher_split not in sd.SPLITS:
            raise ValueError(f"unknown Fisher split {self.fisher_split!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["languages"] = [s.to_json() for s in self.languages]
        d["jobs"] = [asdict(j) for j in self.jobs]
        d["lambda_grid"] = list(self.lambda_grid)
        d["base_languages"] = list(self.base_languages)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "ExperimentManifest":
        d = dict(d)
        try:
            if "languages" in d:
                d["languages"] = tuple(sd.LanguageSpec.from_json(x) for x in d["languages"])
            if "jobs" in d:
                d["jobs"] = tuple(Job(**j) for j in d["jobs"])
            for k in ("base_languages", "lambda_grid"):
                if k in d:
                    d[k] = tuple(d[k])
            return cls(**d)
        except (TypeError, KeyError) as exc:
            raise ValueError(f"malformed manifest: {exc}") from None

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_env_seed(self) -> "ExperimentManifest":
        """Apply the ``CLAB_SEED`` override, if set."""
        raw = os.environ.get("CLAB_SEED")
        if raw is None or raw == "":
            return self
        try:
            return replace(self, seed=int(raw))
        except ValueError:
            raise ValueError(f"CLAB_SEED must be an integer, got {raw!r}") from None


def generate_corpora(specs: Sequence[sd.LanguageSpec],
                     languages: Mapping[str, sd.Language] | None = None) -> dict[tuple[str, str], sd.Corpus]:
    """Every split of every language; seed ranges follow the roster order."""
    langs = languages or sd.resolve_roster(specs)
    return {(s.id, split): sd.generate_corpus(langs[s.id], split, base_seed=CORPUS_SEED_STRIDE * (i + 1))
            for i, s in enumerate(specs) for split in sd.SPLITS}


def to_examples(lang: sd.Language, corpus: sd.Corpus, code: str | None = None) -> list[Example]:
    return [Example(sd.synthesize(lang, u.text, u.utt_seed), u.text, code or lang.code)
            for u in corpus.utterances]


@dataclass
class Adapted:
    """A trained job: FT yields a new store, adapter methods a state over the base."""

    job: Job
    params: ParamStore
    adapter: AdapterState | None
    code: str                     # code used for the target language
    result: TrainResult
    lambda_rows: list | None = None
    lam: float | None = None

    def decode_args(self, lang_id: str, target: str, own_code: str):
        """(params, adapter, code) for decoding ``lang_id``.

        Adapters are engaged for the target language only; old languages go
        through the untouched base (or the fine-tuned store for FT).
        """
        if lang_id == target:
            return self.params, self.adapter, self.code
        return self.params, None, own_code


class Lab:
    """Shared state for one manifest: languages, corpora, base model, jobs."""

    def __init__(self, manifest: ExperimentManifest, corpora=None):
        self.manifest = manifest
        self.languages = sd.resolve_roster(manifest.languages)
        self.corpora = corpora if corpora is not None else generate_corpora(manifest.languages, self.languages)
        self.base: ParamStore | None = None
        self.base_result: TrainResult | None = None
        self.adapted: dict[str, Adapted] = {}
        self.fishers: dict[str, FisherDiagonal] = {}
        self._examples: dict[tuple[str, str, str], list[Example]] = {}
        self._surrogate: str | None = None

    def examples(self, lang_id: str, split: str, code: str | None = None) -> list[Example]:
        lang = self.languages[lang_id]
        key = (lang_id, split, code or lang.code)
        if key not in self._examples:
            self._examples[key] = to_examples(lang, self.corpora[(lang_id, split)], code)
        return self._examples[key]

    def code(self, lang_id: str) -> str:
        return self.languages[lang_id].code

    # -- base ---------------------------------------------------------------

    def train_base(self, config: ModelConfig | None = None) -> TrainResult:
        m = self.manifest
        cfg = config or ModelConfig()
        train_ex = [ex for lid in m.base_languages for ex in self.examples(lid, "train")]
        dev = {lid: self.examples(lid, "dev") for lid in m.base_languages}
        tcfg = TrainConfig(AdapterSpec(Method.FULL_FT), lr_initial=m.base_lr, epochs=m.base_epochs,
                           batch_size=m.batch_size, seed=m.seed)
        res = train(init_model(cfg, m.seed), train_ex, tcfg, dev=dev, eval_every=5)
        self.base, self.base_result = res.params, res
        return res

    def surrogate_ranking(self) -> list[tuple[str, float, float]]:
        m = self.manifest
        target = [u.text for u in self.corpora[(m.target, "train")].utterances]
        inv = {self.code(lid): [u.text for u in self.corpora[(lid, "train")].utterances]
               for lid in m.base_languages}
        return rank_codes(target, inv)

    @property
    def surrogate(self) -> str:
        if self._surrogate is None:
            self._surrogate = self.surrogate_ranking()[0][0]
        return self._surrogate

    # -- Fisher -------------------------------------------------------------

    def fisher(self, lang_id: str) -> FisherDiagonal:
        """Base-model Fisher on ``lang_id``; the target language uses the surrogate code."""
        if lang_id not in self.fishers:
            code = self.surrogate if lang_id == self.manifest.target else None
            ex = self.examples(lang_id, self.manifest.fisher_split, code)
            self.fishers[lang_id] = continual.estimate_fisher(self.base, ex, cap=self.manifest.fisher_cap,
                                                              source_tag=lang_id)
        return self.fishers[lang_id]

    # -- adaptation ---------------------------------------------------------

    def run_job(self, job: Job) -> Adapted:
        m = self.manifest
        method = job.adapter_method
        if method is Method.SLCT:
            spec = AdapterSpec(method, slct_init=surrogate_init(self.surrogate))
            code = spec.slct_code
        else:
            spec = AdapterSpec(method)
            code = self.surrogate
        cfg = TrainConfig(spec, lr_scale=job.lr_scale, epochs=m.adapt_epochs, batch_size=m.batch_size,
                          seed=m.seed, lambda_grid=m.lambda_grid)
        train_ex = self.examples(m.target, "train", code)
        if job.ewc_source is None:
            res = train(self.base, train_ex, cfg)
            out = Adapted(job, res.params, res.adapter, code, res)
        else:
            fisher = continual.normalize_unit_mean(self.fisher(job.ewc_source))
            template = EWCConfig(0.0, {k: v.copy() for k, v in self.base.items()}, fisher)
            dev_old = {lid: self.examples(lid, "dev") for lid in m.base_languages}
            lam, rows, results = select_lambda(self.base, train_ex, self.examples(m.target, "dev", code), dev_old,
                                               cfg, template, criterion=m.selection,
                                               baseline_old=self.base_dev_cers())
            res = results[[r.lam for r in rows].index(lam)]
            out = Adapted(job, res.params, None, code, res, rows, lam)
        self.adapted[job.name] = out
        return out

    def base_dev_cers(self) -> dict[str, float]:
        if not hasattr(self, "_base_dev"):
            self._base_dev = {lid: evaluate(self.base, self.examples(lid, "dev"))[0].rate
                              for lid in self.manifest.base_languages}
        return self._base_dev

    # -- scoring ------------------------------------------------------------

    def score(self, model: str, lang_id: str, split: str = "test"):
        """(CER report, WER report, hypotheses) of a named model on one language."""
        if model == "base":
            params, adapter, code = self.base, None, self.code(lang_id)
            if lang_id == self.manifest.target:
                code = self.manifest.default_code
        else:
            params, adapter, code = self.adapted[model].decode_args(lang_id, self.manifest.target,
                                                                    self.code(lang_id))
        return evaluate(params, self.examples(lang_id, split, code), adapter)


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------

def exp_zero_shot(lab: Lab) -> list[dict]:
    """L3 test CER/WER under every base-language code, the SLCT row if trained,
    and each code's affinity with the target text."""
    m = lab.manifest
    ranking = {code: (c, t) for code, c, t in lab.surrogate_ranking()}
    rows = []
    test = m.target
    for lid in m.base_languages:
        code = lab.code(lid)
        cer, wer, _ = evaluate(lab.base, lab.examples(test, "test", code))
        c, t = ranking[code]
        rows.append({"code": code, "cer": cer.rate, "wer": wer.rate, "char_affinity": c, "token_affinity": t,
                     "default": code == m.default_code, "surrogate": code == lab.surrogate})
    for name, a in lab.adapted.items():
        if a.job.method == "slct" and a.job.ewc_source is None:
            cer, wer, _ = lab.score(name, test)
            rows.append({"code": f"SLCT({a.adapter.slct_code})", "cer": cer.rate, "wer": wer.rate,
                         "char_affinity": "", "token_affinity": "", "default": False, "surrogate": False})
    return rows


METHOD_ROWS = (("Baseline", None), ("FT", "ft"), ("LoRA", "lora"), ("SPT", "spt"), ("SLCT", "slct"))


def exp_methods(lab: Lab) -> list[dict]:
    """Target-language test scores per method, with trainable-parameter shares."""
    m = lab.manifest
    cfg = lab.base.config
    rows = []
    for label, job in METHOD_ROWS:
        if job is None:
            cer, wer, _ = lab.score("base", m.target)
            rows.append({"method": label, "cer": cer.rate, "wer": wer.rate, "trainable": 0, "fraction": 0.0})
            continue
        if job not in lab.adapted:
            continue
        a = lab.adapted[job]
        cer, wer, _ = lab.score(job, m.target)
        spec = a.adapter.spec if a.adapter is not None else AdapterSpec(Method.FULL_FT)
        count, frac = trainable_fraction(spec, cfg)
        rows.append({"method": label, "cer": cer.rate, "wer": wer.rate, "trainable": count, "fraction": frac})
    return rows


def _model_label(name: str, a: Adapted | None) -> str:
    if a is None:
        return "Baseline"
    base = {"ft": "FT", "lora": "LoRA", "spt": "SPT", "slct": "SLCT"}[a.job.method]
    return f"{base}+EWC({a.job.ewc_source})" if a.job.ewc_source else base


def exp_forgetting(lab: Lab) -> dict:
    """Every model on every language's test set, deltas against the base,
    the Fisher overlap matrix, and the overlap/forgetting rank correlation."""
    m = lab.manifest
    langs = [*m.base_languages, m.target]
    models = ["base", *lab.adapted]
    scores: dict[str, dict[str, tuple[float, float]]] = {}
    hyps: dict[str, dict[str, list[str]]] = {}
    for name in models:
        scores[name], hyps[name] = {}, {}
        for lid in langs:
            cer, wer, h = lab.score(name, lid)
            scores[name][lid] = (cer.rate, wer.rate)
            hyps[name][lid] = h
    rows = []
    for name in models:
        a = lab.adapted.get(name)
        row = {"model": _model_label(name, a), "job": name,
               "lambda": "" if a is None or a.lam is None else a.lam}
        for lid in langs:
            cer, wer = scores[name][lid]
            row[f"{lid}_cer"] = cer
            row[f"{lid}_wer"] = wer
            row[f"{lid}_dcer"] = cer - scores["base"][lid][0]
        rows.append(row)

    tags = langs
    fishers = [lab.fisher(t) for t in tags]
    matrix = continual.overlap_matrix(fishers)
    out = {"rows": rows, "scores": scores, "hyps": hyps, "overlap_tags": tags, "overlap": matrix}
    if "ft" in lab.adapted:
        olds = list(m.base_languages)
        deg = [scores["ft"][lid][0] - scores["base"][lid][0] for lid in olds]
        ov = [matrix[tags.index(m.target), tags.index(lid)] for lid in olds]
        out["spearman"] = float(spearmanr(ov, deg).statistic) if len(olds) >= 3 else float("nan")
        out["ft_degradation"] = dict(zip(olds, deg))
        out["overlap_with_target"] = dict(zip(olds, ov))
    return out


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

def _csv(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6f}"
    return str(x)


def write_run(run_dir: Path, config: Mapping, log_csv: str, summary: Mapping, save_artifact) -> None:
    """Run directory: ``config.json``, ``log.csv``, ``summary.json``, ``artifact.bin``."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    (run_dir / "log.csv").write_text(log_csv)
    digest = save_artifact(run_dir / "artifact.bin")
    (run_dir / "summary.json").write_text(json.dumps({**summary, "artifact_sha256": digest},
                                                     indent=2, sort_keys=True) + "\n")


def save_corpora(lab: Lab, data_dir: Path) -> None:
    data_dir.mkdir(parents=True, exist_ok=True)
    (data_dir / "languages.json").write_text(
        json.dumps([s.to_json() for s in lab.manifest.languages], indent=2, sort_keys=True) + "\n")
    for (lid, split), corpus in lab.corpora.items():
        corpus.save(data_dir / f"{lid}.{split}.jsonl")


def run_pipeline(manifest: ExperimentManifest, out_dir: str | Path, progress=None) -> Lab:
    """Train, adapt, evaluate and write every table of the default experiment."""
    out = Path(out_dir)
    say = progress or log.info
    timings = {}
    t_all = time.perf_counter()
    lab = Lab(manifest)
    mhash = manifest.digest()
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    save_corpora(lab, out / "data")

    t = time.perf_counter()
    say("training base model")
    res = lab.train_base()
    timings["base"] = time.perf_counter() - t
    write_run(out / "runs" / "base",
              {"manifest_sha256": mhash, "seed": manifest.seed, "model": lab.base.config.to_json(),
               "languages": list(manifest.base_languages), "epochs": manifest.base_epochs, "lr": manifest.base_lr},
              res.log.to_csv(), {"manifest_sha256": mhash, "dev": res.log.epochs[-1] if res.log.epochs else {}},
              lab.base.save)
    say(f"base dev: {res.log.epochs[-1] if res.log.epochs else {}}")

    for job in manifest.jobs:
        t = time.perf_counter()
        say(f"adapting: {job.name}")
        a = lab.run_job(job)
        timings[job.name] = time.perf_counter() - t
        cfg = {"manifest_sha256": mhash, "seed": manifest.seed, "job": asdict(job), "code": a.code,
               "epochs": manifest.adapt_epochs}
        summary = {"manifest_sha256": mhash, "lambda": a.lam}
        if a.adapter is not None:
            saver = lambda p, a=a: a.adapter.save(p, lab.base.config)
            cfg["adapter"] = a.adapter.spec.to_json()
        else:
            saver = a.params.save
        write_run(out / "runs" / job.name, cfg, a.result.log.to_csv(), summary, saver)
        if a.lambda_rows is not None:
            rows = [{"lambda": r.lam, "dev_cer_new": r.dev_cer_new, "forgetting": r.forgetting,
                     "objective": r.objective, "fisher_distance": r.fisher_distance,
                     **{f"{k}_dev_cer": v for k, v in r.old_cers.items()}} for r in a.lambda_rows]
            cols = ["lambda", "dev_cer_new", "forgetting", "objective", "fisher_distance",
                    *[f"{k}_dev_cer" for k in manifest.base_languages]]
            (out / "runs" / job.name / "lambda.csv").write_text(_csv(rows, cols))

    t = time.perf_counter()
    say("evaluating")
    results = out / "results"
    results.mkdir(exist_ok=True)
    zs = exp_zero_shot(lab)
    meth = exp_methods(lab)
    fg = exp_forgetting(lab)
    timings["evaluate"] = time.perf_counter() - t
    fisher_dir = out / "fishers"
    fisher_dir.mkdir(exist_ok=True)
    for tag, f in lab.fishers.items():
        f.save(fisher_dir / f"{tag}.bin")
    for name, per_lang in fg["hyps"].items():
        hdir = out / "runs" / name / "hyps"
        hdir.mkdir(parents=True, exist_ok=True)
        for lid, hs in per_lang.items():
            (hdir / f"{lid}.test.txt").write_text("".join(h + "\n" for h in hs))

    langs = [*manifest.base_languages, manifest.target]
    (results / "zero_shot.csv").write_text(
        _csv(zs, ["code", "cer", "wer", "char_affinity", "token_affinity", "default", "surrogate"]))
    (results / "methods.csv").write_text(_csv(meth, ["method", "cer", "wer", "trainable", "fraction"]))
    (results / "forgetting.csv").write_text(
        _csv(fg["rows"], ["model", "job", "lambda",
                          *[f"{lid}_{k}" for lid in langs for k in ("cer", "wer", "dcer")]]))
    (results / "overlap.csv").write_text(continual.overlap_csv(fg["overlap_tags"], fg["overlap"]))
    summary = {
        "manifest_sha256": mhash,
        "seed": manifest.seed,
        "surrogate": lab.surrogate,
        "surrogate_ranking": lab.surrogate_ranking(),
        "base_dev": res.log.epochs[-1] if res.log.epochs else {},
        "spearman": fg.get("spearman"),
        "ft_degradation": fg.get("ft_degradation"),
        "overlap_with_target": fg.get("overlap_with_target"),
        "lambda_star": {n: a.lam for n, a in lab.adapted.items() if a.lam is not None},
        "headline_ewc": manifest.headline_ewc,
    }
    (results / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    timings["total"] = time.perf_counter() - t_all
    # wall-clock numbers live apart from the deterministic outputs
    (out / "timing.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return lab
