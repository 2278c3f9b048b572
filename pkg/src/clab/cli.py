"""``clab`` command line.

Exit codes: 0 success, 2 input error, 3 configuration conflict, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from . import checkpoint, continual, experiments, report
from . import synthdata as sd
from .adapters import AdapterSpec, AdapterState, Method, surrogate_init
from .continual import AlignmentError, EWCConfig, FisherDiagonal
from .metrics import rank_codes
from .model import ModelConfig, ParamStore, init_model
from .training import ConfigConflict, NumericError, TrainConfig, evaluate, train

log = logging.getLogger("clab")

EXIT_OK, EXIT_INPUT, EXIT_CONFLICT, EXIT_NUMERIC = 0, 2, 3, 4

METHODS = {"ft": Method.FULL_FT, "lora": Method.LORA, "spt": Method.SPT, "slct": Method.SLCT}


class InputError(ValueError):
    pass


# --------------------------------------------------------------------------
# file helpers
# --------------------------------------------------------------------------

def _read_json(path) -> object:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from None


def load_manifest(path: str | None) -> experiments.ExperimentManifest:
    """Default manifest, or one read from a JSON file; ``CLAB_SEED`` applies on top."""
    if path is None:
        m = experiments.ExperimentManifest()
    else:
        try:
            m = experiments.ExperimentManifest.from_json(_read_json(path))
        except ValueError as exc:
            raise InputError(str(exc)) from None
    try:
        return m.with_env_seed()
    except ValueError as exc:
        raise InputError(str(exc)) from None


def load_language_specs(path: str | None) -> list[sd.LanguageSpec]:
    """A JSON list of language specs, or a manifest holding ``languages``."""
    if path is None:
        return list(experiments.default_roster())
    raw = _read_json(path)
    if isinstance(raw, dict):
        raw = raw.get("languages")
    if not isinstance(raw, list) or not raw:
        raise InputError(f"{path}: expected a nonempty list of language specs")
    try:
        specs = [sd.LanguageSpec.from_json(x) for x in raw]
        sd.resolve_roster(specs)
    except (ValueError, TypeError, AttributeError) as exc:
        raise InputError(f"{path}: {exc}") from None
    return specs


def load_data_dir(data: str | Path):
    """Resolved languages and every corpus file found in a data directory."""
    d = Path(data)
    if not (d / "languages.json").is_file():
        raise InputError(f"{d} has no languages.json; run `clab gen-data` first")
    specs = load_language_specs(str(d / "languages.json"))
    langs = sd.resolve_roster(specs)
    corpora = {}
    for lid in langs:
        for split in sd.SPLITS:
            p = d / f"{lid}.{split}.jsonl"
            if p.is_file():
                corpora[(lid, split)] = sd.Corpus.load(p)
    return specs, langs, corpora


def _corpus(corpora, lid: str, split: str) -> sd.Corpus:
    if (lid, split) not in corpora:
        raise InputError(f"missing corpus {lid}.{split}.jsonl")
    return corpora[(lid, split)]


def _load_model(path) -> ParamStore:
    try:
        return ParamStore.load(path)
    except FileNotFoundError:
        raise InputError(f"no such checkpoint: {path}") from None
    except checkpoint.ContainerError as exc:
        raise InputError(str(exc)) from None


def _load_artifact(path, base: ParamStore | None):
    """(params, adapter) for a model or adapter artifact."""
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such artifact: {p}")
    magic = p.read_bytes()[:5]
    if magic == checkpoint.MAGIC_MODEL:
        return _load_model(p), None
    if magic == checkpoint.MAGIC_ADAPTER:
        if base is None:
            raise InputError(f"{p} is an adapter; pass --base with the model it adapts")
        state, cfg = AdapterState.load(p)
        if cfg != base.config:
            raise InputError(f"{p} was trained for a different model configuration")
        return base, state
    raise InputError(f"{p} is neither a model checkpoint nor an adapter")


def _langs_arg(raw: str | None, default) -> list[str]:
    return [x for x in raw.split(",") if x] if raw else list(default)


def _surrogate(langs, corpora, target: str, sources) -> str:
    tgt = [u.text for u in _corpus(corpora, target, "train").utterances]
    inv = {langs[s].code: [u.text for u in _corpus(corpora, s, "train").utterances] for s in sources}
    return rank_codes(tgt, inv)[0][0]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    specs = load_language_specs(args.spec)
    corpora = experiments.generate_corpora(specs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    # write to a scratch directory first so a failure leaves nothing behind
    with tempfile.TemporaryDirectory(dir=out.parent) as tmp:
        t = Path(tmp)
        (t / "languages.json").write_text(json.dumps([s.to_json() for s in specs], indent=2, sort_keys=True) + "\n")
        for (lid, split), c in corpora.items():
            c.save(t / f"{lid}.{split}.jsonl")
        out.mkdir(parents=True, exist_ok=True)
        for f in sorted(t.iterdir()):
            shutil.copyfile(f, out / f.name)
    print(f"wrote {len(corpora)} corpus files to {out}")
    return EXIT_OK


def cmd_train_base(args) -> int:
    specs, langs, corpora = load_data_dir(args.data)
    manifest = load_manifest(args.manifest)
    seed = manifest.seed if args.seed is None else args.seed
    base_langs = _langs_arg(args.langs, manifest.base_languages)
    for lid in base_langs:
        if lid not in langs:
            raise InputError(f"unknown language {lid!r}")
    ex = [e for lid in base_langs for e in experiments.to_examples(langs[lid], _corpus(corpora, lid, "train"))]
    dev = {lid: experiments.to_examples(langs[lid], corpora[(lid, "dev")]) for lid in base_langs
           if (lid, "dev") in corpora}
    epochs = args.epochs or manifest.base_epochs
    lr = args.lr or manifest.base_lr
    cfg = TrainConfig(AdapterSpec(Method.FULL_FT), lr_initial=lr, epochs=epochs, batch_size=args.batch_size,
                      seed=seed)
    res = train(init_model(ModelConfig(), seed), ex, cfg, dev=dev, eval_every=args.eval_every)
    mhash = manifest.digest()
    experiments.write_run(Path(args.out),
                          {"manifest_sha256": mhash, "seed": seed, "languages": base_langs, "epochs": epochs,
                           "lr": lr, "model": res.params.config.to_json()},
                          res.log.to_csv(),
                          {"manifest_sha256": mhash, "dev": res.log.epochs[-1] if res.log.epochs else {}},
                          res.params.save)
    print(json.dumps(res.log.epochs[-1] if res.log.epochs else {}, sort_keys=True))
    return EXIT_OK


def cmd_adapt(args) -> int:
    method = METHODS[args.method]
    if args.ewc_fisher and method is not Method.FULL_FT:
        raise ConfigConflict(f"--ewc-fisher applies to --method ft only, not {args.method}")
    if args.lam is not None and not args.ewc_fisher:
        raise ConfigConflict("--lambda needs --ewc-fisher")
    base = _load_model(args.base)
    specs, langs, corpora = load_data_dir(args.data)
    manifest = load_manifest(args.manifest)
    seed = manifest.seed if args.seed is None else args.seed
    target = args.target
    if target not in langs:
        raise InputError(f"unknown target language {target!r}")
    sources = _langs_arg(args.sources, [lid for lid in manifest.base_languages if lid in langs])

    code = args.code
    if code == "auto":
        code = _surrogate(langs, corpora, target, sources)
    kw = {}
    if method is Method.LORA:
        kw["lora_rank"] = args.rank
    elif method is Method.SPT:
        kw["prompt_count"] = args.prompts
    elif method is Method.SLCT:
        init = args.init
        if init == "surrogate:auto":
            init = surrogate_init(_surrogate(langs, corpora, target, sources))
        kw["slct_init"] = init
    spec = AdapterSpec(method, **kw)
    decode_code = spec.slct_code if method is Method.SLCT else code
    ex = experiments.to_examples(langs[target], _corpus(corpora, target, "train"), decode_code)
    dev = {}
    if (target, "dev") in corpora:
        dev[target] = experiments.to_examples(langs[target], corpora[(target, "dev")], decode_code)
    try:
        cfg = TrainConfig(spec, lr_scale=args.lr_scale, epochs=args.epochs or manifest.adapt_epochs,
                          batch_size=args.batch_size, seed=seed)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if args.ewc_fisher:
        fisher = _load_fisher(args.ewc_fisher)
        continual._check_aligned(base.tensors, fisher.values, f"{args.ewc_fisher} vs {args.base}")
        cfg = replace(cfg, ewc=EWCConfig(args.lam if args.lam is not None else 1.0,
                                         {k: v.copy() for k, v in base.items()},
                                         continual.normalize_unit_mean(fisher)))
    res = train(base, ex, cfg, dev=dev or None, eval_every=args.eval_every)
    mhash = manifest.digest()
    conf = {"manifest_sha256": mhash, "seed": seed, "method": args.method, "target": target, "code": decode_code,
            "adapter": spec.to_json(), "lr": cfg.lr, "epochs": cfg.epochs,
            "ewc_fisher": args.ewc_fisher, "lambda": cfg.ewc.lam if cfg.ewc else None}
    saver = (lambda p: res.adapter.save(p, base.config)) if res.adapter is not None else res.params.save
    experiments.write_run(Path(args.out), conf, res.log.to_csv(),
                          {"manifest_sha256": mhash, "dev": res.log.epochs[-1] if res.log.epochs else {}}, saver)
    print(json.dumps(res.log.epochs[-1] if res.log.epochs else {"steps": len(res.log.steps)}, sort_keys=True))
    return EXIT_OK


def _load_fisher(path) -> FisherDiagonal:
    try:
        return FisherDiagonal.load(path)
    except FileNotFoundError:
        raise InputError(f"no such Fisher file: {path}") from None
    except checkpoint.ContainerError as exc:
        raise InputError(str(exc)) from None


def cmd_eval(args) -> int:
    base = _load_model(args.base) if args.base else None
    params, adapter = _load_artifact(args.artifact, base)
    specs, langs, corpora = load_data_dir(args.data)
    wanted = _langs_arg(args.langs, langs)
    missing = [f"{lid}.{args.split}.jsonl" for lid in wanted if (lid, args.split) not in corpora]
    unknown = [lid for lid in wanted if lid not in langs]
    if unknown or missing:
        raise InputError("missing corpora: " + ", ".join(unknown + missing))
    units = ["char", "word"] if args.unit == "both" else [args.unit]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    hyp_dir = out.parent / f"{out.stem}_hyps"
    hyp_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    model_name = args.name or Path(args.artifact).parent.name or "model"
    for lid in wanted:
        lang = langs[lid]
        engage = adapter is not None and (args.adapter_langs is None or lid in args.adapter_langs.split(","))
        code = args.code if (args.code and engage) else lang.code
        if engage and adapter.method is Method.SLCT:
            code = adapter.slct_code
        ex = experiments.to_examples(lang, corpora[(lid, args.split)], code)
        cer, wer, hyps = evaluate(params, ex, adapter if engage else None)
        (hyp_dir / f"{lid}.{args.split}.txt").write_text("".join(h + "\n" for h in hyps))
        for unit, rep in (("char", cer), ("word", wer)):
            if unit in units:
                rows.append([model_name, lid, args.split, unit, f"{rep.rate:.6f}", rep.substitutions,
                             rep.insertions, rep.deletions, rep.ref_length])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "language", "split", "unit", "rate", "S", "I", "D", "N"])
    w.writerows(rows)
    out.write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_fisher(args) -> int:
    base = _load_model(args.base)
    specs, langs, corpora = load_data_dir(args.data)
    if args.lang not in langs:
        raise InputError(f"unknown language {args.lang!r}")
    ex = experiments.to_examples(langs[args.lang], _corpus(corpora, args.lang, args.split), args.code)
    if args.cap is not None and args.cap < 1:
        raise InputError("--cap must be at least 1")
    f = continual.estimate_fisher(base, ex, cap=args.cap, source_tag=args.tag or args.lang)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    digest = f.save(args.out)
    print(json.dumps({"source_tag": f.source_tag, "sample_count": f.sample_count, "trace": f.trace,
                      "sha256": digest}, sort_keys=True))
    return EXIT_OK


def cmd_overlap(args) -> int:
    if len(args.fishers) < 2:
        raise InputError("overlap needs at least two Fisher files")
    fs = [_load_fisher(p) for p in args.fishers]
    for p, f in zip(args.fishers[1:], fs[1:]):
        try:
            continual._check_aligned(fs[0].values, f.values, f"{args.fishers[0]} vs {p}")
        except AlignmentError as exc:
            raise InputError(str(exc)) from None
    tags = [f.source_tag or Path(p).stem for p, f in zip(args.fishers, fs)]
    text = continual.overlap_csv(tags, continual.overlap_matrix(fs))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        path = report.render(args.run_dir)
    except report.IncompleteRun as exc:
        raise InputError(str(exc)) from None
    print(path)
    return EXIT_OK


def cmd_reproduce(args) -> int:
    manifest = load_manifest(args.manifest)
    experiments.run_pipeline(manifest, args.out, progress=lambda s: print(s, flush=True))
    print(report.render(args.out))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clab", description="Continual-learning lab for a toy speech recognizer.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate train/dev/test corpora for a language roster")
    s.add_argument("--spec", help="JSON list of language specs (default: built-in roster)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-base", help="train the base model on the base languages")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--manifest")
    s.add_argument("--langs", help="comma-separated base languages")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--seed", type=int)
    s.add_argument("--eval-every", type=int, default=5)
    s.set_defaults(func=cmd_train_base)

    s = sub.add_parser("adapt", help="adapt a base model to a new language")
    s.add_argument("--base", required=True, help="base checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--method", required=True, choices=sorted(METHODS))
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--manifest")
    s.add_argument("--code", default="auto", help="code for the target language, or 'auto' for the surrogate")
    s.add_argument("--sources", help="languages ranked for the surrogate code (default: base languages)")
    s.add_argument("--init", default="surrogate:auto", help="SLCT init: mean, surrogate:<code> or surrogate:auto")
    s.add_argument("--rank", type=int, default=8, help="LoRA rank")
    s.add_argument("--prompts", type=int, default=20, help="SPT prompt count")
    s.add_argument("--ewc-fisher", help="Fisher file for an EWC penalty (ft only)")
    s.add_argument("--lambda", dest="lam", type=float, help="EWC strength (default 1)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr-scale", type=float, help="toy multiplier on the method's base learning rate")
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--seed", type=int)
    s.add_argument("--eval-every", type=int, default=5)
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("eval", help="score a model or adapter; writes CSV plus hypothesis files")
    s.add_argument("--artifact", required=True, help="model checkpoint or adapter")
    s.add_argument("--base", help="base checkpoint (needed for adapters)")
    s.add_argument("--data", required=True)
    s.add_argument("--langs", help="comma-separated languages (default: all)")
    s.add_argument("--adapter-langs", help="languages decoded with the adapter engaged (default: all)")
    s.add_argument("--code", help="code used where the adapter is engaged (default: each language's own)")
    s.add_argument("--split", default="test", choices=sd.SPLITS)
    s.add_argument("--unit", default="both", choices=["char", "word", "both"])
    s.add_argument("--name", help="model label for the CSV")
    s.add_argument("--out", required=True, help="CSV path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("fisher", help="estimate a diagonal Fisher on one language")
    s.add_argument("--base", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--lang", required=True)
    s.add_argument("--split", default="train", choices=sd.SPLITS)
    s.add_argument("--code", help="code to condition on (default: the language's own)")
    s.add_argument("--cap", type=int)
    s.add_argument("--tag")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fisher)

    s = sub.add_parser("overlap", help="pairwise Fisher overlap matrix as CSV")
    s.add_argument("fishers", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_overlap)

    s = sub.add_parser("report", help="render report.md, CSV summary and figures for a pipeline directory")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("reproduce", help="run the full default experiment and its report")
    s.add_argument("--out", required=True)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigConflict as exc:
        print(f"clab: config conflict: {exc}", file=sys.stderr)
        return EXIT_CONFLICT
    except NumericError as exc:
        print(f"clab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, checkpoint.ContainerError, AlignmentError, FileNotFoundError, ValueError) as exc:
        print(f"clab: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
