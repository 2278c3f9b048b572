"""Markdown/CSV report over a finished pipeline directory."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from . import plotting

REQUIRED = (
    "manifest.json",
    "results/summary.json",
    "results/zero_shot.csv",
    "results/methods.csv",
    "results/forgetting.csv",
    "results/overlap.csv",
)


class IncompleteRun(FileNotFoundError):
    def __init__(self, run_dir, missing):
        self.missing = list(missing)
        super().__init__(f"run directory {run_dir} is incomplete; missing: {', '.join(self.missing)}")


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_overlap(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    tags = rows[0][1:]
    return tags, np.array([[float(x) for x in r[1:]] for r in rows[1:]])


def _pct(x) -> str:
    return f"{100 * float(x):.1f}"


def _table(header: list[str], rows: list[list[str]]) -> str:
    out = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    out += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(out)


def _log_curve(path: Path, every: int = 5) -> list[tuple[int, float]]:
    rows = read_csv(path)
    return [(int(r["step"]), float(r["loss"])) for i, r in enumerate(rows) if i % every == 0]


def render(run_dir: str | Path) -> Path:
    """Write ``report.md``, ``results/report.csv`` and ``figures/*.png``; returns the markdown path."""
    run = Path(run_dir)
    missing = [p for p in REQUIRED if not (run / p).is_file()]
    if missing:
        raise IncompleteRun(run, missing)
    manifest = json.loads((run / "manifest.json").read_text())
    summary = json.loads((run / "results/summary.json").read_text())
    zs = read_csv(run / "results/zero_shot.csv")
    meth = read_csv(run / "results/methods.csv")
    fg = read_csv(run / "results/forgetting.csv")
    tags, overlap = read_overlap(run / "results/overlap.csv")
    target = manifest["target"]
    olds = list(manifest["base_languages"])
    langs = [*olds, target]

    figs = run / "figures"
    plotting.overlap_heatmap(tags, overlap, figs / "overlap.png")
    plotting.method_bars(meth, figs / "methods.png", target)
    plotting.forgetting_bars(fg, langs, figs / "forgetting.png")
    curves = {}
    for name in ["base", *[j["name"] for j in manifest["jobs"]]]:
        p = run / "runs" / name / "log.csv"
        if p.is_file():
            curves[name] = _log_curve(p)
    plotting.loss_curves(curves, figs / "loss.png")
    lam_tables = {}
    for j in manifest["jobs"]:
        p = run / "runs" / j["name"] / "lambda.csv"
        if p.is_file():
            lam_tables[j["name"]] = read_csv(p)
    if lam_tables:
        plotting.lambda_sweep(lam_tables, figs / "lambda.png")

    md = [f"# Report: {manifest['name']}", "",
          f"- manifest sha256: `{summary['manifest_sha256']}`",
          f"- seed: {summary['seed']}",
          f"- target language: {target}; base languages: {', '.join(olds)}",
          f"- surrogate code (highest text affinity): `{summary['surrogate']}`",
          f"- zero-shot baseline code: `{manifest['default_code']}`", ""]

    md += ["## Base model", "", _table(["language", "dev CER %", "dev WER %"],
           [[lid, _pct(summary["base_dev"].get(f"{lid}_cer", "nan")),
             _pct(summary["base_dev"].get(f"{lid}_wer", "nan"))] for lid in olds]), ""]

    md += ["## Zero-shot language-code choice", "",
           f"{target} test set decoded by the base model under each existing code.", "",
           _table(["code", "CER %", "WER %", "char affinity", "token affinity"],
                  [[r["code"] + (" (default)" if r["default"] == "1" else ""), _pct(r["cer"]), _pct(r["wer"]),
                    r["char_affinity"], r["token_affinity"]] for r in zs]), ""]

    md += ["## Adaptation methods", "",
           _table(["method", "CER %", "WER %", "trainable params", "trainable share %"],
                  [[r["method"], _pct(r["cer"]), _pct(r["wer"]), r["trainable"],
                    f"{100 * float(r['fraction']):.4f}"] for r in meth]), "",
           "![methods](figures/methods.png)", ""]

    md += ["## Forgetting", "",
           "Test CER % per language, with the change against the base model in brackets.", "",
           _table(["model", "lambda", *langs],
                  [[r["model"], r["lambda"] or "-",
                    *[f"{_pct(r[f'{lid}_cer'])} ({100 * float(r[f'{lid}_dcer']):+.1f})" for lid in langs]]
                   for r in fg]), "",
           "![forgetting](figures/forgetting.png)", ""]

    for name, rows in lam_tables.items():
        md += [f"### Lambda selection: {name}", "",
               _table(["lambda", "dev CER new %", "forgetting %", "objective", "Fisher distance"],
                      [[r["lambda"], _pct(r["dev_cer_new"]), _pct(r["forgetting"]), r["objective"],
                        r["fisher_distance"]] for r in rows]), ""]
    if lam_tables:
        md += ["![lambda](figures/lambda.png)", ""]

    md += ["## Fisher overlap", "", "```", (run / "results/overlap.csv").read_text().rstrip(), "```", "",
           f"Spearman correlation between overlap with {target} and FT degradation: "
           f"{summary['spearman']:.3f}" if summary.get("spearman") is not None else "", "",
           "![overlap](figures/overlap.png)", "", "## Training loss", "", "![loss](figures/loss.png)", ""]

    text = "\n".join(md)
    (run / "report.md").write_text(text)

    flat = [{"section": "zero_shot", "row": r["code"], "cer": r["cer"], "wer": r["wer"]} for r in zs]
    flat += [{"section": "methods", "row": r["method"], "cer": r["cer"], "wer": r["wer"]} for r in meth]
    for r in fg:
        for lid in langs:
            flat.append({"section": f"forgetting:{lid}", "row": r["model"], "cer": r[f"{lid}_cer"],
                         "wer": r[f"{lid}_wer"]})
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["section", "row", "cer", "wer"], lineterminator="\n")
    w.writeheader()
    w.writerows(flat)
    (run / "results/report.csv").write_text(buf.getvalue())
    return run / "report.md"
