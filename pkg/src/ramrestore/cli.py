"""Command-line front end.

Stages chain through files in the output directory::

    ramrestore synth    --out run   # PNG pairs + manifest.csv
    ramrestore pretrain --out run   # pretrain.ramc + pretrain_log.csv
    ramrestore mac      --out run   # mac_report.txt
    ramrestore finetune --out run   # finetune.ramc + finetune_log.csv
    ramrestore eval     --out run   # eval_results.csv + eval_summary.csv
    ramrestore ablate   --out run   # ablation.csv
    ramrestore report   --out run   # report.txt + report.csv
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import model as modelmod
from .attribution import MacReport, mac_analysis
from .config import RunConfig, load_config
from .degrade import DegradationSpec, PairedSample, make_suite
from .errors import ArtifactMissing, RamError
from .evalkit import evaluate, fmt
from .trainer import ablation_csv, finetune, mac_suite, pretrain, run_ablation, write_log

COMMANDS = ("synth", "pretrain", "mac", "finetune", "eval", "ablate", "report")

PRETRAIN_CKPT = "pretrain.ramc"
FINETUNE_CKPT = "finetune.ramc"
MAC_REPORT = "mac_report.txt"


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise ArtifactMissing(path, what)
    return path


def to_png(img, path):
    from PIL import Image

    arr = np.clip(np.round(np.asarray(img).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def from_png(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


# ---------------------------------------------------------------- subcommands


def cmd_synth(cfg, args, out):
    d = cfg["data"]
    rows = []
    splits = (("train", d["train_images"], cfg.seed), ("val", d["val_images"], cfg.seed + 10_000))
    for split, n, seed in splits:
        (out / split).mkdir(exist_ok=True)
        per_kind = math.ceil(n / len(d["kinds"]))
        suite = make_suite(d["kinds"], per_kind, d["image_size"], seed, name=f"synth-{split}")
        for idx, s in enumerate(suite[:n]):
            stem = f"{split}/{idx:05d}_{s.kind}"
            to_png(s.clean, out / f"{stem}_clean.png")
            to_png(s.degraded, out / f"{stem}_deg.png")
            rows.append([split, idx, s.kind, f"{stem}_clean.png", f"{stem}_deg.png", s.spec.to_text()])
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["split", "index", "kind", "clean", "degraded", "spec"])
    wr.writerows(rows)
    (out / "manifest.csv").write_text(buf.getvalue())
    return f"wrote {len(rows)} pairs to {out}"


def load_synth(data_dir, split="val"):
    """Read PNG pairs of one split back as PairedSamples."""
    data_dir = Path(data_dir)
    manifest = _require(data_dir / "manifest.csv", "dataset manifest")
    suite = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] != split:
                continue
            clean = from_png(_require(data_dir / row["clean"], "clean image"))
            deg = from_png(_require(data_dir / row["degraded"], "degraded image"))
            spec = DegradationSpec.from_text(row["spec"])
            suite.append(PairedSample(clean, deg, spec, int(row["index"])))
    return suite


def cmd_pretrain(cfg, args, out):
    model = modelmod.build(cfg.model_config(), cfg.seed)
    model, trace = pretrain(model, cfg.pretrain_config(), out_dir=out)
    modelmod.save(model, out / PRETRAIN_CKPT, step=trace.records[-1].step)
    write_log(trace, out / "pretrain_log.csv")
    return f"pretrained {trace.records[-1].step} steps -> {out / PRETRAIN_CKPT}"


def cmd_mac(cfg, args, out):
    src = Path(args.checkpoint) if args.checkpoint else Path(args.input or out) / PRETRAIN_CKPT
    model = modelmod.load(_require(src, "checkpoint"))
    pipe = cfg.pipeline()
    report = mac_analysis(model, mac_suite(pipe, cfg.seed), pipe.mac, pipe.k_percent, cfg["mac"]["method"])
    (out / MAC_REPORT).write_text(report.to_text())
    return f"selected {', '.join(report.selected)}"


def cmd_finetune(cfg, args, out):
    base = Path(args.input or out)
    src = Path(args.checkpoint) if args.checkpoint else base / PRETRAIN_CKPT
    report_path = Path(args.report) if args.report else base / MAC_REPORT
    model = modelmod.load(_require(src, "checkpoint"))
    report = MacReport.from_text(_require(report_path, "MAC report").read_text())
    model, trace = finetune(model, report.selected, cfg.finetune_config(), out_dir=out)
    modelmod.save(model, out / FINETUNE_CKPT, step=trace.records[-1].step)
    write_log(trace, out / "finetune_log.csv")
    return f"fine-tuned {', '.join(report.selected)} -> {out / FINETUNE_CKPT}"


def cmd_eval(cfg, args, out):
    base = Path(args.input or out)
    if args.checkpoint:
        src = _require(args.checkpoint, "checkpoint")
    else:
        src = base / FINETUNE_CKPT
        if not src.exists():
            src = _require(base / PRETRAIN_CKPT, "checkpoint")
    model = modelmod.load(src)
    if args.data:
        suite = load_synth(args.data, "val")
    else:
        e = cfg["eval"]
        suite = make_suite(e["kinds"], e["images"], cfg["data"]["image_size"], cfg.seed + 10_000, name="eval")
    mode = args.mode or cfg["eval"]["mode"]
    res = evaluate(model, suite, mode=mode, seed=cfg.seed)
    (out / "eval_results.csv").write_text(res.to_csv())
    (out / "eval_summary.csv").write_text(res.summary_csv())
    return f"{mode}: psnr {fmt(res.overall_psnr)} dB, ssim {fmt(res.overall_ssim)}"


def cmd_ablate(cfg, args, out):
    a = cfg["ablate"]
    rows = run_ablation(a["kind"], a["grid"], cfg.pipeline(), cache_dir=out / "cache")
    (out / "ablation.csv").write_text(ablation_csv(rows))
    return f"{a['kind']}: {len(rows)} rows -> {out / 'ablation.csv'}"


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _table(header, rows):
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda r: "  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip()
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in rows])


def report_tables(base):
    """Summary rows (section, name, psnr, ssim) from whatever results exist."""
    rows = []
    if (base / "eval_summary.csv").exists():
        for r in _read_csv(base / "eval_summary.csv"):
            rows.append(["eval/" + r["mode"], r["kind"], r["mean_psnr_db"], r["mean_ssim"]])
    if (base / "ablation.csv").exists():
        groups = {}
        for r in _read_csv(base / "ablation.csv"):
            groups.setdefault((r["ablation"], r["variant"]), []).append(r)
        for (kind, variant), g in groups.items():
            p = math.fsum(float(r["psnr"]) for r in g) / len(g)
            s = math.fsum(float(r["ssim"]) for r in g) / len(g)
            rows.append([f"ablate/{kind}", variant, fmt(p), fmt(s)])
    return rows


def cmd_report(cfg, args, out):
    base = Path(args.input or out)
    rows = report_tables(base)
    if not rows:
        raise ArtifactMissing(base / "eval_summary.csv", "results (eval_summary.csv or ablation.csv)")
    header = ["section", "name", "psnr_db", "ssim"]
    text = _table(header, rows) + "\n"
    (out / "report.txt").write_text(text)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    wr.writerows(rows)
    (out / "report.csv").write_text(buf.getvalue())
    return text.rstrip()


HANDLERS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "mac": cmd_mac,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ramrestore", description="Masked pre-training and MAC-guided fine-tuning.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--input", help="directory holding upstream artifacts (default: --out)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("mac", "finetune", "eval"):
            p.add_argument("--checkpoint", help="explicit checkpoint path")
        if name == "finetune":
            p.add_argument("--report", help="explicit MAC report path")
        if name == "eval":
            p.add_argument("--data", help="synth output directory to evaluate on (val split)")
            p.add_argument("--mode", choices=("whole", "twin"))
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(_require(args.config, "config")) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.echo())
        message = HANDLERS[args.command](cfg, args, out)
    except RamError as exc:
        print(f"error: {exc.kind}: {' '.join(str(exc).split())}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: OSError: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    if message:
        print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
