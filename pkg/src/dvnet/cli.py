"""Command-line entry point: ``dvnet generate | preprocess | run | report``.

Exit status: 0 on full success, 2 when some files or table rows failed,
1 on usage, configuration or I/O errors.
"""

import argparse
import csv
import io
import os
import sys
from collections import Counter
from pathlib import Path

from . import __version__
from .experiments import (
    EXPERIMENTS,
    ConfigError,
    ExperimentConfig,
    read_result_csv,
    run_experiment,
    worker_count,
)
from .preprocess import PGMError, PipelineError, encode_pgm, read_pgm, roi_pipeline
from .synthdata import _write_atomic, export_dataset, generate_dataset, stratified_split

OK, USAGE, PARTIAL = 0, 1, 2

STAGES = ("median", "equalize", "fft", "butterworth", "inverse_fft", "open_close", "binarize")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing output")


def build_parser():
    parser = _Parser(prog="dvnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dvnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic dual-view dataset")
    _common(p)

    p = sub.add_parser("preprocess", help="enhance ROIs and extract lesion masks")
    p.add_argument("input", help="dataset directory (as written by generate)")
    _common(p)

    p = sub.add_parser("run", help="run one experiment and write its result table")
    p.add_argument("--experiment", choices=EXPERIMENTS)
    _common(p)

    p = sub.add_parser("report", help="merge result tables into a summary")
    p.add_argument("results", nargs="+", help="result CSV files or directories")
    p.add_argument("--out", help="write summary.csv and summary.txt here")
    return parser


def load_config(args):
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "experiment", None):
        config.experiment = args.experiment
    if getattr(args, "out", None):
        config.out = args.out
    # re-validate after overrides
    return ExperimentConfig.from_dict(config.to_dict())


def provenance(config):
    return {"seed": config.seed, "config_hash": config.config_hash, "version": __version__}


def _prepare_out(path, force):
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} already exists and is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_generate(args):
    config = load_config(args)
    out = _prepare_out(args.out or config.out, args.force)
    d = config.dataset
    ds = generate_dataset(d.n_benign, d.n_malignant, d.difficulty, config.seed)
    train, test = stratified_split(ds, config.split.test_fraction, config.seed)
    export_dataset(ds, out, {"train": train, "test": test}, provenance(config))
    print(f"wrote {len(ds)} samples ({ds.benign_count} benign, {ds.malignant_count} malignant) to {out}")
    return OK


def cmd_preprocess(args):
    config = load_config(args)
    src = Path(args.input)
    if not src.is_dir():
        raise UsageError(f"input directory {src} not found")
    out = _prepare_out(args.out or os.path.join(config.out, "preprocessed"), args.force)
    prov = provenance(config)
    comments = [f"{k}={v}" for k, v in sorted(prov.items())]
    report, timings = [], []
    files = sorted(p for p in src.rglob("*.pgm") if out not in p.parents)
    for path in files:
        rel = path.relative_to(src).with_suffix("")
        stage_times = {}
        try:
            enhanced, mask = roi_pipeline(read_pgm(path), config.pipeline, stage_times)
        except (OSError, PGMError, PipelineError) as exc:
            report.append([rel.as_posix(), "error", "", f"{type(exc).__name__}: {exc}",
                           prov["seed"], prov["config_hash"], prov["version"]])
            continue
        target = out / rel.parent
        target.mkdir(parents=True, exist_ok=True)
        _write_atomic(str(target / f"{rel.name}_enhanced.pgm"), encode_pgm(enhanced, comments))
        _write_atomic(str(target / f"{rel.name}_mask.pgm"), encode_pgm(mask * 255, comments))
        report.append([rel.as_posix(), "ok", int(mask.sum()), "",
                       prov["seed"], prov["config_hash"], prov["version"]])
        timings.append([rel.as_posix()] + [f"{stage_times.get(s, 0.0):.6f}" for s in STAGES]
                       + [prov["seed"], prov["config_hash"], prov["version"]])
    _write_atomic(str(out / "preprocess_report.csv"), _csv_text(
        ["file", "status", "mask_area", "error", "seed", "config_hash", "version"], report).encode())
    # wall-clock numbers live apart so the report itself stays reproducible
    _write_atomic(str(out / "preprocess_timings.csv"), _csv_text(
        ["file"] + [f"{s}_seconds" for s in STAGES] + ["seed", "config_hash", "version"],
        timings).encode())
    failed = sum(1 for r in report if r[1] == "error")
    print(f"processed {len(files) - failed} of {len(files)} images into {out}"
          + (f"; {failed} failed (see preprocess_report.csv)" if failed else ""))
    return PARTIAL if failed else OK


def format_table(table_rows, title, width=40):
    lines = [title]
    name_w = max(len(r["method"]) for r in table_rows)
    for r in table_rows:
        if r["auc"] is None:
            lines.append(f"  {r['method']:<{name_w}}  error: {r['error']}")
            continue
        bar = "#" * int(round(r["auc"] * width))
        lines.append(f"  {r['method']:<{name_w}}  AUC {r['auc']:.3f}  acc {r['accuracy']:.3f}  |{bar:<{width}}|")
    return lines


def cmd_run(args):
    config = load_config(args)
    worker_count()  # validate DVNET_THREADS up front
    out = Path(args.out or config.out)
    out.mkdir(parents=True, exist_ok=True)
    table = run_experiment(config)
    _write_atomic(str(out / f"{config.experiment}.csv"), table.to_csv().encode("utf-8"))
    _write_atomic(str(out / f"{config.experiment}.json"), table.to_json().encode("utf-8"))
    rows = [{"method": r.method, "auc": r.report.auc if r.ok else None,
             "accuracy": r.report.accuracy if r.ok else None, "error": r.error} for r in table.rows]
    print("\n".join(format_table(rows, f"{config.experiment} (seed {config.seed}, config {config.config_hash})")))
    return OK if table.complete else PARTIAL


def _collect(paths):
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(q for q in p.glob("*.csv") if q.name != "summary.csv"))
        elif p.is_file():
            found.append(p)
        else:
            print(f"warning: {p} not found", file=sys.stderr)
    tables = []
    for path in found:
        try:
            tables.append((path, read_result_csv(path)))
        except (ConfigError, OSError, UnicodeDecodeError, csv.Error):
            print(f"warning: skipping {path}: not a result table", file=sys.stderr)
    return tables


def cmd_report(args):
    tables = _collect(args.results)
    if not tables:
        raise UsageError("no valid result tables among the inputs")
    all_rows = [r for _, rows in tables for r in rows]
    hashes = Counter(r["config_hash"] for r in all_rows)
    reference = hashes.most_common(1)[0][0]
    versions = sorted({r["version"] for r in all_rows})

    lines = []
    if len(versions) > 1:
        lines.append(f"WARNING: artifact versions differ across inputs: {', '.join(versions)}")
    if len(hashes) > 1:
        lines.append(f"WARNING: config hashes differ; rows not matching {reference} are flagged")
    summary = []
    for path, rows in tables:
        experiment = rows[0]["experiment"]
        seeds = sorted({r["seed"] for r in rows})
        lines.append("")
        lines.extend(format_table(rows, f"{experiment} [{path}] seed {', '.join(seeds)}"))
        for r in rows:
            flag = "" if r["config_hash"] == reference else "config_hash mismatch"
            if flag:
                lines.append(f"  ! {r['method']}: {flag} ({r['config_hash']})")
            summary.append([experiment, r["method"], r["status"],
                            "" if r["auc"] is None else repr(r["auc"]),
                            "" if r["accuracy"] is None else repr(r["accuracy"]),
                            r["seed"], r["config_hash"], r["version"], flag])
    text = "\n".join(lines).lstrip("\n") + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        header = ["experiment", "method", "status", "auc", "accuracy", "seed", "config_hash", "version", "flag"]
        _write_atomic(str(out / "summary.csv"), _csv_text(header, summary).encode("utf-8"))
        _write_atomic(str(out / "summary.txt"), text.encode("utf-8"))
    return OK


COMMANDS = {"generate": cmd_generate, "preprocess": cmd_preprocess, "run": cmd_run, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"dvnet {args.command}: {exc}", file=sys.stderr)
        return USAGE
    except OSError as exc:
        print(f"dvnet {args.command}: I/O error: {exc}", file=sys.stderr)
        return USAGE
    except ValueError as exc:  # parameter errors from the library
        print(f"dvnet {args.command}: {exc}", file=sys.stderr)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
