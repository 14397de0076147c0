"""Command-line entry point: ``affuse <command> [options]``.

Every command resolves its options as defaults <- ``--config`` JSON <- flags,
writes the resolved result to ``<out>/config.json`` and can be re-run from that
file alone.  Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (CLASS_NAMES, MODALITIES, SynthConfig, carve_students, dataset_digest,
                   generate_synthetic, load_dataset, save_dataset)
from .degradation import CLEAN, DegradationSpec, spec_grid
from .encoders import MultimodalModel
from .errors import AffuseError, ValidationError
from .training import (ALPHA_GRID, VARIANTS, TrainConfig, ablation_configs, cross_validate,
                       evaluate, export_embeddings, permutation_importance, train_model,
                       variant_config)

log = logging.getLogger("affuse")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

COMMANDS = ("synth", "train", "eval", "cv", "ablate", "degrade-eval", "export", "report")

# option defaults per command; keys are argparse dests
COMMON = {"seed": 0, "jobs": 1}
DEFAULTS = {
    "synth": {"students": 50, "activities": 3.28, "gaze_uninformative": 0.5, "synth": {}},
    "train": {"data": None, "variant": "D", "train": {}},
    "eval": {"data": None, "model": None, "conditions": "clean"},
    "cv": {"data": None, "variant": "D", "k": 10, "repeats": 1, "conditions": "clean",
           "save_checkpoints": True, "train": {}},
    "ablate": {"data": None, "k": 10, "repeats": 1, "alphas": list(ALPHA_GRID),
               "tables": ["components", "combinations", "unimodal", "alpha"], "train": {}},
    "degrade-eval": {"data": None, "k": 10, "repeats": 1, "baseline": "B", "train": {}},
    "export": {"data": None, "model": None, "importance_repeats": 5},
    "report": {"runs": []},
}

# flags that map straight onto TrainConfig fields
TRAIN_FLAGS = {"alpha": "alpha", "epochs": "max_epochs", "batch_size": "batch_size", "lr": "lr",
               "aff_mode": "aff_mode", "modalities": "modality_mask",
               "train_degradation": "train_degradation", "patience": "early_stop_patience"}


class UsageError(AffuseError):
    pass


# ---------------------------------------------------------------- parsing

def _add_common(p):
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON file of options (flags override it)")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--jobs", type=int, default=S, help="parallel fold workers")
    p.add_argument("--force", action="store_true", default=S, help="allow a non-empty --out")


def _add_train_flags(p):
    S = argparse.SUPPRESS
    p.add_argument("--variant", choices=sorted(VARIANTS), default=S)
    p.add_argument("--alpha", type=float, default=S)
    p.add_argument("--epochs", type=int, default=S, help="max epochs")
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--patience", type=int, default=S, help="early-stopping patience")
    p.add_argument("--aff-mode", choices=("instance", "class"), default=S)
    p.add_argument("--modalities", default=S, help="comma list, e.g. AU,Trace")
    p.add_argument("--train-degradation", default=S,
                   help="'grid' (nine robustness conditions), 'none', or a JSON spec list / file")


def build_parser():
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="affuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"affuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _add_common(p)
    p.add_argument("--students", type=int, default=S)
    p.add_argument("--activities", type=float, default=S, help="activities per student")
    p.add_argument("--gaze-uninformative", type=float, default=S,
                   help="fraction of students whose gaze carries no label signal")

    p = sub.add_parser("train", help="train one model on a whole dataset")
    _add_common(p)
    p.add_argument("--data", default=S)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a saved model")
    _add_common(p)
    p.add_argument("--data", default=S)
    p.add_argument("--model", default=S, help="checkpoint directory")
    p.add_argument("--conditions", default=S, help="'clean', 'grid', 'all' or JSON spec list / file")

    p = sub.add_parser("cv", help="student-grouped k-fold cross-validation")
    _add_common(p)
    p.add_argument("--data", default=S)
    p.add_argument("--k", type=int, default=S)
    p.add_argument("--repeats", type=int, default=S)
    p.add_argument("--conditions", default=S)
    p.add_argument("--no-checkpoints", dest="save_checkpoints", action="store_false", default=S)
    _add_train_flags(p)

    p = sub.add_parser("ablate", help="component, modality-combination and alpha ablations")
    _add_common(p)
    p.add_argument("--data", default=S)
    p.add_argument("--k", type=int, default=S)
    p.add_argument("--repeats", type=int, default=S)
    p.add_argument("--alphas", default=S, help="comma list of alpha values")
    p.add_argument("--tables", default=S, help="comma list from components,combinations,unimodal,alpha")
    _add_train_flags(p)

    p = sub.add_parser("degrade-eval", help="robustness table over the nine degradation conditions")
    _add_common(p)
    p.add_argument("--data", default=S)
    p.add_argument("--k", type=int, default=S)
    p.add_argument("--repeats", type=int, default=S)
    p.add_argument("--baseline", choices=sorted(VARIANTS), default=S)
    _add_train_flags(p)

    p = sub.add_parser("export", help="dump embeddings and permutation importance")
    _add_common(p)
    p.add_argument("--data", default=S)
    p.add_argument("--model", default=S)
    p.add_argument("--importance-repeats", type=int, default=S)

    p = sub.add_parser("report", help="render markdown tables from run directories")
    _add_common(p)
    p.add_argument("runs", nargs="*", default=S)
    return parser


def _read_json_arg(value, what):
    """Inline JSON or a path to a JSON file."""
    if isinstance(value, (list, dict)):
        return value
    text = value
    if not value.lstrip().startswith(("[", "{")):
        path = Path(value)
        if not path.exists():
            raise UsageError(f"{what}: {value!r} is neither JSON nor an existing file")
        text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what}: invalid JSON ({exc})") from None


def _spec_list(value, seed, what):
    if value in (None, "none"):
        return []
    if value == "grid":
        return spec_grid(seed)
    data = _read_json_arg(value, what)
    if isinstance(data, dict):
        data = [data]
    try:
        return [DegradationSpec.from_dict(d) for d in data]
    except ValidationError as exc:
        raise UsageError(f"{what}: {exc}") from None


def _conditions(value, seed):
    if value == "clean":
        return [CLEAN]
    if value == "all":
        return [CLEAN] + spec_grid(seed)
    return _spec_list(value, seed, "--conditions")


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the --config file and explicit flags into one plain dict."""
    cmd = args.command
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    opts = {"command": cmd, **COMMON, "out": None, "force": False, **json.loads(json.dumps(DEFAULTS[cmd]))}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"--config: no such file {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config {path}: invalid JSON ({exc})") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"--config {path}: expected a JSON object")
        if cfg.get("command", cmd) != cmd:
            raise UsageError(f"--config {path} was written by '{cfg['command']}', not '{cmd}'")
        allowed = set(opts) | {"command", "resolved", "version"} | set(TRAIN_FLAGS)
        unknown = set(cfg) - allowed
        if unknown:
            raise UsageError(f"--config {path}: unknown keys {sorted(unknown)}")
        cfg = {k: v for k, v in cfg.items() if k not in ("resolved", "version")}
        opts.update(cfg)
    train_over = {}
    for flag, field in TRAIN_FLAGS.items():
        if flag in given:
            train_over[field] = given.pop(flag)
    opts.update(given)
    if "train" in opts:
        opts["train"] = {**opts.get("train", {}), **train_over}
    for key in ("alphas", "tables"):
        if isinstance(opts.get(key), str):
            opts[key] = [x.strip() for x in opts[key].split(",") if x.strip()]
    if "alphas" in opts:
        try:
            opts["alphas"] = [float(a) for a in opts["alphas"]]
        except ValueError:
            raise UsageError(f"--alphas: expected numbers, got {opts['alphas']}") from None
    if opts["jobs"] < 1:
        raise UsageError("--jobs must be >= 1")
    if cmd != "report" and not opts.get("out"):
        raise UsageError(f"{cmd}: --out is required")
    return opts


def train_config(opts) -> TrainConfig:
    over = dict(opts.get("train", {}))
    over.setdefault("seed", opts["seed"])
    mods = over.get("modality_mask")
    if isinstance(mods, str):
        over["modality_mask"] = [m.strip() for m in mods.split(",") if m.strip()]
    bad = set(over.get("modality_mask", ())) - set(MODALITIES)
    if bad:
        raise UsageError(f"train.modality_mask: unknown modalities {sorted(bad)}")
    td = over.get("train_degradation")
    if isinstance(td, str):
        over["train_degradation"] = None if td == "grid" else _spec_list(td, over["seed"], "--train-degradation")
    try:
        cfg = TrainConfig.from_dict(over)
    except TypeError as exc:
        raise UsageError(f"train: {exc}") from None
    if "variant" in opts:
        cfg = variant_config(cfg, opts["variant"])
        if "alpha" in over and opts["variant"] == "D":
            cfg = replace(cfg, alpha=over["alpha"])
    return cfg


# ---------------------------------------------------------------- output helpers

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if v is None:
        return ""
    return str(v)


def write_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_csv(path: Path, rows, columns=None):
    columns = columns or list(dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    write_atomic(path, buf.getvalue())


def read_csv(path: Path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def prepare_out(opts) -> Path:
    out = Path(opts["out"])
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not opts["force"]:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
        for child in out.iterdir():
            shutil.rmtree(child) if child.is_dir() else child.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(out: Path, opts, extra=None):
    resolved = {k: v for k, v in opts.items() if k not in ("out", "force")}
    resolved["version"] = __version__
    if extra:
        resolved["resolved"] = extra
    write_atomic(out / "config.json", json.dumps(resolved, indent=1, sort_keys=True) + "\n")


def load_records(opts):
    if not opts.get("data"):
        raise UsageError(f"{opts['command']}: --data is required")
    path = Path(opts["data"])
    if not path.exists():
        raise UsageError(f"--data: no such directory {path}")
    return load_dataset(path)


def _md_table(header, rows):
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines)


def _pm(mean, std):
    return f"{float(mean):.3f} ± {float(std):.3f}"


# ---------------------------------------------------------------- commands

def cmd_synth(opts):
    over = dict(opts.get("synth", {}))
    over.setdefault("n_students", opts["students"])
    over.setdefault("activities_per_student", opts["activities"])
    over.setdefault("gaze_uninformative_fraction", opts["gaze_uninformative"])
    over.setdefault("seed", opts["seed"])
    try:
        cfg = SynthConfig.from_dict(over)
    except TypeError as exc:
        raise UsageError(f"synth: {exc}") from None
    out = prepare_out(opts)
    records = generate_synthetic(cfg)
    save_dataset(records, out)
    hist = np.bincount([r.label for r in records], minlength=len(CLASS_NAMES))
    n_students = len({r.student_id for r in records})
    print(f"students: {n_students}  activities: {len(records)}")
    print("classes: " + "  ".join(f"{n}={c}" for n, c in zip(CLASS_NAMES, hist)))
    # the config echo sits beside the manifest; loaders ignore it
    echo_config(out, opts, {"synth": cfg.to_dict(), "digest": dataset_digest(records)})
    return 0


def cmd_train(opts):
    records = load_records(opts)
    cfg = train_config(opts)
    out = prepare_out(opts)
    echo_config(out, opts, {"train": cfg.to_dict()})
    fit, val = carve_students(records, cfg.val_fraction, cfg.seed)
    model, art = train_model(fit, val, cfg, seed=cfg.seed)
    model.save(out / "checkpoints" / "model")
    write_csv(out / "losses.csv", art.losses)
    if art.trajectory:
        write_csv(out / "affinity_trajectory.csv", art.trajectory)
    rep = evaluate(model, fit, CLEAN, cfg.modality_mask)
    write_csv(out / "metrics.csv", [{"split": "train", **rep.row(), "best_epoch": art.best_epoch,
                                     "epochs_run": art.epochs_run}])
    print(f"trained {art.epochs_run} epochs (best {art.best_epoch}); train macro-F1 {rep.macro_f1:.3f}")
    return 0


def cmd_eval(opts):
    if not opts.get("model"):
        raise UsageError("eval: --model is required")
    records = load_records(opts)
    conditions = _conditions(opts["conditions"], opts["seed"])
    model = MultimodalModel.load(opts["model"])
    out = prepare_out(opts)
    echo_config(out, opts)
    rows = [evaluate(model, records, c).row() for c in conditions]
    write_csv(out / "metrics.csv", rows)
    for r in rows:
        print(f"{r['condition']:<22} macro-F1 {r['macro_f1']:.3f}  acc {r['accuracy']:.3f}")
    return 0


def _cv_artifacts(out, res, variant=None, save_checkpoints=False, cfg=None):
    """metrics / losses / trajectory rows for one cross-validation result."""
    metrics, losses, traj = [], [], []
    for repeat, fold, art, reports in res.folds:
        tag = {"repeat": repeat, "fold": fold}
        if variant:
            tag = {"variant": variant, **tag}
        for rep in reports:
            metrics.append({**tag, **{k: v for k, v in rep.row().items() if k not in ("fold", "repeat")},
                            "best_epoch": art.best_epoch, "epochs_run": art.epochs_run})
        losses += [{**tag, **r} for r in art.losses]
        traj += [{**tag, **r} for r in art.trajectory]
        if save_checkpoints and art.best_state is not None:
            model = MultimodalModel(cfg.model_config(0))
            model.load_state(art.best_state)
            model.save(out / "checkpoints" / f"{variant + '-' if variant else ''}r{repeat}-f{fold}")
    return metrics, losses, traj


def cmd_cv(opts):
    records = load_records(opts)
    cfg = train_config(opts)
    conditions = _conditions(opts["conditions"], opts["seed"])
    out = prepare_out(opts)
    echo_config(out, opts, {"train": cfg.to_dict(), "conditions": [c.to_dict() for c in conditions],
                            "digest": dataset_digest(records)})
    res = cross_validate(records, cfg, opts["k"], opts["repeats"], opts["jobs"], conditions)
    metrics, losses, traj = _cv_artifacts(out, res, save_checkpoints=opts["save_checkpoints"], cfg=cfg)
    write_csv(out / "metrics.csv", metrics)
    write_csv(out / "losses.csv", losses)
    if traj:
        write_csv(out / "affinity_trajectory.csv", traj,
                  ["repeat", "fold", "epoch", "class_group", "modality_pair", "condition", "mean_affinity"])
    summary = [{"condition": c, **s} for c, s in res.summary.items()]
    write_csv(out / "summary.csv", summary)
    for s in summary:
        print(f"{s['condition']:<22} macro-F1 {_pm(s['macro_f1_mean'], s['macro_f1_std'])}  "
              f"acc {_pm(s['accuracy_mean'], s['accuracy_std'])}")
    return 0


def cmd_ablate(opts):
    records = load_records(opts)
    cfg = train_config(opts)
    tables = set(opts["tables"])
    unknown = tables - {"components", "combinations", "unimodal", "alpha"}
    if unknown:
        raise UsageError(f"--tables: unknown tables {sorted(unknown)}")
    out = prepare_out(opts)
    echo_config(out, opts, {"train": cfg.to_dict()})
    summary, metrics = [], []
    for table, label, vcfg in ablation_configs(cfg, opts["alphas"] if "alpha" in tables else None):
        if table not in tables:
            continue
        log.info("ablate: %s / %s", table, label)
        res = cross_validate(records, vcfg, opts["k"], opts["repeats"], opts["jobs"])
        s = res.summary["clean"]
        summary.append({"table": table, "model": label, **s, "modalities": "+".join(vcfg.modality_mask),
                        "alpha": vcfg.alpha, "projection": vcfg.use_projection, "cama": vcfg.cama})
        for repeat, fold, art, reports in res.folds:
            for rep in reports:
                metrics.append({"table": table, "model": label, "repeat": repeat, "fold": fold,
                                **{k: v for k, v in rep.row().items() if k != "fold"}})
    write_csv(out / "metrics.csv", metrics)
    write_csv(out / "ablation.csv", summary)
    write_atomic(out / "report.md", render_ablation(summary) + "\n")
    print(render_ablation(summary))
    return 0


def cmd_degrade_eval(opts):
    records = load_records(opts)
    cfg = train_config({**opts, "variant": "D"})
    base = opts["baseline"]
    conditions = [CLEAN] + spec_grid(opts["seed"])
    out = prepare_out(opts)
    echo_config(out, opts, {"train": cfg.to_dict(), "conditions": [c.to_dict() for c in conditions]})
    results, metrics, losses = {}, [], []
    for name in dict.fromkeys((base, "D")):
        vcfg = variant_config(cfg, name)
        res = cross_validate(records, vcfg, opts["k"], opts["repeats"], opts["jobs"], conditions)
        results[name] = res
        m, l, _ = _cv_artifacts(out, res, variant=name)
        metrics += m
        losses += l
    table = []
    for c in conditions[1:]:
        row = {"condition": c.label}
        for name, res in results.items():
            s, clean = res.summary[c.label], res.summary["clean"]
            row[f"{name}_macro_f1"] = s["macro_f1_mean"]
            row[f"{name}_macro_f1_std"] = s["macro_f1_std"]
            row[f"{name}_drop"] = clean["macro_f1_mean"] - s["macro_f1_mean"]
        table.append(row)
    clean_row = {"condition": "clean", **{f"{n}_macro_f1": r.summary["clean"]["macro_f1_mean"]
                                          for n, r in results.items()}}
    write_csv(out / "metrics.csv", metrics)
    write_csv(out / "losses.csv", losses)
    write_csv(out / "robustness.csv", table)
    write_csv(out / "clean.csv", [clean_row])
    md = render_robustness(table, clean_row, list(results))
    write_atomic(out / "report.md", md + "\n")
    print(md)
    return 0


def cmd_export(opts):
    if not opts.get("model"):
        raise UsageError("export: --model is required")
    records = load_records(opts)
    model = MultimodalModel.load(opts["model"])
    out = prepare_out(opts)
    echo_config(out, opts)
    rows = export_embeddings(model, records)
    dim = rows[0]["vector"].size if rows else 0
    flat = [{k: v for k, v in r.items() if k != "vector"} | {f"e{i}": x for i, x in enumerate(r["vector"])}
            for r in rows]
    write_csv(out / "embeddings.csv", flat,
              ["activity_id", "student_id", "modality", "label"] + [f"e{i}" for i in range(dim)])
    scores, imp_rows = permutation_importance(model, records, opts["seed"], opts["importance_repeats"])
    write_csv(out / "importance.csv", imp_rows)
    write_csv(out / "importance_summary.csv",
              [{"modality": m, "importance": s} for m, s in sorted(scores.items(), key=lambda kv: -kv[1])])
    print(f"exported {len(rows)} embedding rows")
    for m, s in sorted(scores.items(), key=lambda kv: -kv[1]):
        print(f"{m:<6} importance {s:+.4f}")
    return 0


# ---------------------------------------------------------------- report

def render_ablation(summary):
    parts = []
    titles = {"components": ("Component ablation", "Model"),
              "combinations": ("Modality combinations", "Modality combination"),
              "unimodal": ("Unimodal baselines", "Modality"),
              "alpha": ("Affinity-loss weight", "alpha")}
    for table, (title, col) in titles.items():
        rows = [r for r in summary if r["table"] == table]
        if not rows:
            continue
        body = [(r["model"], _pm(r["macro_f1_mean"], r["macro_f1_std"]),
                 _pm(r["accuracy_mean"], r["accuracy_std"])) for r in rows]
        parts.append(f"### {title}\n\n" + _md_table([col, "Macro-F1", "Accuracy"], body))
    parts.append("Variant A is plain concatenation fusion (concat baseline). "
                 "Classes with no support in a fold score F1 = 0.")
    return "\n\n".join(parts)


def render_robustness(table, clean_row, variants):
    header = ["Condition"] + [VARIANTS[v] for v in variants]
    body = [["clean"] + [f"{float(clean_row[f'{v}_macro_f1']):.3f}" for v in variants]]
    for r in table:
        body.append([r["condition"]] + [f"{float(r[f'{v}_macro_f1']):.3f} (-{float(r[f'{v}_drop']):.3f})"
                                        for v in variants])
    return "### Robustness under degradation (macro-F1, drop from clean)\n\n" + _md_table(header, body)


def render_cv(summary_rows, title):
    body = [(r["condition"], _pm(r["macro_f1_mean"], r["macro_f1_std"]),
             _pm(r["accuracy_mean"], r["accuracy_std"]), r["n"]) for r in summary_rows]
    return f"### {title}\n\n" + _md_table(["Condition", "Macro-F1", "Accuracy", "Folds"], body)


def cmd_report(opts):
    runs = [Path(r) for r in opts["runs"]]
    if not runs:
        raise UsageError("report: name at least one run directory")
    parts = []
    for run in runs:
        if not run.is_dir():
            raise UsageError(f"report: no such run directory {run}")
        found = False
        if (run / "summary.csv").exists():
            parts.append(render_cv(read_csv(run / "summary.csv"), f"Cross-validation: {run.name}"))
            found = True
        if (run / "ablation.csv").exists():
            parts.append(render_ablation(read_csv(run / "ablation.csv")))
            found = True
        if (run / "robustness.csv").exists():
            table = read_csv(run / "robustness.csv")
            clean = read_csv(run / "clean.csv")[0]
            variants = [k[:-len("_macro_f1")] for k in clean if k.endswith("_macro_f1")]
            parts.append(render_robustness(table, clean, variants))
            found = True
        if not found and (run / "metrics.csv").exists():
            rows = read_csv(run / "metrics.csv")
            body = [(r.get("condition", ""), f"{float(r['macro_f1']):.3f}", f"{float(r['accuracy']):.3f}")
                    for r in rows]
            parts.append(f"### Metrics: {run.name}\n\n" + _md_table(["Condition", "Macro-F1", "Accuracy"], body))
            found = True
        if not found:
            raise UsageError(f"report: {run} holds no metrics.csv")
    md = "\n\n".join(parts) + "\n"
    if opts.get("out"):
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        target = out / "report.md"
        if target.exists() and not opts["force"]:
            raise UsageError(f"{target} exists; pass --force to overwrite")
        write_atomic(target, md)
    print(md, end="")
    return 0


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "cv": cmd_cv,
            "ablate": cmd_ablate, "degrade-eval": cmd_degrade_eval, "export": cmd_export,
            "report": cmd_report}


def setup_logging():
    level = os.environ.get("AFFUSE_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"AFFUSE_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        setup_logging()
        opts = resolve(args)
        return HANDLERS[args.command](opts)
    except (UsageError, ValidationError) as exc:
        print(f"affuse {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: diagnostic, exit 1
        log.debug("traceback", exc_info=True)
        print(f"affuse {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
