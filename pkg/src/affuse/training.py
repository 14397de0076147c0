"""Training loop, grouped cross-validation, ablations, robustness sweeps and exports."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import cama
from .data import MODALITIES, ActivityRecord, FoldPlan, carve_students, plan_folds
from .degradation import CLEAN, DegradationSpec, Kind, apply_all, spec_grid
from .encoders import ModelConfig, MultimodalModel
from .errors import TrainingError, ValidationError
from .metrics import MetricsReport, summarize

log = logging.getLogger(__name__)

# rows of the modality-combination table, in display order
COMBINATIONS = (
    ("Full Multimodal", ("AU", "Pose", "Gaze", "Trace")),
    ("Trace + AU", ("AU", "Trace")),
    ("Trace + Pose", ("Pose", "Trace")),
    ("Trace + Gaze", ("Gaze", "Trace")),
    ("AU + Pose", ("AU", "Pose")),
    ("AU + Gaze", ("AU", "Gaze")),
    ("Pose + Gaze", ("Pose", "Gaze")),
    ("Trace + AU + Pose", ("AU", "Pose", "Trace")),
)

VARIANTS = {
    "A": "A: concat baseline",
    "B": "B: + Projection",
    "C": "C: + Projection + CAMA",
    "D": "D: + Projection + CAMA + L_aff (Full)",
}

ALPHA_GRID = (0.1, 0.25, 0.5)
SNAPSHOT_DEGRADATION = DegradationSpec(Kind.GAZE_DROPOUT, rate=0.5, seed=12345)


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    plateau_patience: int = 2
    plateau_factor: float = 0.5
    min_lr: float = 1e-5
    early_stop_patience: int = 3
    max_epochs: int = 500
    alpha: float = 0.25
    seed: int = 0
    cama: bool = True
    # None -> the nine-condition robustness grid; [] disables degraded views
    train_degradation: list | None = None
    aff_mode: str = "instance"
    modality_mask: tuple = MODALITIES
    val_fraction: float = 0.2
    use_projection: bool = True
    dropout: float = 0.1
    gru_hidden: int = 64
    trace_hidden: int = 128
    trace_out: int = 64
    track_affinity: bool = True

    def __post_init__(self):
        self.modality_mask = tuple(m for m in MODALITIES if m in set(self.modality_mask))
        if self.train_degradation is not None:
            self.train_degradation = [
                s if isinstance(s, DegradationSpec) else DegradationSpec.from_dict(s)
                for s in self.train_degradation]
        self.validate()

    def validate(self):
        for name in ("batch_size", "max_epochs", "early_stop_patience", "plateau_patience",
                     "gru_hidden", "trace_hidden", "trace_out"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive", location=f"train.{name}")
        if self.lr <= 0:
            raise ValidationError("lr must be positive", location="train.lr")
        if not 0 < self.plateau_factor <= 1:
            raise ValidationError("plateau_factor must lie in (0, 1]", location="train.plateau_factor")
        if self.alpha < 0:
            raise ValidationError("alpha must be non-negative", location="train.alpha")
        if not self.modality_mask:
            raise ValidationError("modality_mask must name at least one modality", location="train.modality_mask")
        if self.aff_mode not in cama.AFF_MODES:
            raise ValidationError(f"aff_mode must be one of {cama.AFF_MODES}", location="train.aff_mode")
        if not 0 <= self.val_fraction < 1:
            raise ValidationError("val_fraction must lie in [0, 1)", location="train.val_fraction")
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout must lie in [0, 1)", location="train.dropout")

    @property
    def degradation_pool(self) -> list[DegradationSpec]:
        if not self.cama:
            return []
        return spec_grid(self.seed) if self.train_degradation is None else list(self.train_degradation)

    def model_config(self, seed) -> ModelConfig:
        return ModelConfig(gru_hidden=self.gru_hidden, trace_hidden=self.trace_hidden,
                           trace_out=self.trace_out, dropout=self.dropout,
                           use_projection=self.use_projection, seed=int(seed))

    def to_dict(self):
        d = asdict(self)
        d["modality_mask"] = list(self.modality_mask)
        if self.train_degradation is not None:
            d["train_degradation"] = [s.to_dict() for s in self.train_degradation]
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown training fields {sorted(unknown)}", location="train")
        return cls(**d)


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Ablation presets: A concat only, B + projection, C + view averaging, D full."""
    if variant == "A":
        return replace(cfg, use_projection=False, cama=False, alpha=0.0)
    if variant == "B":
        return replace(cfg, use_projection=True, cama=False, alpha=0.0)
    if variant == "C":
        return replace(cfg, use_projection=True, cama=True, alpha=0.0)
    if variant == "D":
        return replace(cfg, use_projection=True, cama=True, alpha=cfg.alpha if cfg.alpha > 0 else 0.25)
    raise ValidationError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")


@dataclass
class RunArtifacts:
    losses: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    best_state: dict | None = None
    fold_id: int | None = None
    train_students: list = field(default_factory=list)
    test_students: list = field(default_factory=list)


# ---------------------------------------------------------------- training

def _batch_losses(model, batch, cfg, rng, pool, training=True):
    labels = np.array([r.label for r in batch])
    emb = model.embed(batch, cfg.modality_mask, training=training, rng=rng)
    if training and pool:
        spec = pool[int(rng.integers(len(pool)))].with_seed(int(rng.integers(2**31 - 1)))
        deg = model.embed(apply_all(spec, batch), cfg.modality_mask, training=True, rng=rng)
        emb = cama.average_views(emb, deg)
    ce = ad.softmax_cross_entropy(model.logits(emb, len(batch)), labels)
    if cfg.alpha > 0:
        aff, _ = cama.alignment_loss(emb, labels, cfg.aff_mode)
    else:
        detached = {m: e.detach() for m, e in emb.items()}
        aff, _ = cama.alignment_loss(detached, labels, cfg.aff_mode)
    return cama.total_loss(ce, aff, cfg.alpha)


def validation_loss(model, records, cfg) -> float:
    """Eval-mode cross-entropy over ``records`` (batched like training)."""
    total, n = 0.0, 0
    for start in range(0, len(records), 64):
        batch = records[start:start + 64]
        emb = model.embed(batch, cfg.modality_mask, training=False)
        ce = ad.softmax_cross_entropy(model.logits(emb, len(batch)), [r.label for r in batch])
        total += ce.item() * len(batch)
        n += len(batch)
    return total / n


def _snapshot(model, records, cfg, epoch):
    rows = []
    labels = np.array([r.label for r in records])
    for condition, recs in (("orig", records), ("degraded", apply_all(SNAPSHOT_DEGRADATION, records))):
        emb = model.embed(recs, cfg.modality_mask, training=False)
        order = [m for m in MODALITIES if m in emb]
        if len(order) < 2:
            continue
        A = cama.affinity(cama.stack_modalities(emb, order), len(recs), order)
        for row in cama.affinity_snapshot(A, labels, order):
            rows.append({"epoch": epoch, "class_group": row["class_group"],
                         "modality_pair": row["modality_pair"],
                         "mean_affinity": row["mean_affinity"], "condition": condition})
    return rows


def train_model(fit: Sequence[ActivityRecord], val: Sequence[ActivityRecord], cfg: TrainConfig,
                seed: int, fold_id=None) -> tuple[MultimodalModel, RunArtifacts]:
    """Fit a model on ``fit`` with plateau LR decay and early stopping on ``val``.

    The best-validation parameters are restored before returning.
    """
    if not fit:
        raise ValidationError("no training activities", location=f"fold {fold_id}")
    fit = list(fit)
    val = list(val) if val else fit
    rng = np.random.default_rng([cfg.seed, seed])
    model = MultimodalModel(cfg.model_config(int(rng.integers(2**31 - 1))))
    opt = ad.Adam(model.parameters(cfg.modality_mask), lr=cfg.lr)
    pool = cfg.degradation_pool
    art = RunArtifacts(fold_id=fold_id)

    best = math.inf
    since_best = since_plateau = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(fit))
        sums = np.zeros(3)
        for bi, start in enumerate(range(0, len(fit), cfg.batch_size)):
            batch = [fit[i] for i in order[start:start + cfg.batch_size]]
            lb = _batch_losses(model, batch, cfg, rng, pool)
            if not all(math.isfinite(v) for v in (lb.l_ce, lb.l_aff, lb.l_total)):
                ids = ", ".join(r.activity_id for r in batch[:4])
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bi} (activities {ids}, ...): "
                    f"l_ce={lb.l_ce} l_aff={lb.l_aff}")
            lb.total.backward()
            opt.step()
            sums += np.array([lb.l_ce, lb.l_aff, lb.l_total]) * len(batch)
        sums /= len(fit)
        vloss = validation_loss(model, val, cfg)
        art.losses.append({"epoch": epoch, "lr": opt.lr, "l_ce": sums[0], "l_aff": sums[1],
                           "l_total": sums[2], "val_loss": vloss})
        if cfg.track_affinity:
            art.trajectory.extend(_snapshot(model, fit, cfg, epoch))
        art.epochs_run = epoch
        if vloss < best:
            best = vloss
            art.best_epoch = epoch
            art.best_state = model.state()
            since_best = since_plateau = 0
        else:
            since_best += 1
            since_plateau += 1
            if since_plateau >= cfg.plateau_patience:
                opt.lr = max(cfg.min_lr, opt.lr * cfg.plateau_factor)
                since_plateau = 0
            if since_best >= cfg.early_stop_patience:
                log.debug("fold %s: early stop at epoch %d (best %d)", fold_id, epoch, art.best_epoch)
                break
    model.load_state(art.best_state)
    return model, art


def train_fold(records, plan: FoldPlan, fold: int, cfg: TrainConfig, seed_offset=0):
    """Train on every student outside ``fold``; 20% of those students (seeded) form the validation split."""
    train, test = plan.split(records, fold)
    if not train or not test:
        raise ValidationError(f"fold {fold} has {len(train)} training and {len(test)} test activities")
    overlap = {r.student_id for r in train} & {r.student_id for r in test}
    if overlap:
        raise TrainingError(f"student leakage in fold {fold}: {sorted(overlap)}")
    split_seed = cfg.seed * 1000 + seed_offset * 100 + fold
    fit, val = carve_students(train, cfg.val_fraction, split_seed)
    model, art = train_model(fit, val, cfg, seed=split_seed, fold_id=fold)
    art.train_students = sorted({r.student_id for r in train})
    art.test_students = sorted({r.student_id for r in test})
    return model, art, test


# ---------------------------------------------------------------- evaluation

def evaluate(model, records, condition: DegradationSpec = CLEAN, modalities=MODALITIES, fold_id=None) -> MetricsReport:
    recs = apply_all(condition, records)
    preds = model.predict(recs, modalities)
    return MetricsReport.from_predictions([r.label for r in recs], preds, fold_id=fold_id,
                                          condition=condition.label)


def _fold_task(args):
    records, plan, fold, cfg, repeat, conditions = args
    model, art, test = train_fold(records, plan, fold, cfg, seed_offset=repeat)
    reports = [evaluate(model, test, c, cfg.modality_mask, fold_id=fold) for c in conditions]
    for r in reports:
        r.extra["repeat"] = repeat
    return art, reports


def run_folds(records, cfg: TrainConfig, k=10, repeats=1, conditions=(CLEAN,), jobs=1):
    """Train and evaluate every (repeat, fold); repeat r plans folds with seed ``cfg.seed + r``."""
    tasks = []
    for r in range(repeats):
        plan = plan_folds(records, k, cfg.seed + r)
        for f in range(k):
            tasks.append((records, plan, f, cfg, r, tuple(conditions)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_fold_task, tasks))
    else:
        results = [_fold_task(t) for t in tasks]
    for (_, _, f, _, _, _), (art, reports) in zip(tasks, results):
        art.fold_id = f
        art.metrics = reports
    return [(t[4], t[2], art, reports) for t, (art, reports) in zip(tasks, results)]


@dataclass
class CVResult:
    folds: list
    reports: list
    summary: dict

    def rows(self):
        return [rep.row() for rep in self.reports]


def cross_validate(records, cfg: TrainConfig, k=10, repeats=1, jobs=1, conditions=(CLEAN,)) -> CVResult:
    folds = run_folds(records, cfg, k, repeats, conditions, jobs)
    reports = [rep for *_, reps in folds for rep in reps]
    summary = {}
    for cond in dict.fromkeys(rep.condition for rep in reports):
        sel = [rep for rep in reports if rep.condition == cond]
        f1_mean, f1_std = summarize([r.macro_f1 for r in sel])
        acc_mean, acc_std = summarize([r.accuracy for r in sel])
        summary[cond] = {"macro_f1_mean": f1_mean, "macro_f1_std": f1_std,
                         "accuracy_mean": acc_mean, "accuracy_std": acc_std, "n": len(sel)}
    return CVResult(folds, reports, summary)


def ablation_configs(cfg: TrainConfig, alphas=None):
    """(table, row label, config) triples for the component and modality-combination tables."""
    out = [("components", VARIANTS[v], variant_config(cfg, v)) for v in "ABCD"]
    full = variant_config(cfg, "D")
    out += [("combinations", name, replace(full, modality_mask=mask)) for name, mask in COMBINATIONS]
    out += [("unimodal", f"{m} (Unimodal)", replace(variant_config(cfg, "B"), modality_mask=(m,)))
            for m in MODALITIES]
    for a in alphas or ():
        out.append(("alpha", f"alpha={a:g}", replace(full, alpha=a)))
    return out


def ablation_matrix(records, cfg: TrainConfig, k=10, repeats=1, jobs=1, alphas=None, tables=None):
    rows = []
    for table, label, vcfg in ablation_configs(cfg, alphas):
        if tables and table not in tables:
            continue
        res = cross_validate(records, vcfg, k, repeats, jobs)
        s = res.summary["clean"]
        rows.append({"table": table, "model": label, **s,
                     "modalities": "+".join(vcfg.modality_mask), "alpha": vcfg.alpha,
                     "projection": vcfg.use_projection, "cama": vcfg.cama})
    return rows


def robustness_table(records, cfg: TrainConfig, k=10, repeats=1, jobs=1, baseline="B"):
    """Clean and nine-condition macro-F1 for a baseline variant and the full model."""
    conditions = [CLEAN] + spec_grid(cfg.seed)
    out = {}
    for name in (baseline, "D"):
        out[name] = cross_validate(records, variant_config(cfg, name), k, repeats, jobs, conditions)
    rows = []
    for cond in [c.label for c in conditions]:
        rows.append({"condition": cond,
                     **{f"{VARIANTS[n]}": out[n].summary[cond]["macro_f1_mean"] for n in out}})
    return rows, out


# ---------------------------------------------------------------- exports

def export_embeddings(model, records, modalities=MODALITIES) -> list[dict]:
    emb = model.embed(records, modalities, training=False)
    rows = []
    for b, r in enumerate(records):
        for m in MODALITIES:
            if m not in emb or m in r.absent:
                continue
            rows.append({"activity_id": r.activity_id, "student_id": r.student_id, "modality": m,
                         "label": r.label, "vector": emb[m].data[b].copy()})
    return rows


def _fit_length(seq, T):
    """Nearest-index resampling of a donor sequence onto ``T`` steps."""
    if seq.shape[0] == T:
        return seq
    return seq[np.round(np.linspace(0, seq.shape[0] - 1, T)).astype(int)]


def permute_modality(records, modality, rng):
    """Give every record another record's ``modality`` stream, stretched to its own length."""
    perm = rng.permutation(len(records))
    return [r.replace(sequences={**r.sequences,
                                 modality: _fit_length(records[j].sequences[modality], r.length)})
            for r, j in zip(records, perm)]


def permutation_importance(model, records, seed=0, n_repeats=5, modalities=MODALITIES):
    """Macro-F1 drop when one modality's sequences are shuffled across activities."""
    if len(records) < 2:
        raise ValidationError("permutation importance needs at least two records")
    labels = [r.label for r in records]
    base = MetricsReport.from_predictions(labels, model.predict(records, modalities)).macro_f1
    rng = np.random.default_rng(seed)
    rows = []
    for m in modalities:
        for rep in range(n_repeats):
            shuffled = permute_modality(records, m, rng)
            f1 = MetricsReport.from_predictions(labels, model.predict(shuffled, modalities)).macro_f1
            rows.append({"modality": m, "repeat": rep, "baseline_f1": base,
                         "permuted_f1": f1, "drop": base - f1})
    scores = {m: float(np.mean([r["drop"] for r in rows if r["modality"] == m])) for m in modalities}
    return scores, rows
