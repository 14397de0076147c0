"""Activity records, multi-rate synchronisation, fold planning and synthetic data."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError

MODALITIES = ("AU", "Pose", "Gaze", "Trace")
FACIAL_MODALITIES = ("AU", "Pose", "Gaze")
MODALITY_DIMS = {"AU": 17, "Pose": 6, "Gaze": 6, "Trace": 768}
N_CLASSES = 4
CLASS_NAMES = tuple(f"Sat-{c + 1}" for c in range(N_CLASSES))
AU_RANGE = (0.0, 5.0)
TRACE_SCALE = 0.1
GAZE_REST = np.array([0.0, 0.0, -1.0, 0.0, 0.0, -1.0])

FEATURE_NAMES = {
    "AU": [f"AU{n:02d}_r" for n in (1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26, 45)],
    "Pose": ["pose_Tx", "pose_Ty", "pose_Tz", "pose_Rx", "pose_Ry", "pose_Rz"],
    "Gaze": ["gaze_0_x", "gaze_0_y", "gaze_0_z", "gaze_1_x", "gaze_1_y", "gaze_1_z"],
    "Trace": [f"emb_{i}" for i in range(768)],
}


def _check_modality(name):
    if name not in MODALITY_DIMS:
        raise ValidationError(f"unknown modality {name!r}; expected one of {MODALITIES}")


def _strictly_increasing(ts):
    return ts.ndim == 1 and bool(np.all(np.diff(ts) > 0))


@dataclass(frozen=True)
class RawModalityStream:
    modality: str
    timestamps: np.ndarray
    frames: np.ndarray

    def __post_init__(self):
        _check_modality(self.modality)
        ts = np.asarray(self.timestamps, dtype=np.float64)
        fr = np.asarray(self.frames, dtype=np.float64)
        if fr.ndim != 2 or fr.shape[1] != MODALITY_DIMS[self.modality]:
            raise ValidationError(
                f"{self.modality} frames must be T x {MODALITY_DIMS[self.modality]}, got {fr.shape}")
        if ts.shape != (fr.shape[0],):
            raise ValidationError(f"{fr.shape[0]} frames but {ts.size} timestamps")
        if not _strictly_increasing(ts):
            raise ValidationError(f"{self.modality} timestamps must be strictly increasing")
        if self.modality == "AU" and fr.size and (fr.min() < AU_RANGE[0] or fr.max() > AU_RANGE[1]):
            raise ValidationError("AU intensities must lie in [0, 5]")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "frames", fr)


@dataclass(frozen=True)
class ActivityRecord:
    """One student activity on the trace-event time base.

    ``absent`` lists modalities removed at inference; their sequences are kept
    but the model substitutes a zero embedding.
    """

    student_id: str
    activity_id: str
    sequences: Mapping[str, np.ndarray]
    label: int
    timestamps: np.ndarray | None = None
    absent: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        seqs = {}
        lengths = set()
        for m in MODALITIES:
            if m not in self.sequences:
                raise ValidationError(f"missing modality {m}", location=self.activity_id)
            arr = np.array(self.sequences[m], dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != MODALITY_DIMS[m]:
                raise ValidationError(
                    f"{m} must be T x {MODALITY_DIMS[m]}, got {arr.shape}", location=self.activity_id)
            arr.setflags(write=False)
            seqs[m] = arr
            lengths.add(arr.shape[0])
        if len(lengths) != 1 or 0 in lengths:
            raise ValidationError(f"sequence lengths disagree or are empty: {sorted(lengths)}",
                                  location=self.activity_id)
        if int(self.label) != self.label or not 0 <= int(self.label) < N_CLASSES:
            raise ValidationError(f"label {self.label} outside valid range 0-{N_CLASSES - 1}",
                                  location=self.activity_id)
        object.__setattr__(self, "sequences", seqs)
        object.__setattr__(self, "label", int(self.label))
        if self.timestamps is not None:
            ts = np.array(self.timestamps, dtype=np.float64)
            if ts.shape != (self.length,) or not _strictly_increasing(ts):
                raise ValidationError("timestamps must be strictly increasing, one per trace event",
                                      location=self.activity_id)
            ts.setflags(write=False)
            object.__setattr__(self, "timestamps", ts)
        absent = frozenset(self.absent)
        for m in absent:
            _check_modality(m)
        object.__setattr__(self, "absent", absent)

    @property
    def length(self):
        return next(iter(self.sequences.values())).shape[0]

    def replace(self, **changes):
        fields = dict(student_id=self.student_id, activity_id=self.activity_id,
                      sequences=self.sequences, label=self.label,
                      timestamps=self.timestamps, absent=self.absent)
        fields.update(changes)
        return ActivityRecord(**fields)


def records_equal(a: ActivityRecord, b: ActivityRecord) -> bool:
    if (a.student_id, a.activity_id, a.label, a.absent) != (b.student_id, b.activity_id, b.label, b.absent):
        return False
    if (a.timestamps is None) != (b.timestamps is None):
        return False
    if a.timestamps is not None and not np.array_equal(a.timestamps, b.timestamps):
        return False
    return all(np.array_equal(a.sequences[m], b.sequences[m]) for m in MODALITIES)


# ---------------------------------------------------------------- synchronisation

def synchronize(facial: RawModalityStream, trace_timestamps) -> np.ndarray:
    """Average facial frames over each trace interval ``(t_{k-1}, t_k]``.

    The first interval is open on the left (``t_0 = -inf``).  An interval
    holding no frame repeats the previous output row; a leading empty
    interval takes the first facial frame.
    """
    tk = np.asarray(trace_timestamps, dtype=np.float64)
    if tk.ndim != 1 or tk.size == 0:
        raise ValidationError("trace must contain at least one event")
    if not _strictly_increasing(tk):
        raise ValidationError("trace timestamps must be strictly increasing")
    if facial.frames.shape[0] == 0:
        raise ValidationError(f"{facial.modality} stream is empty")
    # frame i belongs to the interval k with t_{k-1} < t_i <= t_k
    bucket = np.searchsorted(tk, facial.timestamps, side="left")
    inside = bucket < tk.size
    dim = facial.frames.shape[1]
    sums = np.zeros((tk.size, dim))
    np.add.at(sums, bucket[inside], facial.frames[inside])
    counts = np.bincount(bucket[inside], minlength=tk.size)
    out = np.empty((tk.size, dim))
    previous = facial.frames[0]
    for k in range(tk.size):
        if counts[k]:
            out[k] = sums[k] / counts[k]
        else:
            out[k] = previous
        previous = out[k]
    return out


# ---------------------------------------------------------------- folds

@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: Mapping[str, int]

    def test_students(self, fold):
        return {s for s, f in self.assignments.items() if f == fold}

    def train_students(self, fold):
        return {s for s, f in self.assignments.items() if f != fold}

    def split(self, records, fold):
        test = self.test_students(fold)
        train = [r for r in records if r.student_id not in test]
        held = [r for r in records if r.student_id in test]
        return train, held


def student_ids(records) -> list[str]:
    return sorted({r.student_id for r in records})


def plan_folds(records: Sequence[ActivityRecord], k=10, seed=0) -> FoldPlan:
    if k < 2:
        raise ValidationError(f"k must be at least 2, got {k}")
    students = student_ids(records)
    if len(students) < k:
        raise ValidationError(f"{len(students)} distinct students cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(students))
    return FoldPlan(k, {students[j]: i % k for i, j in enumerate(order)})


def carve_students(records, fraction, seed):
    """Split ``records`` by student into (kept, carved) with ``fraction`` of students carved."""
    students = student_ids(records)
    n_carve = int(round(fraction * len(students)))
    if fraction <= 0 or n_carve == 0 or n_carve >= len(students):
        return list(records), []
    order = np.random.default_rng(seed).permutation(len(students))
    carved = {students[j] for j in order[:n_carve]}
    return ([r for r in records if r.student_id not in carved],
            [r for r in records if r.student_id in carved])


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthConfig:
    """Knobs for the class-conditional synthetic generator.

    ``*_signal`` scale how far apart class means sit relative to unit noise
    in each modality.  Gaze carries class signal only for the informative
    share of students.
    """

    n_students: int = 50
    activities_per_student: float = 3.28
    T_range: tuple[int, int] = (8, 16)
    class_balance: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    gaze_uninformative_fraction: float = 0.5
    seed: int = 0
    au_signal: float = 0.35
    pose_signal: float = 0.35
    gaze_signal: float = 2.0
    trace_signal: float = 0.35
    student_noise: float = 0.3
    frames_per_event: float = 3.0
    gaze_scale: float = 0.25

    def __post_init__(self):
        self.T_range = tuple(int(t) for t in self.T_range)
        self.class_balance = tuple(float(c) for c in self.class_balance)
        self.validate()

    def validate(self):
        if self.n_students <= 0 or self.activities_per_student <= 0:
            raise ValidationError("student and activity counts must be positive")
        lo, hi = self.T_range
        if lo < 1 or hi < lo:
            raise ValidationError(f"T_range must satisfy 1 <= lo <= hi, got {self.T_range}")
        if len(self.class_balance) != N_CLASSES or min(self.class_balance) < 0 or sum(self.class_balance) <= 0:
            raise ValidationError("class_balance needs four non-negative weights")
        if not 0.0 <= self.gaze_uninformative_fraction <= 1.0:
            raise ValidationError("gaze_uninformative_fraction must lie in [0, 1]")
        for name in ("au_signal", "pose_signal", "gaze_signal", "trace_signal", "student_noise"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if self.frames_per_event <= 0:
            raise ValidationError("frames_per_event must be positive")
        if self.gaze_scale <= 0:
            raise ValidationError("gaze_scale must be positive")

    def to_dict(self):
        d = asdict(self)
        d["T_range"] = list(self.T_range)
        d["class_balance"] = list(self.class_balance)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValidationError(f"unknown synth fields {sorted(unknown)}")
        return cls(**known)


def _allocate(total, weights):
    """Largest-remainder split of ``total`` items over ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    raw = total * w / w.sum()
    counts = np.floor(raw).astype(int)
    rest = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def _unit_rows(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_synthetic(cfg: SynthConfig) -> list[ActivityRecord]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_act = max(cfg.n_students, int(round(cfg.n_students * cfg.activities_per_student)))
    per_student = np.full(cfg.n_students, n_act // cfg.n_students)
    extra = rng.choice(cfg.n_students, size=n_act - per_student.sum(), replace=False)
    per_student[extra] += 1

    labels = np.repeat(np.arange(N_CLASSES), _allocate(n_act, cfg.class_balance))
    labels = labels[rng.permutation(n_act)]

    # one unit-norm class direction per modality; *_signal is the SNR along it
    au_pattern = _unit_rows(rng, N_CLASSES, 17)
    au_phase = rng.uniform(0, 2 * np.pi, size=N_CLASSES)
    pose_drift = _unit_rows(rng, N_CLASSES, 6)
    gaze_mean = _unit_rows(rng, N_CLASSES, 6)
    trace_centroid = _unit_rows(rng, N_CLASSES, 768)

    n_uninf = int(round(cfg.gaze_uninformative_fraction * cfg.n_students))
    gaze_informative = np.ones(cfg.n_students, dtype=bool)
    gaze_informative[rng.permutation(cfg.n_students)[:n_uninf]] = False

    records = []
    a = 0
    for s in range(cfg.n_students):
        sid = f"S{s:03d}"
        offset = {m: cfg.student_noise * rng.normal(size=MODALITY_DIMS[m]) for m in MODALITIES}
        for j in range(per_student[s]):
            c = int(labels[a])
            a += 1
            T = int(rng.integers(cfg.T_range[0], cfg.T_range[1] + 1))
            gaps = rng.exponential(1.0, size=T) + 0.05
            trace_ts = np.cumsum(gaps)
            n_frames = max(1, int(round(cfg.frames_per_event * T)))
            frame_ts = np.sort(rng.uniform(0.0, trace_ts[-1], size=n_frames))
            frame_ts = np.unique(frame_ts)
            phase = frame_ts / trace_ts[-1]

            au = (1.5 + 0.5 * (offset["AU"] + rng.normal(size=(frame_ts.size, 17))
                               + cfg.au_signal * au_pattern[c]
                               * (1.0 + np.sin(2 * np.pi * 2 * phase + au_phase[c]))[:, None]))
            au = np.clip(au, *AU_RANGE)
            pose = (offset["Pose"] + rng.normal(size=(frame_ts.size, 6))
                    + cfg.pose_signal * pose_drift[c] * (2.0 * phase)[:, None])
            gaze = offset["Gaze"] + rng.normal(size=(frame_ts.size, 6))
            if gaze_informative[s]:
                gaze = gaze + cfg.gaze_signal * gaze_mean[c]
            # two eye direction vectors scattered around looking straight at the screen
            gaze = GAZE_REST + cfg.gaze_scale * gaze
            trace = (offset["Trace"] + cfg.trace_signal * trace_centroid[c]
                     + rng.normal(size=(T, 768))) * TRACE_SCALE

            seqs = {
                "AU": synchronize(RawModalityStream("AU", frame_ts, au), trace_ts),
                "Pose": synchronize(RawModalityStream("Pose", frame_ts, pose), trace_ts),
                "Gaze": synchronize(RawModalityStream("Gaze", frame_ts, gaze), trace_ts),
                "Trace": trace,
            }
            records.append(ActivityRecord(sid, f"{sid}-A{j}", seqs, c, timestamps=trace_ts))
    return records


def dataset_digest(records) -> str:
    """SHA-256 over a canonical byte serialisation of ``records``."""
    h = hashlib.sha256()
    for r in records:
        h.update(f"{r.student_id}|{r.activity_id}|{r.label}|{sorted(r.absent)}".encode())
        if r.timestamps is not None:
            h.update(r.timestamps.tobytes())
        for m in MODALITIES:
            h.update(np.ascontiguousarray(r.sequences[m]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- persistence
#
# root/manifest.json            {"format": "affuse-dataset", "version": 1, "activities": [dir, ...]}
# root/<activity_id>/meta.json  {"student_id", "activity_id", "label"}
# root/<activity_id>/<Mod>.csv  header "timestamp,<feature names>", one row per trace event

MANIFEST = "manifest.json"
_FORMAT = "affuse-dataset"


def _fmt(x):
    return format(float(x), ".17g")


def save_dataset(records: Sequence[ActivityRecord], root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    dirs = []
    for r in records:
        d = root / r.activity_id
        d.mkdir(exist_ok=True)
        ts = r.timestamps if r.timestamps is not None else np.arange(1, r.length + 1, dtype=np.float64)
        for m in MODALITIES:
            with open(d / f"{m}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["timestamp", *FEATURE_NAMES[m]])
                for t, row in zip(ts, r.sequences[m]):
                    w.writerow([_fmt(t), *map(_fmt, row)])
        meta = {"student_id": r.student_id, "activity_id": r.activity_id, "label": r.label}
        (d / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
        dirs.append(r.activity_id)
    manifest = {"format": _FORMAT, "version": 1, "activities": dirs}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    return root


def _read_modality_csv(path: Path, modality):
    if not path.exists():
        raise ValidationError(f"missing {modality} file", location=str(path))
    dim = MODALITY_DIMS[modality]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError("empty file", location=str(path))
        if len(header) != dim + 1:
            raise ValidationError(
                f"header has {len(header) - 1} {modality} columns, expected {dim}", location=f"{path}:1")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise ValidationError(
                    f"row has {len(row) - 1} {modality} values, expected {dim}", location=f"{path}:{lineno}")
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise ValidationError(f"non-numeric value ({exc})", location=f"{path}:{lineno}") from None
    if not rows:
        raise ValidationError("no data rows", location=str(path))
    arr = np.array(rows)
    ts = arr[:, 0]
    bad = np.flatnonzero(np.diff(ts) <= 0)
    if bad.size:
        raise ValidationError("timestamps not strictly increasing", location=f"{path}:{int(bad[0]) + 3}")
    if not np.all(np.isfinite(arr)):
        line = int(np.flatnonzero(~np.isfinite(arr).all(axis=1))[0]) + 2
        raise ValidationError("non-finite value", location=f"{path}:{line}")
    return ts, arr[:, 1:]


def load_dataset(root) -> list[ActivityRecord]:
    root = Path(root)
    mpath = root / MANIFEST
    if not mpath.exists():
        raise ValidationError("missing manifest.json", location=str(root))
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != _FORMAT:
        raise ValidationError(f"unexpected format {manifest.get('format')!r}", location=str(mpath))
    records = []
    for name in manifest.get("activities", []):
        d = root / name
        meta_path = d / "meta.json"
        if not meta_path.exists():
            raise ValidationError("missing meta.json", location=str(meta_path))
        meta = json.loads(meta_path.read_text())
        for key in ("student_id", "activity_id", "label"):
            if key not in meta:
                raise ValidationError(f"missing field {key!r}", location=str(meta_path))
        label = meta["label"]
        if not isinstance(label, int) or not 0 <= label < N_CLASSES:
            raise ValidationError(f"label {label!r} outside valid range 0-{N_CLASSES - 1}",
                                  location=f"{meta_path}:label")
        seqs, stamps = {}, None
        for m in MODALITIES:
            path = d / f"{m}.csv"
            ts, values = _read_modality_csv(path, m)
            if stamps is None:
                stamps = ts
            elif ts.shape != stamps.shape or not np.array_equal(ts, stamps):
                raise ValidationError("timestamps differ from the other modality files", location=str(path))
            if m == "AU" and (values.min() < AU_RANGE[0] or values.max() > AU_RANGE[1]):
                line = int(np.flatnonzero((values < 0).any(1) | (values > 5).any(1))[0]) + 2
                raise ValidationError("AU intensity outside [0, 5]", location=f"{path}:{line}")
            seqs[m] = values
        records.append(ActivityRecord(str(meta["student_id"]), str(meta["activity_id"]), seqs,
                                      label, timestamps=stamps))
    return records
